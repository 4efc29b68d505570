import csv
import json

import numpy as np
import pytest

from mesaha.cli import build_parser, main
from mesaha.inference import read_trace, timing_report
from mesaha.phantom import load_cases, read_manifest
from mesaha.volume_store import read_mask

SMALL = ["--dims", "96", "96", "24"]


def _tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["phantom", "--out", str(out), "--train", "2", "--val", "1", "--test", "2", "--seed", "3", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def oracle_predictions(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("pred")
    args = ["infer", "--batch", "--oracle-model", "--mask-kind", "truth", "--corpus", str(corpus), "--out", str(out)]
    assert main(args + ["--force", "--no-timing", "--jobs", "2"]) == 0
    return out


def test_phantom_defaults_are_60_20_20():
    args = build_parser().parse_args(["phantom", "--out", "x"])
    assert (args.train, args.val, args.test) == (60, 20, 20)


def test_default_corpus_split_sizes(tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "c")]) == 0
    splits = [r["split"] for r in read_manifest(tmp_path / "c")]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (60, 20, 20)


def test_phantom_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        assert main(["phantom", "--out", str(tmp_path / name), "--train", "1", "--val", "0", "--test", "1", "--seed", "8", *SMALL]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


@pytest.mark.parametrize("dims", [["96", "96", "0"], ["40", "96", "24"]])
def test_phantom_bad_dims(tmp_path, capsys, dims):
    assert main(["phantom", "--out", str(tmp_path / "c"), "--dims", *dims]) == 2
    err = capsys.readouterr().err
    assert "--dims" in err and len(err.strip().splitlines()) == 1


def test_phantom_refuses_non_empty_out(corpus, capsys):
    assert main(["phantom", "--out", str(corpus), *SMALL]) == 2
    assert "--force" in capsys.readouterr().err


# --- train -----------------------------------------------------------------------


def test_train_smoke_and_resume(corpus, tmp_path):
    out = tmp_path / "run"
    base = ["train", "--corpus", str(corpus), "--out", str(out), "--epochs", "1", "--base-channels", "1", "--batch-size", "4"]
    assert main(base) == 0
    assert (out / "checkpoint.ckpt").is_file()
    assert main(base + ["--resume"]) == 0
    with open(out / "history.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_train_set_overrides(corpus, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--corpus", str(corpus), "--out", str(out), "--set", "epochs=1", "--set", "arch.base_channels=1", "--set", "aux_bce_weight=1"]
    assert main(args) == 0
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("momentum=0.9\n")
    assert main(["train", "--corpus", str(corpus), "--out", str(out), "--config", str(cfg)]) == 2


@pytest.mark.parametrize("lr", ["-0.1", "nan"])
def test_train_invalid_lr(corpus, tmp_path, capsys, lr):
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), "--lr", lr, "--epochs", "1"]) == 2
    assert "learning rate" in capsys.readouterr().err


def test_train_missing_corpus(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
    assert "--corpus" in capsys.readouterr().err


# --- infer -----------------------------------------------------------------------


def test_infer_oracle_gives_exact_truth(corpus, tmp_path):
    case = load_cases(corpus, "test")[0]
    row = next(r for r in read_manifest(corpus) if r["id"] == case["id"])
    pdir = corpus / row["split"] / row["phantom"]
    truth = next(pdir.glob("*_truth.nvol"))
    s = case["seed"]
    seed = f"{s.n},{s.x_min},{s.y_min},{s.x_max},{s.y_max}"
    out = tmp_path / "m.nvol"
    rc = main(["infer", "--volume", str(pdir / "volume.nvol"), "--seed-roi", seed, "--truth", str(truth),
               "--oracle-model", "--out", str(out), "--trace", str(tmp_path / "t.jsonl")])
    assert rc == 0
    assert np.array_equal(read_mask(out).voxels, read_mask(truth).voxels)
    _, trace = read_trace(tmp_path / "t.jsonl")
    assert trace.iterations(kind="stop") == 2


def test_infer_malformed_seed_prints_usage(corpus, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--volume", "v", "--seed-roi", "3,1,2", "--out", str(tmp_path / "m")])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert err.startswith("usage:") and "--seed-roi" in err


def test_infer_out_of_bounds_seed(corpus, tmp_path, capsys):
    pdir = next((corpus / "test").iterdir())
    rc = main(["infer", "--volume", str(pdir / "volume.nvol"), "--seed-roi", "99,1,1,5,5", "--oracle-model",
               "--truth", str(next(pdir.glob("*_truth.nvol"))), "--out", str(tmp_path / "m")])
    assert rc == 2 and "--seed-roi" in capsys.readouterr().err


def test_infer_needs_checkpoint(corpus, tmp_path, capsys):
    pdir = next((corpus / "test").iterdir())
    assert main(["infer", "--volume", str(pdir / "volume.nvol"), "--seed-roi", "5,1,1,5,5", "--out", str(tmp_path / "m")]) == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_batch_oracle_predictions_match_truth(corpus, oracle_predictions):
    for case in load_cases(corpus, "test", "truth"):
        assert np.array_equal(read_mask(oracle_predictions / f"{case['id']}.nvol").voxels, case["mask"].voxels)
        assert (oracle_predictions / "traces" / f"{case['id']}.jsonl").is_file()


# --- eval / report ----------------------------------------------------------------


def test_eval_perfect_predictions(corpus, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for r in read_manifest(corpus):
        if r["split"] == "test":
            src = corpus / "test" / r["phantom"] / f"nodule{r['nodule']}_consensus.nvol"
            (pred / f"{r['id']}.nvol").write_bytes(src.read_bytes())
    out = tmp_path / "ev"
    assert main(["eval", "--predictions", str(pred), "--corpus", str(corpus), "--out", str(out), "--jobs", "2"]) == 0
    with open(out / "report.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(load_cases(corpus, "test"))
    assert all(float(r["dsc"]) == 100 for r in rows)
    with open(out / "dsc_histogram.csv") as f:
        assert sum(int(r["count"]) for r in csv.DictReader(f)) == len(rows)
    assert json.loads((out / "summary.json").read_text())["hfd"] == 0
    assert (out / "groups.txt").read_text().splitlines()[0].split()[1:] == ["1", "2", "3", "4", "5", "6"]


def test_eval_missing_prediction(corpus, tmp_path, capsys):
    (tmp_path / "p").mkdir()
    assert main(["eval", "--predictions", str(tmp_path / "p"), "--corpus", str(corpus), "--out", str(tmp_path / "e")]) == 2
    assert "missing" in capsys.readouterr().err


def test_report_empty_traces_gives_header(tmp_path):
    (tmp_path / "tr").mkdir()
    assert main(["report", "--out", str(tmp_path / "r"), "--traces", str(tmp_path / "tr")]) == 0
    assert (tmp_path / "r" / "time_vs_diameter.csv").read_text() == "bucket,count,mean_ms\n"


def test_report_matches_timing_report_and_is_deterministic(corpus, oracle_predictions, tmp_path):
    ev = tmp_path / "ev"
    main(["eval", "--predictions", str(oracle_predictions), "--corpus", str(corpus), "--out", str(ev), "--mask-kind", "truth"])
    args = ["--traces", str(oracle_predictions / "traces"), "--corpus", str(corpus), "--reports", str(ev / "report.csv")]
    assert main(["report", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["report", "--out", str(tmp_path / "b"), *args]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    diam = {r["id"]: float(r["diameter_mm"]) for r in read_manifest(corpus)}
    entries = [(diam[nid], tr) for nid, tr in (read_trace(p) for p in sorted((oracle_predictions / "traces").glob("*.jsonl")))]
    with open(tmp_path / "a" / "time_vs_diameter.csv") as f:
        got = list(csv.DictReader(f))
    want = timing_report(entries)
    assert [(r["bucket"], int(r["count"])) for r in got] == [(w["bucket"], w["count"]) for w in want]
    with open(tmp_path / "a" / "metric_bars.csv") as f:
        bars = {r["metric"]: r for r in csv.DictReader(f)}
    assert float(bars["dsc"]["mean"]) == 100
