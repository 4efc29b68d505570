"""``mesaha`` command line: phantom, train, infer, eval, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import inference as inf
from .metrics import (
    dsc_histogram,
    evaluate,
    format_group_table,
    write_report_csv,
)
from .network import ArchConfig, init_params, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_corpus, load_cases
from .preprocess import RoiBox
from .training import (
    DatasetSpec,
    TrainConfig,
    TrainingCase,
    apply_overrides,
    build_dataset,
    parse_kv_file,
    train,
)
from .volume_store import read_mask, read_volume, write_mask

log = logging.getLogger("mesaha")


class CliError(Exception):
    pass


def _kv_pairs(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _require_dir(path: Path, flag: str) -> Path:
    if not path.is_dir():
        raise CliError(f"{flag}: {path} is not a directory")
    return path


def _require_file(path: Path, flag: str) -> Path:
    if not path.is_file():
        raise CliError(f"{flag}: {path} does not exist")
    return path


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"{path}: output directory is not empty (pass --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- phantom ------------------------------------------------------------------


def cmd_phantom(args) -> int:
    dims = tuple(args.dims)
    if len(dims) != 3 or min(dims) < 1:
        raise CliError(f"--dims: need three positive integers, got {dims}")
    if min(dims[:2]) < args.min_side:
        raise CliError(f"--dims: slices must be at least {args.min_side} px for the patch, got {dims}")
    if min(args.spacing) <= 0:
        raise CliError(f"--spacing: must be positive, got {args.spacing}")
    base = PhantomSpec(dims=dims, spacing=tuple(args.spacing), rater_jitter_mm=args.jitter)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out}: output directory is not empty (pass --force to overwrite)")
    try:
        generate_corpus(out, args.train, args.val, args.test, args.seed, base, force=args.force)
    except ValueError as exc:
        raise CliError(f"--dims/--spacing: {exc}") from None
    print(f"wrote corpus to {out} ({args.train}/{args.val}/{args.test})")
    return 0


# --- train ----------------------------------------------------------------------


def _training_cases(corpus: Path, split: str) -> list[TrainingCase]:
    return [TrainingCase(c["id"], c["volume"], c["mask"]) for c in load_cases(corpus, split)]


def cmd_train(args) -> int:
    corpus = _require_dir(Path(args.corpus), "--corpus")
    pairs = parse_kv_file(_require_file(Path(args.config), "--config")) if args.config else {}
    pairs.update(_kv_pairs(args.set))
    arch_kw = {k[5:]: pairs.pop(k) for k in list(pairs) if k.startswith("arch.")}
    try:
        config = apply_overrides(TrainConfig(seed=args.seed), pairs)
        if args.epochs is not None:
            config = replace(config, epochs=args.epochs)
        if args.lr is not None:
            config = replace(config, lr=args.lr)
        if args.batch_size is not None:
            config = replace(config, batch_size=args.batch_size)
        if args.max_minutes is not None:
            config = replace(config, max_minutes=args.max_minutes)
        arch = ArchConfig(
            **{k: type(getattr(ArchConfig(), k))(v) for k, v in arch_kw.items()}
        ) if arch_kw else ArchConfig(base_channels=args.base_channels)
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise CliError(f"--config/--set: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, hist_path = out / "checkpoint.ckpt", out / "history.csv"
    start_epoch = 1
    if args.resume:
        net, meta = load_checkpoint(_require_file(ckpt, "--resume"))
        start_epoch = int(meta.get("epoch", 0)) + 1
    else:
        net = init_params(arch, args.seed)

    train_cases, val_cases = _training_cases(corpus, "train"), _training_cases(corpus, "val")
    if not train_cases:
        raise CliError(f"--corpus: {corpus} has no training cases")
    n_bg = max(1, round(args.background_ratio * sum(int(c.mask.voxels.any(axis=(1, 2)).sum()) for c in train_cases)))
    train_set = build_dataset(train_cases, DatasetSpec(n_background=n_bg, seed=args.seed))
    val_set = None
    if val_cases:
        n_bg_val = max(1, round(args.background_ratio * sum(int(c.mask.voxels.any(axis=(1, 2)).sum()) for c in val_cases)))
        val_set = build_dataset(val_cases, DatasetSpec(n_background=n_bg_val, seed=args.seed + 1))
    log.info("training on %d samples, validating on %d", len(train_set), len(val_set) if val_set else 0)
    net, hist = train(net, train_set, val_set, config, start_epoch=start_epoch)
    last_epoch = hist.rows[-1][0] if hist.rows else start_epoch - 1
    save_checkpoint(net, ckpt, {"epoch": last_epoch, "best_epoch": hist.best_epoch, "seed": args.seed})
    hist.write_csv(hist_path, append=args.resume)
    print(f"wrote {ckpt} and {hist_path} (best epoch {hist.best_epoch})")
    return 1 if hist.diverged else 0


# --- infer -----------------------------------------------------------------------


def _segmenter(args, truth_path):
    if args.oracle_model:
        if truth_path is None:
            raise CliError("--oracle-model needs --truth MASK")
        return inf.OracleSegmenter(read_mask(_require_file(Path(truth_path), "--truth")))
    if not args.checkpoint:
        raise CliError("--checkpoint is required unless --oracle-model is given")
    net, _ = load_checkpoint(_require_file(Path(args.checkpoint), "--checkpoint"))
    return inf.NetworkSegmenter(net)


def _seed_roi(text: str) -> RoiBox:
    try:
        return RoiBox.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_infer(args) -> int:
    if args.batch:
        return _infer_batch(args)
    if not args.volume or args.seed_roi is None:
        raise CliError("--volume and --seed-roi are required without --batch")
    volume = read_volume(_require_file(Path(args.volume), "--volume"))
    seed = args.seed_roi
    try:
        seed.validate(volume.dims)
    except IndexError as exc:
        raise CliError(f"--seed-roi: {exc}") from None
    segmenter = _segmenter(args, args.truth)
    config = inf.InferenceConfig(max_iterations=args.max_iterations)
    if args.mva:
        result = inf.segment_multiview(volume, seed, segmenter, config)
    else:
        result = inf.segment_nodule(volume, seed, segmenter, config)
    write_mask(result.mask, args.out)
    if args.trace:
        inf.write_trace(args.trace, result.trace, Path(args.volume).stem, timing=not args.no_timing)
    print(f"wrote {args.out} ({int(result.mask.voxels.sum())} voxels, {result.trace.iterations(kind='segment')} iterations)")
    return 0


def _infer_corpus_case(case, segmenter, config, mva):
    seg = segmenter if segmenter is not None else inf.OracleSegmenter(case["mask"])
    if mva:
        return inf.segment_multiview(case["volume"], case["seed"], seg, config)
    return inf.segment_nodule(case["volume"], case["seed"], seg, config)


def _infer_batch(args) -> int:
    if not args.corpus:
        raise CliError("--batch needs --corpus")
    corpus = _require_dir(Path(args.corpus), "--corpus")
    out = _prepare_out(Path(args.out), args.force)
    segmenter = None
    if not args.oracle_model:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --oracle-model is given")
        net, _ = load_checkpoint(_require_file(Path(args.checkpoint), "--checkpoint"))
        segmenter = inf.NetworkSegmenter(net)
    cases = load_cases(corpus, args.split, args.mask_kind)
    config = inf.InferenceConfig(max_iterations=args.max_iterations)
    (out / "traces").mkdir(exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(lambda c: _infer_corpus_case(c, segmenter, config, args.mva), cases))
    for case, result in zip(cases, results):
        write_mask(result.mask, out / f"{case['id']}.nvol")
        inf.write_trace(out / "traces" / f"{case['id']}.jsonl", result.trace, case["id"], timing=not args.no_timing)
    print(f"segmented {len(cases)} nodules into {out}")
    return 0


# --- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred_dir = _require_dir(Path(args.predictions), "--predictions")
    corpus = _require_dir(Path(args.corpus), "--corpus")
    out = _prepare_out(Path(args.out), args.force)
    cases = load_cases(corpus, args.split, args.mask_kind)
    missing = [c["id"] for c in cases if not (pred_dir / f"{c['id']}.nvol").is_file()]
    if missing:
        raise CliError(f"--predictions: missing masks for {', '.join(missing[:5])}")

    def one(case):
        return evaluate(read_mask(pred_dir / f"{case['id']}.nvol"), case["mask"], mode=args.distance_mode)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        reports = dict(zip((c["id"] for c in cases), pool.map(one, cases)))
    records = {c["id"]: c["record"] for c in cases}
    write_report_csv(out / "report.csv", reports, records)
    dscs = {k: r.dsc for k, r in reports.items()}
    (out / "groups.txt").write_text(format_group_table(dscs, records))
    with open(out / "dsc_histogram.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lower", "upper", "count"])
        w.writerows(dsc_histogram(dscs.values()))
    summary = {
        k: float(np.mean([getattr(r, k) for r in reports.values()])) if reports else float("nan")
        for k in ("dsc", "ppv", "sen", "asd", "rms", "hfd")
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(" ".join(f"{k}={v:.3f}" for k, v in summary.items()))
    return 0


# --- report ----------------------------------------------------------------------


def cmd_report(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    if args.history:
        hist_rows = list(csv.reader(open(_require_file(Path(args.history), "--history"))))
        with open(out / "loss_curves.csv", "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(hist_rows)

    diameters = {}
    if args.corpus:
        from .phantom import read_manifest

        for row in read_manifest(_require_dir(Path(args.corpus), "--corpus")):
            diameters[row["id"]] = float(row["diameter_mm"])
    entries = []
    if args.traces:
        for path in sorted(_require_dir(Path(args.traces), "--traces").glob("*.jsonl")):
            nodule, trace = inf.read_trace(path)
            if nodule in diameters:
                entries.append((diameters[nodule], trace))
    with open(out / "time_vs_diameter.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bucket", "count", "mean_ms"])
        for row in inf.timing_report(entries) if entries else []:
            w.writerow([row["bucket"], row["count"], f"{row['mean_ms']:.3f}"])

    if args.reports:
        rows = list(csv.DictReader(open(_require_file(Path(args.reports), "--reports"))))
        with open(out / "metric_bars.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "mean", "std"])
            for k in ("dsc", "ppv", "sen", "asd", "rms", "hfd"):
                vals = np.array([float(r[k]) for r in rows]) if rows else np.array([])
                w.writerow([k, f"{vals.mean():.6f}" if vals.size else "", f"{vals.std():.6f}" if vals.size else ""])
    print(f"wrote report tables to {out}")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--force", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mesaha", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="generate a synthetic corpus")
    ph.add_argument("--out", required=True)
    ph.add_argument("--train", type=int, default=60)
    ph.add_argument("--val", type=int, default=20)
    ph.add_argument("--test", type=int, default=20)
    ph.add_argument("--dims", type=int, nargs=3, default=list(PhantomSpec().dims), metavar=("X", "Y", "Z"))
    ph.add_argument("--spacing", type=float, nargs=3, default=list(PhantomSpec().spacing), metavar=("SX", "SY", "SZ"))
    ph.add_argument("--jitter", type=float, default=PhantomSpec().rater_jitter_mm, help="rater jitter in mm")
    ph.set_defaults(func=cmd_phantom, min_side=96)

    tr = sub.add_parser("train", parents=[common], help="train on a corpus")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", help="key=value training config file")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--max-minutes", type=float)
    tr.add_argument("--base-channels", type=int, default=ArchConfig().base_channels)
    tr.add_argument("--background-ratio", type=float, default=500 / 3000)
    tr.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ckpt")
    tr.set_defaults(func=cmd_train)

    ip = sub.add_parser("infer", parents=[common], help="segment one nodule, or a corpus split with --batch")
    ip.add_argument("--volume")
    ip.add_argument("--seed-roi", type=_seed_roi, help="slice,x_min,y_min,x_max,y_max")
    ip.add_argument("--truth", help="truth mask for --oracle-model")
    ip.add_argument("--trace", help="write the iteration log here")
    ip.add_argument("--batch", action="store_true", help="segment every nodule of --corpus/--split")
    ip.add_argument("--corpus")
    ip.add_argument("--split", default="test")
    ip.add_argument("--mask-kind", choices=("consensus", "truth"), default="consensus", help="mask the batch oracle follows")
    ip.add_argument("--out", required=True)
    ip.add_argument("--checkpoint")
    ip.add_argument("--oracle-model", action="store_true", help="use the ground-truth oracle (test hook)")
    ip.add_argument("--mva", action="store_true", help="fuse axial, sagittal and coronal runs")
    ip.add_argument("--max-iterations", type=int, default=256)
    ip.add_argument("--no-timing", action="store_true", help="zero wall-clock fields in traces")
    ip.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", parents=[common], help="score predicted masks")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--mask-kind", choices=("consensus", "truth"), default="consensus", help="reference mask")
    ev.add_argument("--out", required=True)
    ev.add_argument("--distance-mode", choices=("surface", "voxel"), default="surface")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", parents=[common], help="emit plot-ready CSV tables")
    rp.add_argument("--out", required=True)
    rp.add_argument("--history")
    rp.add_argument("--traces")
    rp.add_argument("--corpus", help="corpus manifest supplying nodule diameters")
    rp.add_argument("--reports", help="report.csv from eval")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mesaha {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, FileExistsError) as exc:
        print(f"mesaha {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
