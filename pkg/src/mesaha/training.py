"""Training-sample construction and the optimisation loop."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .inference import (
    InferenceConfig,
    NetworkSegmenter,
    OracleSegmenter,
    Segmenter,
    crop_mask_slice,
    segment_nodule,
)
from .losses import LossConfig, signed_distance_map, total_loss
from .metrics import MetricReport, evaluate
from .network import MesahaNet
from .preprocess import (
    PATCH,
    RoiBox,
    bbox,
    build_bundle,
    enlarged_box,
    ideal_adjacent_roi,
)
from .volume_store import BinaryMask3D, CtVolume

log = logging.getLogger(__name__)

LUNG_HU_BAND = (-950, -300)


@dataclass(frozen=True, eq=False)
class TrainingCase:
    """One annotated nodule: its volume and consensus mask.

    ``others`` lists masks of further nodules in the same volume so that
    background patches can avoid them.
    """

    case_id: str
    volume: CtVolume
    mask: BinaryMask3D
    others: tuple[BinaryMask3D, ...] = ()


@dataclass(frozen=True)
class DatasetSpec:
    n_nodule: Optional[int] = None  # None: one sample per nodule-bearing slice
    n_background: int = 0
    enlargement: float = 0.3
    margin: float = 0.2
    slab_slices: int = 3
    cap: float = PATCH * math.sqrt(2)
    patch_size: int = PATCH
    seed: int = 0


@dataclass(eq=False)
class SampleSet:
    """Stacked training samples.

    inputs: (N, 4, P, P) float32; gt, roi_prev, roi_next: (N, P, P) uint8;
    phi: (N, P, P) float32 signed distance of gt; provenance: N tuples
    (case id, slice, "nodule" | "background").
    """

    inputs: np.ndarray
    gt: np.ndarray
    roi_prev: np.ndarray
    roi_next: np.ndarray
    phi: np.ndarray
    provenance: list

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def is_end_slice(self) -> np.ndarray:
        return (self.roi_prev.sum(axis=(1, 2)) == 0) | (self.roi_next.sum(axis=(1, 2)) == 0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.inputs, self.gt, self.roi_prev, self.roi_next, self.phi):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.provenance).encode())
        return h.hexdigest()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("inputs", "gt", "roi_prev", "roi_next", "phi"):
            np.save(d / f"{name}.npy", getattr(self, name))
        with open(d / "manifest.tsv", "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["case", "slice", "kind"])
            w.writerows(self.provenance)

    @classmethod
    def load(cls, directory) -> "SampleSet":
        d = Path(directory)
        arrays = {n: np.load(d / f"{n}.npy") for n in ("inputs", "gt", "roi_prev", "roi_next", "phi")}
        with open(d / "manifest.tsv", newline="") as f:
            rows = list(csv.reader(f, delimiter="\t"))[1:]
        return cls(**arrays, provenance=[(c, int(s), k) for c, s, k in rows])


def _nodule_sample(case: TrainingCase, n: int, spec: DatasetSpec):
    m = case.mask.voxels
    x_dim, y_dim, _ = case.volume.dims
    x0, y0, x1, y1 = enlarged_box(bbox(m[n]), spec.enlargement)
    roi = RoiBox(n, max(x0, 0), max(y0, 0), min(x1, x_dim - 1), min(y1, y_dim - 1))
    bundle = build_bundle(case.volume, roi, spec.slab_slices, spec.patch_size)
    f = bundle.frame
    gt = crop_mask_slice(m, f, n)
    prev = ideal_adjacent_roi(crop_mask_slice(m, f, n - 1), spec.margin)
    nxt = ideal_adjacent_roi(crop_mask_slice(m, f, n + 1), spec.margin)
    return bundle.stacked(), gt, prev, nxt


def _background_sample(case: TrainingCase, rng, spec: DatasetSpec, tries: int = 200):
    vol = case.volume
    x_dim, y_dim, z_dim = vol.dims
    occupied = case.mask.voxels.astype(bool)
    for o in case.others:
        occupied = occupied | o.voxels.astype(bool)
    s = spec.patch_size
    for _ in range(tries):
        n = int(rng.integers(0, z_dim))
        w, h = (int(v) for v in rng.integers(6, 41, size=2))
        xa = int(rng.integers(0, max(x_dim - w, 0) + 1))
        ya = int(rng.integers(0, max(y_dim - h, 0) + 1))
        roi = RoiBox(n, xa, ya, min(xa + w - 1, x_dim - 1), min(ya + h - 1, y_dim - 1))
        bundle = build_bundle(vol, roi, spec.slab_slices, s)
        f = bundle.frame
        if any(crop_mask_slice(occupied, f, k).any() for k in (n - 1, n, n + 1)):
            continue
        hu = vol.voxels[n, f.y0 : f.y0 + s, f.x0 : f.x0 + s]
        lung = (hu >= LUNG_HU_BAND[0]) & (hu <= LUNG_HU_BAND[1])
        if lung.mean() <= 0.5:
            continue
        zero = np.zeros((s, s), np.uint8)
        return bundle.stacked(), zero, zero, zero, n
    raise RuntimeError(f"{case.case_id}: no nodule-free lung patch found in {tries} tries")


def build_dataset(cases: Sequence[TrainingCase], spec: DatasetSpec = DatasetSpec()) -> SampleSet:
    """Nodule samples (one per nodule-bearing slice) plus random background patches.

    If ``spec.n_nodule`` exceeds the available slices, slices are resampled
    with replacement (logged); if it is smaller, a seeded subset is drawn.
    """
    rng = np.random.default_rng(spec.seed)
    slots = [(ci, int(n)) for ci, c in enumerate(cases) for n in np.nonzero(c.mask.voxels.any(axis=(1, 2)))[0]]
    if spec.n_nodule is not None:
        if not slots and spec.n_nodule > 0:
            raise ValueError("no nodule-bearing slices to sample from")
        if spec.n_nodule > len(slots):
            log.warning("resampling %d nodule slices with replacement to reach %d", len(slots), spec.n_nodule)
            extra = rng.choice(len(slots), spec.n_nodule - len(slots), replace=True)
            slots = slots + [slots[i] for i in sorted(extra)]
        elif spec.n_nodule < len(slots):
            keep = np.sort(rng.choice(len(slots), spec.n_nodule, replace=False))
            slots = [slots[i] for i in keep]

    xs, gts, prevs, nexts, prov = [], [], [], [], []
    for ci, n in slots:
        x, g, p, q = _nodule_sample(cases[ci], n, spec)
        xs.append(x), gts.append(g), prevs.append(p), nexts.append(q)
        prov.append((cases[ci].case_id, n, "nodule"))
    for _ in range(spec.n_background):
        ci = int(rng.integers(0, len(cases)))
        x, g, p, q, n = _background_sample(cases[ci], rng, spec)
        xs.append(x), gts.append(g), prevs.append(p), nexts.append(q)
        prov.append((cases[ci].case_id, n, "background"))

    s = spec.patch_size
    gt = np.array(gts, dtype=np.uint8).reshape(-1, s, s)
    phi = np.array([signed_distance_map(g, spec.cap) for g in gt], dtype=np.float32).reshape(-1, s, s)
    return SampleSet(
        inputs=np.array(xs, dtype=np.float32).reshape(-1, 4, s, s),
        gt=gt,
        roi_prev=np.array(prevs, dtype=np.uint8).reshape(-1, s, s),
        roi_next=np.array(nexts, dtype=np.uint8).reshape(-1, s, s),
        phi=phi,
        provenance=prov,
    )


# --- optimisation ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 15
    lr: float = 1e-3
    epochs: int = 200
    seed: int = 0
    max_minutes: Optional[float] = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be a finite number >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


_LOSS_KEYS = {f.name for f in fields(LossConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss"}


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if value.lower() == "none":
        return None
    return float(value)


def apply_overrides(config: TrainConfig, pairs: dict) -> TrainConfig:
    """Apply ``key=value`` settings; ``loss.``-prefixed or bare LossConfig keys go to the loss."""
    train_kw, loss_kw = {}, {}
    for key, value in pairs.items():
        k = key.removeprefix("loss.")
        if k in _LOSS_KEYS and (key.startswith("loss.") or k not in _TRAIN_KEYS):
            loss_kw[k] = _coerce(value, getattr(config.loss, k))
        elif key in _TRAIN_KEYS:
            cur = getattr(config, key)
            train_kw[key] = _coerce(value, cur if cur is not None else 0.0)
        else:
            raise KeyError(f"unknown training config key {key!r}")
    return replace(config, loss=replace(config.loss, **loss_kw), **train_kw)


def parse_kv_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=config.lr)


def _batches(samples: SampleSet, idx: np.ndarray, batch_size: int):
    for start in range(0, len(idx), batch_size):
        b = idx[start : start + batch_size]
        yield (
            torch.from_numpy(samples.inputs[b]),
            torch.from_numpy(samples.gt[b].astype(np.float32)),
            torch.from_numpy(samples.roi_prev[b].astype(np.float32)),
            torch.from_numpy(samples.roi_next[b].astype(np.float32)),
            torch.from_numpy(samples.phi[b]),
        )


def slice_dsc(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-sample 2D DSC (fraction) of binarised predictions; 1 when both empty."""
    p, g = pred >= 0.5, gt.astype(bool)
    inter = (p & g).sum(axis=(1, 2))
    denom = p.sum(axis=(1, 2)) + g.sum(axis=(1, 2))
    return np.where(denom == 0, 1.0, 2 * inter / np.maximum(denom, 1))


@torch.no_grad()
def validate(net: MesahaNet, samples: SampleSet, config: TrainConfig) -> tuple[float, float]:
    """(mean loss, mean slice DSC over nodule samples)."""
    net.eval()
    losses, preds = [], []
    for x, g, rp, rn, phi in _batches(samples, np.arange(len(samples)), 32):
        out = net(x)
        loss, _ = total_loss(out, g, rp, rn, phi, config.loss)
        losses.append(float(loss) * len(x))
        preds.append(out[:, 0].numpy())
    if not preds:
        return float("nan"), float("nan")
    seg = np.concatenate(preds)
    nod = np.array([p[2] == "nodule" for p in samples.provenance])
    d = slice_dsc(seg[nod], samples.gt[nod]) if nod.any() else slice_dsc(seg, samples.gt)
    return sum(losses) / len(samples), float(d.mean())


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, val_dsc)
    best_epoch: int = 0
    diverged: bool = False

    def write_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(["epoch", "train_loss", "val_loss", "val_dsc"])
            for e, tl, vl, vd in self.rows:
                w.writerow([e, f"{tl:.6f}", f"{vl:.6f}", f"{vd:.6f}"])


def train(
    net: MesahaNet,
    train_set: SampleSet,
    val_set: Optional[SampleSet],
    config: TrainConfig = TrainConfig(),
    start_epoch: int = 1,
    on_epoch: Optional[Callable[[int, tuple], None]] = None,
) -> tuple[MesahaNet, History]:
    """Mini-batch Adam on the composite loss; keeps the best-validation-DSC weights.

    Without a validation set the final weights are returned. A non-finite
    loss stops training and returns the last good weights with
    ``history.diverged`` set.
    """
    torch.manual_seed(config.seed)
    opt = make_optimizer(net.parameters(), config)
    gen = np.random.default_rng(config.seed)
    hist = History()
    best_dsc, best_state = -math.inf, copy.deepcopy(net.state_dict())
    good_state = best_state
    t_start = time.monotonic()
    for epoch in range(start_epoch, start_epoch + config.epochs):
        net.train()
        order = gen.permutation(len(train_set))
        total, count = 0.0, 0
        try:
            for x, g, rp, rn, phi in _batches(train_set, order, config.batch_size):
                if len(x) < 2 and len(train_set) >= 2:
                    continue  # batch-norm needs more than one sample
                out = net(x)
                loss, _ = total_loss(out, g, rp, rn, phi, config.loss)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(x)
                count += len(x)
        except FloatingPointError as exc:
            log.error("epoch %d diverged: %s", epoch, exc)
            net.load_state_dict(good_state)
            hist.diverged = True
            break
        good_state = copy.deepcopy(net.state_dict())
        train_loss = total / max(count, 1)
        if val_set is not None and len(val_set):
            val_loss, val_dsc = validate(net, val_set, config)
        else:
            val_loss, val_dsc = float("nan"), float("nan")
        hist.rows.append((epoch, train_loss, val_loss, val_dsc))
        log.info("epoch %d train %.5f val %.5f dsc %.4f", epoch, train_loss, val_loss, val_dsc)
        if on_epoch is not None:
            on_epoch(epoch, hist.rows[-1])
        if val_set is None or not len(val_set):
            best_state, hist.best_epoch = good_state, epoch
        elif val_dsc > best_dsc:
            best_dsc, best_state, hist.best_epoch = val_dsc, good_state, epoch
        if config.max_minutes is not None and time.monotonic() - t_start > 60 * config.max_minutes:
            log.info("time budget of %.1f min reached after epoch %d", config.max_minutes, epoch)
            break
    if hist.rows:
        net.load_state_dict(best_state)
    net.eval()
    return net, hist


def evaluate_checkpoint(
    segmenter: Segmenter | MesahaNet | None,
    cases: Sequence[tuple[str, CtVolume, BinaryMask3D, RoiBox]],
    config: InferenceConfig = InferenceConfig(),
) -> tuple[dict[str, MetricReport], dict]:
    """Run seeded segmentation on each case and score it against its mask.

    ``segmenter=None`` uses the ground-truth oracle of each case.
    """
    if isinstance(segmenter, MesahaNet):
        segmenter = NetworkSegmenter(segmenter)
    reports, traces = {}, {}
    for cid, volume, gt, seed in cases:
        seg = segmenter if segmenter is not None else OracleSegmenter(gt)
        result = segment_nodule(volume, seed, seg, config)
        reports[cid] = evaluate(result.mask, gt)
        traces[cid] = result.trace
    return reports, traces
