"""Slice-by-slice nodule segmentation from a single seed ROI.

Starting at the seed slice, each iteration crops a patch around the current
ROI, builds the MIP inputs, runs the segmenter and turns its predicted ROI
for the next slice into the next input box. The forward pass (n increasing)
starts at the seed; the backward pass starts from the ROI the seed iteration
predicted for slice n - 1. A pass stops when the predicted ROI is empty, the
volume ends, or the iteration cap is reached; each stop is logged as one
``stop`` record in the trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .preprocess import (
    MIN_ROI_AREA,
    PATCH,
    ROI_THRESHOLD,
    PatchBundle,
    PatchFrame,
    RoiBox,
    build_bundle,
    ideal_adjacent_roi,
    mask_to_roi_box,
)
from .volume_store import BinaryMask3D, CtVolume

DIAMETER_BUCKETS = ((3, 5), (5, 10), (10, 15), (15, 20), (20, 25), (25, 30), (30, None))


@dataclass(frozen=True, eq=False)
class NetOutput:
    seg: np.ndarray
    roi_prev: np.ndarray
    roi_next: np.ndarray


class Segmenter(Protocol):
    def __call__(self, bundle: PatchBundle) -> NetOutput: ...


@dataclass(frozen=True)
class InferenceConfig:
    slab_slices: int = 3
    seg_threshold: float = 0.5
    roi_threshold: float = ROI_THRESHOLD
    min_area: int = MIN_ROI_AREA
    max_iterations: int = 256
    patch_size: int = PATCH


class NetworkSegmenter:
    """Wrap a trained network as a :class:`Segmenter` (inference mode)."""

    def __init__(self, net: torch.nn.Module):
        self.net = net.eval()
        self.patch_size = net.config.patch_size

    @torch.no_grad()
    def __call__(self, bundle: PatchBundle) -> NetOutput:
        if bundle.frame.size != self.patch_size:
            raise ValueError(f"patch size {bundle.frame.size} does not match the network's {self.patch_size}")
        x = torch.from_numpy(bundle.stacked()[None])
        out = self.net(x)[0].numpy().astype(np.float64)
        return NetOutput(out[0], out[1], out[2])


def crop_mask_slice(mask: np.ndarray, frame: PatchFrame, n: int) -> np.ndarray:
    """Patch of a [z, y, x] mask; zero outside the volume."""
    s = frame.size
    out = np.zeros((s, s), dtype=np.uint8)
    if not 0 <= n < mask.shape[0]:
        return out
    part = mask[n, frame.y0 : frame.y0 + s, frame.x0 : frame.x0 + s]
    out[: part.shape[0], : part.shape[1]] = part
    return out


class OracleSegmenter:
    """Ground-truth stand-in for the network.

    Returns the truth crop as S_n and ideal ROI masks (bounding box plus
    ``margin`` per side) of the truth on slices n - 1 and n + 1.
    """

    def __init__(self, truth, margin: float = 0.2):
        self.truth = truth.voxels if isinstance(truth, BinaryMask3D) else np.asarray(truth, dtype=np.uint8)
        self.margin = margin

    def __call__(self, bundle: PatchBundle) -> NetOutput:
        f = bundle.frame
        seg = crop_mask_slice(self.truth, f, f.n).astype(np.float64)
        prev = ideal_adjacent_roi(crop_mask_slice(self.truth, f, f.n - 1), self.margin)
        nxt = ideal_adjacent_roi(crop_mask_slice(self.truth, f, f.n + 1), self.margin)
        return NetOutput(seg, prev.astype(np.float64), nxt.astype(np.float64))

    def for_view(self, axes: tuple[int, int, int]) -> "OracleSegmenter":
        return OracleSegmenter(np.transpose(self.truth, axes), self.margin)


# --- trace ---------------------------------------------------------------------


@dataclass
class TraceRecord:
    direction: str  # "forward" | "backward" | "fixed"
    slice: int
    kind: str  # "segment" | "stop"
    box: Optional[tuple[int, int, int, int]] = None  # input ROI (x_min, y_min, x_max, y_max)
    seg_pixels: int = 0
    next_box: Optional[tuple[int, int, int, int]] = None  # predicted ROI for the next slice in this direction
    reason: str = ""  # stop reason: empty_roi | volume_end | cap
    ms: float = 0.0


@dataclass
class InferenceTrace:
    records: list[TraceRecord] = field(default_factory=list)

    @property
    def total_ms(self) -> float:
        return float(sum(r.ms for r in self.records))

    @property
    def truncated(self) -> bool:
        return any(r.reason == "cap" for r in self.records)

    def iterations(self, direction: Optional[str] = None, kind: Optional[str] = None) -> int:
        return sum(
            1
            for r in self.records
            if (direction is None or r.direction == direction) and (kind is None or r.kind == kind)
        )

    def visited(self, direction: str) -> list[int]:
        return [r.slice for r in self.records if r.direction == direction and r.kind == "segment"]


@dataclass
class SegResult:
    mask: BinaryMask3D
    trace: InferenceTrace


def _box_tuple(box: Optional[RoiBox]):
    return None if box is None else (box.x_min, box.y_min, box.x_max, box.y_max)


def write_trace(path, trace: InferenceTrace, nodule_id: str = "", timing: bool = True) -> None:
    """One JSON object per line; ``timing=False`` zeroes ``ms`` for byte-stable logs."""
    with open(path, "w") as f:
        for r in trace.records:
            rec = asdict(r)
            if not timing:
                rec["ms"] = 0.0
            rec["nodule"] = nodule_id
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path) -> tuple[str, InferenceTrace]:
    records, nodule = [], ""
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        nodule = rec.pop("nodule", nodule)
        for key in ("box", "next_box"):
            if rec[key] is not None:
                rec[key] = tuple(rec[key])
        records.append(TraceRecord(**rec))
    return nodule, InferenceTrace(records)


# --- the propagation loop ------------------------------------------------------------


def _paste_seg(mask: np.ndarray, seg: np.ndarray, frame: PatchFrame, n: int, threshold: float) -> int:
    z, y, x = mask.shape
    h, w = min(frame.size, y - frame.y0), min(frame.size, x - frame.x0)
    binary = seg[:h, :w] >= threshold
    mask[n, frame.y0 : frame.y0 + h, frame.x0 : frame.x0 + w] |= binary
    return int(binary.sum())


def run_direction(
    volume: CtVolume,
    start: Optional[RoiBox],
    step: int,
    segmenter: Segmenter,
    config: InferenceConfig = InferenceConfig(),
    mask: Optional[np.ndarray] = None,
    start_slice: Optional[int] = None,
) -> tuple[np.ndarray, list[TraceRecord], Optional[NetOutput], Optional[PatchFrame]]:
    """Propagate from ``start`` in one direction (step +1 or -1).

    Returns the (updated) mask, the trace records, and the first iteration's
    network output and frame (used to seed the opposite direction).
    """
    if step not in (1, -1):
        raise ValueError("step must be +1 or -1")
    direction = "forward" if step > 0 else "backward"
    if mask is None:
        mask = np.zeros(volume.shape, dtype=bool)
    n = start.n if start is not None else start_slice
    if n is None:
        raise ValueError("run_direction needs a start box or a start slice")
    z = volume.shape[0]
    box = start
    records: list[TraceRecord] = []
    first = None
    while True:
        if not 0 <= n < z:
            records.append(TraceRecord(direction, n, "stop", reason="volume_end"))
            break
        if box is None:
            records.append(TraceRecord(direction, n, "stop", reason="empty_roi"))
            break
        if len(records) >= config.max_iterations:
            records.append(TraceRecord(direction, n, "stop", box=_box_tuple(box), reason="cap"))
            break
        t0 = time.perf_counter()
        bundle = build_bundle(volume, box, config.slab_slices, config.patch_size)
        out = segmenter(bundle)
        if first is None:
            first = (out, bundle.frame)
        pixels = _paste_seg(mask, out.seg, bundle.frame, n, config.seg_threshold)
        ahead = out.roi_next if step > 0 else out.roi_prev
        nxt = mask_to_roi_box(
            ahead, bundle.frame, n + step, config.roi_threshold, config.min_area, dims=volume.dims
        )
        ms = (time.perf_counter() - t0) * 1000
        records.append(TraceRecord(direction, n, "segment", _box_tuple(box), pixels, _box_tuple(nxt), ms=ms))
        box, n = nxt, n + step
    out, frame = first if first is not None else (None, None)
    return mask, records, out, frame


def segment_nodule(
    volume: CtVolume,
    seed: RoiBox,
    segmenter: Segmenter,
    config: InferenceConfig = InferenceConfig(),
) -> SegResult:
    """Segment one nodule in both directions from a seed ROI."""
    seed.validate(volume.dims)
    mask, fwd, first, frame = run_direction(volume, seed, +1, segmenter, config)
    back_start = None
    if first is not None:
        back_start = mask_to_roi_box(
            first.roi_prev, frame, seed.n - 1, config.roi_threshold, config.min_area, dims=volume.dims
        )
    mask, bwd, _, _ = run_direction(volume, back_start, -1, segmenter, config, mask, start_slice=seed.n - 1)
    return SegResult(BinaryMask3D(mask.astype(np.uint8), volume.spacing), InferenceTrace(fwd + bwd))


# --- multi-view ---------------------------------------------------------------------

# array axis orders that put the named axis in the slice position
VIEW_AXES = {"axial": (0, 1, 2), "coronal": (1, 0, 2), "sagittal": (2, 0, 1)}


def permute_volume(volume: CtVolume, axes: tuple[int, int, int]) -> CtVolume:
    sp = volume.spacing[::-1]  # (sz, sy, sx) in array order
    new_sp = tuple(sp[a] for a in axes)[::-1]
    return CtVolume(np.transpose(volume.voxels, axes), new_sp)


def segment_fixed_roi(
    volume: CtVolume,
    box: tuple[int, int, int, int],
    slices: Sequence[int],
    segmenter: Segmenter,
    config: InferenceConfig = InferenceConfig(),
) -> tuple[np.ndarray, InferenceTrace]:
    """Segment each listed slice with the same (non-adaptive) ROI."""
    mask = np.zeros(volume.shape, dtype=bool)
    trace = InferenceTrace()
    for n in slices:
        t0 = time.perf_counter()
        roi = RoiBox(n, *box)
        bundle = build_bundle(volume, roi, config.slab_slices, config.patch_size)
        out = segmenter(bundle)
        pixels = _paste_seg(mask, out.seg, bundle.frame, n, config.seg_threshold)
        trace.records.append(
            TraceRecord("fixed", n, "segment", box, pixels, ms=(time.perf_counter() - t0) * 1000)
        )
    return mask, trace


def fuse_multiview(masks: Sequence, mode: str = "union") -> BinaryMask3D:
    """Voxelwise union (default) or 2-of-3 majority of per-view masks."""
    arrays = [m.voxels if isinstance(m, BinaryMask3D) else np.asarray(m, dtype=np.uint8) for m in masks]
    if not arrays:
        raise ValueError("no masks to fuse")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError("multi-view masks must share dimensions")
    spacing = next((m.spacing for m in masks if isinstance(m, BinaryMask3D)), (1.0, 1.0, 1.0))
    stack = np.stack(arrays).astype(np.int32)
    if mode == "union":
        fused = stack.max(axis=0)
    elif mode == "majority":
        fused = (stack.sum(axis=0) * 2 > len(arrays)).astype(np.int32)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return BinaryMask3D(fused.astype(np.uint8), spacing)


def segment_multiview(
    volume: CtVolume,
    seed: RoiBox,
    segmenter: Segmenter,
    config: InferenceConfig = InferenceConfig(),
    mode: str = "union",
) -> SegResult:
    """Axial adaptive run plus fixed-ROI sagittal and coronal runs, fused.

    The fixed ROI for the other views is the axial result's bounding box
    projected onto that view (or the seed box if the axial result is empty).
    """
    axial = segment_nodule(volume, seed, segmenter, config)
    m = axial.mask.voxels
    if m.any():
        zz, yy, xx = np.nonzero(m)
        lo, hi = (int(zz.min()), int(yy.min()), int(xx.min())), (int(zz.max()), int(yy.max()), int(xx.max()))
    else:
        lo, hi = (seed.n, seed.y_min, seed.x_min), (seed.n, seed.y_max, seed.x_max)
    views = [axial.mask]
    trace = InferenceTrace(list(axial.trace.records))
    for name in ("sagittal", "coronal"):
        axes = VIEW_AXES[name]
        vol = permute_volume(volume, axes)
        seg_v = segmenter.for_view(axes) if hasattr(segmenter, "for_view") else segmenter
        # in permuted arrays: slice axis = axes[0], rows = axes[1], cols = axes[2]
        box = (lo[axes[2]], lo[axes[1]], hi[axes[2]], hi[axes[1]])
        mv, tr = segment_fixed_roi(vol, box, range(lo[axes[0]], hi[axes[0]] + 1), seg_v, config)
        views.append(np.transpose(mv, np.argsort(axes)).astype(np.uint8))
        trace.records.extend(tr.records)
    fused = fuse_multiview(views, mode)
    return SegResult(BinaryMask3D(fused.voxels, volume.spacing), trace)


def timing_report(
    entries: Sequence[tuple[float, InferenceTrace]],
    buckets: Sequence[tuple[float, Optional[float]]] = DIAMETER_BUCKETS,
) -> list[dict]:
    """Mean total wall-clock per nodule for each diameter bucket ``[lo, hi)``."""
    rows = []
    for lo, hi in buckets:
        times = [t.total_ms for d, t in entries if d >= lo and (hi is None or d < hi)]
        label = f"{lo}-{hi}" if hi is not None else f">{lo}"
        rows.append(
            {
                "bucket": label,
                "count": len(times),
                "mean_ms": float(np.mean(times)) if times else float("nan"),
            }
        )
    return rows
