"""Overlap and surface-distance metrics for 3D segmentations.

DSC/PPV/SEN are percentages; ASD/rms/HFD are in mm, computed over surface
voxels (six-connectivity; foreground voxels on the volume border count as
surface). ``mode="voxel"`` uses every foreground voxel instead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume_store import CHARACTERISTICS, BinaryMask3D, NoduleRecord

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    ppv: float
    sen: float
    asd: float
    rms: float
    hfd: float
    tp: int
    fp: int
    fn: int
    # names of metrics whose denominator was zero or whose surfaces were empty
    flags: tuple[str, ...] = field(default=())

    def as_row(self) -> dict:
        row = asdict(self)
        row["flags"] = ";".join(self.flags)
        return row


def _bool(mask) -> np.ndarray:
    return mask.as_bool() if isinstance(mask, BinaryMask3D) else np.asarray(mask).astype(bool)


def confusion_counts(seg, gt) -> tuple[int, int, int]:
    s, g = _bool(seg), _bool(gt)
    if s.shape != g.shape:
        raise ValueError(f"dimension mismatch: {s.shape} vs {g.shape}")
    tp = int(np.count_nonzero(s & g))
    return tp, int(np.count_nonzero(s)) - tp, int(np.count_nonzero(g)) - tp


def dsc(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN) in percent; 100 when both masks are empty."""
    denom = 2 * tp + fp + fn
    return 100.0 if denom == 0 else 100.0 * 2 * tp / denom


def ppv(tp: int, fp: int) -> float:
    return 0.0 if tp + fp == 0 else 100.0 * tp / (tp + fp)


def sen(tp: int, fn: int) -> float:
    return 0.0 if tp + fn == 0 else 100.0 * tp / (tp + fn)


def extract_surface(mask, spacing=(1.0, 1.0, 1.0), mode: str = "surface") -> np.ndarray:
    """(N, 3) array of voxel centres in mm, ordered (z, y, x) like the arrays."""
    m = _bool(mask)
    if not m.any():
        raise ValueError("cannot extract a surface from an empty mask")
    if mode == "surface":
        m = m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    elif mode != "voxel":
        raise ValueError(f"mode must be 'surface' or 'voxel', got {mode!r}")
    sz_sy_sx = np.asarray(spacing, dtype=np.float64)[::-1]
    return np.argwhere(m) * sz_sy_sx


def surface_distances(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest-neighbour distances d(a_i, B) and d(b_j, A)."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("surface point sets must be non-empty")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return d_ab, d_ba


def _check(d_ab, d_ba):
    if len(d_ab) == 0 or len(d_ba) == 0:
        raise ValueError("distance lists must be non-empty")


def asd(d_ab, d_ba) -> float:
    _check(d_ab, d_ba)
    return float((np.sum(d_ab) + np.sum(d_ba)) / (len(d_ab) + len(d_ba)))


def rms_dist(d_ab, d_ba) -> float:
    _check(d_ab, d_ba)
    return float(math.sqrt((np.sum(np.square(d_ab)) + np.sum(np.square(d_ba))) / (len(d_ab) + len(d_ba))))


def hausdorff(d_ab, d_ba) -> float:
    _check(d_ab, d_ba)
    return float(max(np.max(d_ab), np.max(d_ba)))


def evaluate(seg, gt, spacing=None, mode: str = "surface") -> MetricReport:
    """All six metrics for one prediction/ground-truth pair.

    If exactly one mask is empty the distance metrics are ``inf``; if both are
    empty they are 0.
    """
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, BinaryMask3D) else (1.0, 1.0, 1.0)
    tp, fp, fn = confusion_counts(seg, gt)
    flags = []
    if tp + fp == 0:
        flags.append("ppv")
    if tp + fn == 0:
        flags.append("sen")
    s_any, g_any = tp + fp > 0, tp + fn > 0
    if s_any and g_any:
        d_ab, d_ba = surface_distances(extract_surface(seg, spacing, mode), extract_surface(gt, spacing, mode))
        dist = asd(d_ab, d_ba), rms_dist(d_ab, d_ba), hausdorff(d_ab, d_ba)
    else:
        flags.append("distance")
        dist = (0.0, 0.0, 0.0) if not (s_any or g_any) else (math.inf,) * 3
    return MetricReport(dsc(tp, fp, fn), ppv(tp, fp), sen(tp, fn), *dist, tp, fp, fn, tuple(flags))


# --- agreement and grouping -----------------------------------------------------------


def pairwise_dsc_matrix(cases: Sequence[Mapping[str, object]], names: Sequence[str] | None = None):
    """Mean pairwise DSC over nodules.

    ``cases`` holds one ``{name: mask}`` mapping per nodule. Returns
    ``(names, matrix, row_mean, row_std)``; the diagonal is NaN and
    row statistics are taken over every off-diagonal comparison of that row.
    """
    if not cases:
        raise ValueError("need at least one case")
    names = list(names or cases[0].keys())
    k = len(names)
    per_case = np.full((len(cases), k, k), np.nan)
    for c, case in enumerate(cases):
        masks = [_bool(case[n]) for n in names]
        for i in range(k):
            for j in range(i + 1, k):
                if masks[i].shape != masks[j].shape:
                    raise ValueError(f"case {c}: masks {names[i]} and {names[j]} are misaligned")
                v = dsc(*confusion_counts(masks[i], masks[j]))
                per_case[c, i, j] = per_case[c, j, i] = v
    matrix = per_case.mean(axis=0)
    for i in range(k):
        matrix[i, i] = np.nan
    row_vals = [per_case[:, i, [j for j in range(k) if j != i]].ravel() for i in range(k)]
    row_mean = np.array([v.mean() if v.size else np.nan for v in row_vals])
    row_std = np.array([v.std() if v.size else np.nan for v in row_vals])
    return names, matrix, row_mean, row_std


def group_report(dscs: Mapping[str, float], records: Mapping[str, NoduleRecord], characteristic: str) -> dict:
    """Mean DSC and count per score level of one characteristic."""
    if characteristic not in CHARACTERISTICS:
        raise ValueError(f"unknown characteristic {characteristic!r}")
    groups: dict[int, list[float]] = {}
    for nid, value in dscs.items():
        level = int(records[nid].scores[characteristic])
        groups.setdefault(level, []).append(float(value))
    return {lvl: (float(np.mean(v)), len(v)) for lvl, v in sorted(groups.items())}


def format_group_table(
    dscs: Mapping[str, float],
    records: Mapping[str, NoduleRecord],
    characteristics: Iterable[str] = CHARACTERISTICS,
    levels: Sequence[int] = (1, 2, 3, 4, 5, 6),
) -> str:
    """Aligned text table: a mean row and a ``[count]`` row per characteristic."""
    width = 20
    head = "Characteristics".ljust(width) + "".join(f"{lvl:>9}" for lvl in levels)
    lines = [head, "-" * len(head)]
    for ch in characteristics:
        rep = group_report(dscs, records, ch)
        means = "".join(f"{rep[l][0]:>9.2f}" if l in rep else f"{'-':>9}" for l in levels)
        counts = "".join(f"{'[' + str(rep[l][1]) + ']':>9}" if l in rep else f"{'-':>9}" for l in levels)
        lines.append(ch.ljust(width) + means)
        lines.append("".ljust(width) + counts)
    return "\n".join(lines) + "\n"


def dsc_histogram(dscs: Iterable[float], bins: int = 10) -> list[tuple[float, float, int]]:
    """(lower, upper, count) over [0, 100]; the last bin includes 100."""
    counts, edges = np.histogram(np.asarray(list(dscs), dtype=float), bins=bins, range=(0.0, 100.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


REPORT_FIELDS = ["id", "dsc", "ppv", "sen", "asd", "rms", "hfd", "diameter_mm"] + list(CHARACTERISTICS)


def write_report_csv(path, reports: Mapping[str, MetricReport], records: Mapping[str, NoduleRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for nid, rep in reports.items():
            rec = records.get(nid)
            scores = [rec.scores.get(c, "") for c in CHARACTERISTICS] if rec else [""] * len(CHARACTERISTICS)
            diam = f"{rec.diameter_mm:.4f}" if rec else ""
            w.writerow(
                [nid]
                + [f"{getattr(rep, k):.6f}" for k in ("dsc", "ppv", "sen", "asd", "rms", "hfd")]
                + [diam]
                + scores
            )
