"""Patch cropping, MIP images and ROI geometry for the network inputs.

Patch arrays are indexed ``[row, col] = [y, x]``. A :class:`PatchFrame`
records where a patch sits in the volume, so boxes and masks can move between
patch and global coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .volume_store import CtVolume

PATCH = 96
HU_WINDOW = (-1000.0, 400.0)
ROI_THRESHOLD = 0.5
MIN_ROI_AREA = 4


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class RoiBox:
    """Inclusive global pixel box on slice ``n``."""

    n: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    def validate(self, dims: tuple[int, int, int]) -> "RoiBox":
        x, y, z = dims
        if not 0 <= self.n < z:
            raise IndexError(f"ROI slice {self.n} outside volume with {z} slices")
        if not (0 <= self.x_min and self.x_max < x and 0 <= self.y_min and self.y_max < y):
            raise IndexError(f"ROI {self} outside slice bounds {x}x{y}")
        return self

    @property
    def centroid(self) -> tuple[int, int]:
        return (self.x_min + self.x_max) // 2, (self.y_min + self.y_max) // 2

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def with_slice(self, n: int) -> "RoiBox":
        return RoiBox(n, self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def parse(cls, text: str) -> "RoiBox":
        """Parse ``"slice,x_min,y_min,x_max,y_max"``."""
        parts = text.split(",")
        if len(parts) != 5:
            raise ValueError(f"seed ROI must be 'slice,x_min,y_min,x_max,y_max', got {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise ValueError(f"seed ROI must be five integers, got {text!r}") from None


@dataclass(frozen=True)
class PatchFrame:
    """Global position of a patch: top-left (x0, y0), slice index and side."""

    x0: int
    y0: int
    n: int
    size: int = PATCH

    def to_patch(self, box: RoiBox) -> tuple[int, int, int, int]:
        return box.x_min - self.x0, box.y_min - self.y0, box.x_max - self.x0, box.y_max - self.y0

    def to_global(self, x_min, y_min, x_max, y_max, n: int) -> RoiBox:
        return RoiBox(n, x_min + self.x0, y_min + self.y0, x_max + self.x0, y_max + self.y0)


@dataclass(frozen=True, eq=False)
class PatchBundle:
    slice_patch: np.ndarray  # normalized [0, 1]
    mip_backward: np.ndarray
    mip_forward: np.ndarray
    roi_mask: np.ndarray  # uint8 {0, 1}
    frame: PatchFrame

    def stacked(self) -> np.ndarray:
        """(4, P, P) float32 in network channel order."""
        return np.stack(
            [self.slice_patch, self.mip_backward, self.mip_forward, self.roi_mask]
        ).astype(np.float32)


# --- cropping and intensities --------------------------------------------------


def _window_origin(center: int, extent: int, size: int) -> int:
    if extent <= size:
        return 0
    return min(max(center - size // 2, 0), extent - size)


def patch_frame(volume: CtVolume, roi: RoiBox, size: int = PATCH) -> PatchFrame:
    x, y, z = volume.dims
    if not 0 <= roi.n < z:
        raise IndexError(f"ROI slice {roi.n} outside volume with {z} slices")
    cx, cy = roi.centroid
    return PatchFrame(_window_origin(cx, x, size), _window_origin(cy, y, size), roi.n, size)


def crop_slice(volume: CtVolume, frame: PatchFrame, n: int) -> np.ndarray:
    """HU patch of slice ``n`` (clamped to the volume) in ``frame``, edge-replicated if the slice is small."""
    z = volume.shape[0]
    sl = volume.voxels[min(max(n, 0), z - 1)]
    s = frame.size
    patch = sl[frame.y0 : frame.y0 + s, frame.x0 : frame.x0 + s]
    if patch.shape != (s, s):
        patch = np.pad(patch, ((0, s - patch.shape[0]), (0, s - patch.shape[1])), mode="edge")
    return patch


def crop_patch(volume: CtVolume, roi: RoiBox, size: int = PATCH) -> tuple[np.ndarray, PatchFrame]:
    """Fixed-size crop centred on the ROI centroid, without any resampling."""
    frame = patch_frame(volume, roi, size)
    return crop_slice(volume, frame, roi.n), frame


def normalize_hu(patch, window: tuple[float, float] = HU_WINDOW) -> np.ndarray:
    lo, hi = window
    return (np.clip(np.asarray(patch, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def slab_slices_for(spacing_z: float, slab_mm: float = 3.0) -> int:
    """Number of slices covering ``slab_mm`` at the given slice spacing."""
    return max(1, round_half_up(slab_mm / spacing_z))


def make_mip(
    volume: CtVolume,
    frame: PatchFrame,
    n: int,
    direction: Literal["forward", "backward"],
    slab_slices: int = 3,
) -> np.ndarray:
    """Pixelwise max over ``slab_slices`` cropped slices that include ``n``.

    Forward covers n .. n+slab-1, backward n-slab+1 .. n; slices past either
    end of the volume repeat the terminal slice.
    """
    if slab_slices < 1:
        raise ValueError("slab_slices must be >= 1")
    if direction == "forward":
        idx = range(n, n + slab_slices)
    elif direction == "backward":
        idx = range(n - slab_slices + 1, n + 1)
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    mip = np.max([crop_slice(volume, frame, k) for k in idx], axis=0)
    return normalize_hu(mip)


# --- ROI masks and boxes ---------------------------------------------------------


def _box_mask(shape, x_min, y_min, x_max, y_max) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    h, w = shape
    x0, y0 = max(x_min, 0), max(y_min, 0)
    x1, y1 = min(x_max, w - 1), min(y_max, h - 1)
    if x0 <= x1 and y0 <= y1:
        mask[y0 : y1 + 1, x0 : x1 + 1] = 1
    return mask


def roi_box_to_mask(roi: RoiBox, frame: PatchFrame) -> np.ndarray:
    """Filled rectangle of the box intersected with the patch; all-zero if they miss."""
    return _box_mask((frame.size, frame.size), *frame.to_patch(roi))


def bbox(mask: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    """Tight (x_min, y_min, x_max, y_max) of the nonzero pixels, or None."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def mask_to_roi_box(
    prob_map: np.ndarray,
    frame: PatchFrame,
    n: int,
    threshold: float = ROI_THRESHOLD,
    min_area: int = MIN_ROI_AREA,
    dims: Optional[tuple[int, int, int]] = None,
) -> Optional[RoiBox]:
    """Bounding box of the supra-threshold pixels, in global coordinates on slice ``n``.

    Returns None when fewer than ``min_area`` pixels survive. With ``dims``
    the box is clipped to the slice (only matters for edge-replicated patches).
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    binary = np.asarray(prob_map) >= threshold
    if int(binary.sum()) < min_area:
        return None
    box = frame.to_global(*bbox(binary), n)
    if dims is not None:
        x, y, _ = dims
        x_min, y_min = min(box.x_min, x - 1), min(box.y_min, y - 1)
        box = RoiBox(n, x_min, y_min, min(box.x_max, x - 1), min(box.y_max, y - 1))
    return box


def ideal_adjacent_roi(gt_mask_slice: np.ndarray, margin_fraction: float = 0.2) -> np.ndarray:
    """Nodule bounding box grown by ``margin_fraction`` of each side on all four sides."""
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be >= 0")
    gt = np.asarray(gt_mask_slice)
    box = bbox(gt)
    if box is None:
        return np.zeros(gt.shape, dtype=np.uint8)
    x0, y0, x1, y1 = box
    dx = round_half_up(margin_fraction * (x1 - x0 + 1))
    dy = round_half_up(margin_fraction * (y1 - y0 + 1))
    return _box_mask(gt.shape, x0 - dx, y0 - dy, x1 + dx, y1 + dy)


def enlarged_box(box: tuple[int, int, int, int], enlargement: float) -> tuple[int, int, int, int]:
    """Concentric box with area scaled by ``1 + enlargement``, aspect ratio kept."""
    if enlargement < 0:
        raise ValueError("enlargement must be >= 0")
    x0, y0, x1, y1 = box
    scale = math.sqrt(1.0 + enlargement)
    w, h = x1 - x0 + 1, y1 - y0 + 1
    dw = max(round_half_up(w * scale), w) - w
    dh = max(round_half_up(h * scale), h) - h
    return x0 - dw // 2, y0 - dh // 2, x1 + dw - dw // 2, y1 + dh - dh // 2


def training_input_roi(gt_mask_slice: np.ndarray, enlargement: float = 0.3) -> np.ndarray:
    """Input ROI for a training sample: enlarged nodule box, clamped to the patch."""
    gt = np.asarray(gt_mask_slice)
    box = bbox(gt)
    if box is None:
        raise ValueError("training_input_roi needs a slice that contains the nodule")
    return _box_mask(gt.shape, *enlarged_box(box, enlargement))


def build_bundle(volume: CtVolume, roi: RoiBox, slab_slices: int = 3, size: int = PATCH) -> PatchBundle:
    """The four aligned network inputs for slice ``roi.n``."""
    hu, frame = crop_patch(volume, roi, size)
    return PatchBundle(
        slice_patch=normalize_hu(hu),
        mip_backward=make_mip(volume, frame, roi.n, "backward", slab_slices),
        mip_forward=make_mip(volume, frame, roi.n, "forward", slab_slices),
        roi_mask=roi_box_to_mask(roi, frame),
        frame=frame,
    )
