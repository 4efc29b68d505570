"""Volumes, masks, annotation sets and consensus ground truth.

Arrays are indexed ``[z, y, x]`` so that C order is x-fastest, z-slowest,
which is also the on-disk payload order. ``dims`` is reported as (X, Y, Z)
and ``spacing`` as (sx, sy, sz) in mm.

NVOL1 file layout::

    NVOL1
    dims
    X Y Z
    spacing
    sx sy sz
    dtype
    i16 | u8
    endian
    little
    <blank line>
    <raw little-endian payload>
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = "NVOL1"
HU_MIN, HU_MAX = -4096, 4095
_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}

CHARACTERISTICS = (
    "subtlety",
    "internal_structure",
    "calcification",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
    "malignancy",
)


class VolumeFormatError(ValueError):
    pass


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class CtVolume:
    voxels: np.ndarray  # int16, [z, y, x]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got shape {vox.shape}")
        if vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
            raise ValueError(f"HU values must lie in [{HU_MIN}, {HU_MAX}]")
        vox = np.ascontiguousarray(vox, dtype=np.int16)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.voxels.shape
        return x, y, z

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True, eq=False)
class BinaryMask3D:
    voxels: np.ndarray  # uint8 {0, 1}, [z, y, x]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {vox.shape}")
        if vox.dtype != bool and vox.size and not np.isin(vox, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        vox = np.ascontiguousarray(vox, dtype=np.uint8)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.voxels.shape
        return x, y, z

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def as_bool(self) -> np.ndarray:
        return self.voxels.astype(bool)


@dataclass(frozen=True)
class RaterAnnotationSet:
    masks: tuple[BinaryMask3D, ...]
    rater_ids: tuple[str, ...] = ()

    def __post_init__(self):
        masks = tuple(self.masks)
        if not masks:
            raise ValueError("an annotation set needs at least one rater mask")
        ids = tuple(self.rater_ids) or tuple(f"R{i + 1}" for i in range(len(masks)))
        if len(ids) != len(masks):
            raise ValueError("rater_ids and masks differ in length")
        ref = masks[0]
        for m in masks[1:]:
            if m.shape != ref.shape or m.spacing != ref.spacing:
                raise ValueError("rater masks must share dims and spacing")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "rater_ids", ids)


@dataclass(frozen=True)
class NoduleRecord:
    nodule_id: str
    diameter_mm: float
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise ValueError(f"diameter must be positive, got {self.diameter_mm}")
        for name, value in self.scores.items():
            if name not in CHARACTERISTICS:
                raise ValueError(f"unknown characteristic {name!r}")
            lo, hi = (2, 6) if name == "calcification" else (1, 5)
            if int(value) != value or not lo <= value <= hi:
                raise ValueError(f"{name} score {value} outside [{lo}, {hi}]")


# --- NVOL1 I/O ----------------------------------------------------------------


def _write_nvol(path, voxels: np.ndarray, spacing, tag: str) -> None:
    x, y, z = voxels.shape[2], voxels.shape[1], voxels.shape[0]
    header = "\n".join(
        [
            MAGIC,
            "dims",
            f"{x} {y} {z}",
            "spacing",
            " ".join(repr(float(s)) for s in spacing),
            "dtype",
            tag,
            "endian",
            "little",
            "",
        ]
    )
    payload = np.ascontiguousarray(voxels, dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        f.write(payload)


def _read_nvol(path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such volume file")
    data = path.read_bytes()
    lines, pos = [], 0
    for _ in range(10):
        end = data.find(b"\n", pos)
        if end < 0:
            raise VolumeFormatError(f"{path}: truncated header")
        lines.append(data[pos:end].decode("utf-8"))
        pos = end + 1
    if lines[0] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {lines[0]!r}")
    if lines[9] != "":
        raise VolumeFormatError(f"{path}: header must end with a blank line")
    try:
        x, y, z = (int(v) for v in lines[2].split())
        spacing = tuple(float(v) for v in lines[4].split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed header: {exc}") from None
    tag = lines[6]
    if tag not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag!r}")
    if lines[8] != "little":
        raise VolumeFormatError(f"{path}: unsupported byte order {lines[8]!r}")
    if min(x, y, z) < 1:
        raise VolumeFormatError(f"{path}: dims must be >= 1, got {(x, y, z)}")
    try:
        spacing = _check_spacing(spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None
    dtype = _DTYPES[tag]
    expected = x * y * z * dtype.itemsize
    if len(data) - pos != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(data) - pos} bytes, header implies {expected}"
        )
    vox = np.frombuffer(data, dtype=dtype, offset=pos).reshape(z, y, x)
    return vox, spacing, tag


def write_volume(volume: CtVolume, path) -> None:
    _write_nvol(path, volume.voxels, volume.spacing, "i16")


def read_volume(path) -> CtVolume:
    vox, spacing, tag = _read_nvol(path)
    if tag != "i16":
        raise VolumeFormatError(f"{path}: expected i16 volume, found {tag}")
    return CtVolume(vox.astype(np.int16), spacing)


def write_mask(mask: BinaryMask3D, path) -> None:
    _write_nvol(path, mask.voxels, mask.spacing, "u8")


def read_mask(path) -> BinaryMask3D:
    vox, spacing, tag = _read_nvol(path)
    if tag != "u8":
        raise VolumeFormatError(f"{path}: expected u8 mask, found {tag}")
    if vox.size and vox.max() > 1:
        raise VolumeFormatError(f"{path}: mask payload holds values other than 0/1")
    return BinaryMask3D(vox.copy(), spacing)


def write_annotation_set(annotations: RaterAnnotationSet, directory, stem: str = "rater") -> Path:
    """Write one mask per rater plus ``manifest.txt`` (``rater_id<TAB>file`` lines)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for rid, mask in zip(annotations.rater_ids, annotations.masks):
        name = f"{stem}_{rid}.nvol"
        write_mask(mask, directory / name)
        lines.append(f"{rid}\t{name}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_annotation_set(manifest) -> RaterAnnotationSet:
    manifest = Path(manifest)
    ids, masks = [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rid, name = line.split("\t")
        ids.append(rid)
        masks.append(read_mask(manifest.parent / name))
    return RaterAnnotationSet(tuple(masks), tuple(ids))


# --- consensus -------------------------------------------------------------------


def consensus_threshold(fraction: float, raters: int) -> int:
    """Minimum number of raters that must mark a voxel, ``ceil(fraction * raters)``."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    # guard against 0.3 * 10 = 3.0000000000000004 style round-up
    return max(1, math.ceil(round(fraction * raters, 9)))


def consensus_ground_truth(annotations: RaterAnnotationSet, fraction: float = 0.5) -> BinaryMask3D:
    """Per-voxel consensus: 1 where at least ``ceil(fraction * n)`` raters agree."""
    threshold = consensus_threshold(fraction, len(annotations.masks))
    votes = np.zeros(annotations.masks[0].shape, dtype=np.int32)
    for m in annotations.masks:
        votes += m.voxels
    return BinaryMask3D((votes >= threshold).astype(np.uint8), annotations.masks[0].spacing)


# --- slice-stack import ------------------------------------------------------------

_RASTER_SUFFIXES = {".png", ".tif", ".tiff", ".pgm"}


def import_slice_stack(
    directory, spacing: Sequence[float] = (1.0, 1.0, 1.0), intercept: int = 0
) -> CtVolume:
    """Stack 16-bit grayscale rasters (lexicographic order = z) into a volume.

    ``HU = pixel + intercept``.
    """
    from PIL import Image

    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _RASTER_SUFFIXES)
    if not files:
        raise ValueError(f"{directory}: no slice rasters found")
    slices = []
    for f in files:
        with Image.open(f) as im:
            arr = np.array(im).astype(np.int32)
        if arr.ndim != 2:
            raise ValueError(f"{f}: expected single-channel raster, got shape {arr.shape}")
        if slices and arr.shape != slices[0].shape:
            raise ValueError(f"{f}: slice dims {arr.shape} differ from {slices[0].shape}")
        slices.append(arr)
    vox = np.stack(slices) + intercept
    return CtVolume(vox, spacing)
