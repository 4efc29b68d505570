"""Synthetic chest-CT phantoms with nodules, vessels and simulated raters."""

from __future__ import annotations

import csv
import math
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.special import erfc

from .preprocess import MIN_ROI_AREA, bbox, enlarged_box, ideal_adjacent_roi
from .volume_store import (
    CHARACTERISTICS,
    BinaryMask3D,
    CtVolume,
    NoduleRecord,
    RaterAnnotationSet,
    consensus_ground_truth,
    write_annotation_set,
    write_mask,
    write_volume,
)

# diameter statistics of the reference training set (mm)
DIAMETER_MEAN, DIAMETER_STD = 9.54, 4.92
DIAMETER_RANGE = (3.0, 30.0)

MANIFEST_FIELDS = (
    ["id", "split", "phantom", "nodule", "seed", "diameter_mm"]
    + list(CHARACTERISTICS)
    + ["seed_roi"]
)


@dataclass(frozen=True)
class NoduleSpec:
    center_mm: tuple[float, float, float]  # (x, y, z)
    semi_axes_mm: tuple[float, float, float]
    hu: float = 20.0
    edge_sigma_mm: float = 0.7
    lobulation: float = 0.0
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.semi_axes_mm) <= 0:
            raise ValueError("nodule semi-axes must be > 0")
        if not 0 <= self.lobulation < 1:
            raise ValueError("lobulation amplitude must be in [0, 1)")

    @property
    def bounding_radius(self) -> float:
        return max(self.semi_axes_mm) * (1 + self.lobulation)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 40)  # (X, Y, Z)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    nodules: tuple[NoduleSpec, ...] = ()
    lung_hu: float = -850.0
    lung_noise_hu: float = 25.0
    wall_hu: float = 40.0
    lung_field_fraction: float = 0.46  # lung ellipse semi-axis / slice extent
    vessel_count: int = 3
    vessel_radius_mm: float = 1.2
    vessel_hu: float = 40.0
    vessel_clearance_mm: float = 2.0  # min gap between a vessel axis and a nodule surface
    rater_jitter_mm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")

    @property
    def lung_semi_axes_mm(self) -> tuple[float, float]:
        x, y, _ = self.dims
        sx, sy, _ = self.spacing
        return self.lung_field_fraction * x * sx, self.lung_field_fraction * y * sy

    @property
    def lung_center_mm(self) -> tuple[float, float]:
        x, y, _ = self.dims
        sx, sy, _ = self.spacing
        return (x - 1) * sx / 2, (y - 1) * sy / 2

    def inside_lung(self, nod: NoduleSpec, z_margin_slices: int = 2) -> bool:
        r = nod.bounding_radius
        (ax, ay), (cx, cy) = self.lung_semi_axes_mm, self.lung_center_mm
        if ax <= r or ay <= r:
            return False
        x, y, z = nod.center_mm
        if ((x - cx) / (ax - r)) ** 2 + ((y - cy) / (ay - r)) ** 2 > 1:
            return False
        sz = self.spacing[2]
        lo, hi = z_margin_slices * sz, (self.dims[2] - 1 - z_margin_slices) * sz
        return lo <= z - r and z + r <= hi


def _grid_mm(spec: PhantomSpec):
    x, y, z = spec.dims
    sx, sy, sz = spec.spacing
    return (
        (np.arange(z) * sz)[:, None, None],
        (np.arange(y) * sy)[None, :, None],
        (np.arange(x) * sx)[None, None, :],
    )


def _ramp(signed_dist, sigma):
    """Blurred step: 1 deep inside, 0.5 on the surface, 0 far outside."""
    if sigma <= 0:
        return (signed_dist <= 0).astype(np.float64)
    return 0.5 * erfc(signed_dist / (sigma * math.sqrt(2)))


def nodule_level(nod: NoduleSpec, gz, gy, gx):
    """Signed surface distance estimate in mm (<= 0 inside the nodule)."""
    cx, cy, cz = nod.center_mm
    a, b, c = nod.semi_axes_mm
    dx, dy, dz = gx - cx, gy - cy, gz - cz
    rho = np.sqrt((dx / a) ** 2 + (dy / b) ** 2 + (dz / c) ** 2)
    if nod.lobulation:
        r = np.sqrt(dx**2 + dy**2 + dz**2) + 1e-12
        azimuth = np.arctan2(dy, dx)
        polar = np.arccos(np.clip(dz / r, -1, 1))
        bound = 1 + nod.lobulation * np.sin(3 * azimuth) * np.sin(polar) ** 2
    else:
        bound = 1.0
    r_eff = (a * b * c) ** (1 / 3)
    return (rho / bound - 1) * r_eff


def _random_vessels(spec: PhantomSpec, rng):
    (ax, ay), (cx, cy) = spec.lung_semi_axes_mm, spec.lung_center_mm
    zmax = (spec.dims[2] - 1) * spec.spacing[2]
    vessels, attempts = [], 0
    while len(vessels) < spec.vessel_count and attempts < 200 * max(spec.vessel_count, 1):
        attempts += 1
        t, u = rng.uniform(0, 2 * np.pi), math.sqrt(rng.uniform(0, 1))
        p = np.array([cx + 0.8 * ax * u * np.cos(t), cy + 0.8 * ay * u * np.sin(t), rng.uniform(0, zmax)])
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ok = True
        for nod in spec.nodules:
            q = np.asarray(nod.center_mm) - p
            dist = np.linalg.norm(q - q.dot(d) * d)
            if dist < nod.bounding_radius + spec.vessel_radius_mm + spec.vessel_clearance_mm:
                ok = False
                break
        if ok:
            vessels.append((p, d))
    return vessels


def generate_phantom(spec: PhantomSpec) -> tuple[CtVolume, list[BinaryMask3D], list[NoduleRecord]]:
    """Render the HU volume, one truth mask per nodule and the nodule records."""
    for i, nod in enumerate(spec.nodules):
        if not spec.inside_lung(nod):
            raise ValueError(f"nodule {i} at {nod.center_mm} does not fit inside the lung field")
    rng = np.random.default_rng(spec.seed)
    gz, gy, gx = _grid_mm(spec)
    shape = (spec.dims[2], spec.dims[1], spec.dims[0])

    (ax, ay), (cx, cy) = spec.lung_semi_axes_mm, spec.lung_center_mm
    lung = (((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 <= 1) & np.ones(shape, bool)
    hu = np.where(lung, spec.lung_hu, spec.wall_hu).astype(np.float64)
    if spec.lung_noise_hu > 0:
        noise = ndimage.gaussian_filter(rng.standard_normal(shape), 0.6)
        noise *= spec.lung_noise_hu / (noise.std() + 1e-12)
        hu = hu + noise * lung

    # structures are composited by max contrast over the lung baseline, then added
    contrast = np.zeros(shape)
    for p, d in _random_vessels(spec, rng):
        rel = np.stack(np.broadcast_arrays(gx - p[0], gy - p[1], gz - p[2]))
        along = np.tensordot(d, rel, axes=1)
        radial = np.sqrt(np.maximum((rel**2).sum(axis=0) - along**2, 0))
        w = _ramp(radial - spec.vessel_radius_mm, 0.5) * lung
        contrast = np.maximum(contrast, w * (spec.vessel_hu - spec.lung_hu))

    masks, records = [], []
    for i, nod in enumerate(spec.nodules):
        level = nodule_level(nod, gz, gy, gx)
        w = _ramp(level, nod.edge_sigma_mm)
        contrast = np.maximum(contrast, w * (nod.hu - spec.lung_hu))
        masks.append(BinaryMask3D((level <= 0).astype(np.uint8), spec.spacing))
        records.append(NoduleRecord(f"n{i}", 2 * max(nod.semi_axes_mm), dict(nod.scores)))
    hu = hu + contrast

    vox = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)
    return CtVolume(vox, spec.spacing), masks, records


def simulate_raters(gt: BinaryMask3D, jitter_mm: float, count: int = 4, seed: int = 0) -> RaterAnnotationSet:
    """Perturb ``gt``'s boundary by a smooth random offset field bounded by ``jitter_mm``.

    A rater marks voxel q iff sdf(q) < offset(q), where sdf is the half-voxel
    signed distance to the gt surface in mm, so jitter 0 returns gt exactly.
    """
    if not gt.voxels.any():
        raise ValueError("simulate_raters needs a non-empty mask")
    rng = np.random.default_rng(seed)
    g = gt.as_bool()
    if jitter_mm <= 0:
        return RaterAnnotationSet(tuple(BinaryMask3D(gt.voxels, gt.spacing) for _ in range(count)))

    sampling = gt.spacing[::-1]
    pad = [int(math.ceil(jitter_mm / s)) + 2 for s in sampling]
    zz, yy, xx = np.nonzero(g)
    lo = [max(0, int(a.min()) - p) for a, p in zip((zz, yy, xx), pad)]
    hi = [min(n, int(a.max()) + p + 1) for a, p, n in zip((zz, yy, xx), pad, g.shape)]
    region = tuple(slice(a, b) for a, b in zip(lo, hi))
    sub = np.pad(g[region], 1, constant_values=False)
    half = 0.5 * min(sampling)
    sdf = np.where(
        sub,
        -(ndimage.distance_transform_edt(sub, sampling=sampling) - half),
        ndimage.distance_transform_edt(~sub, sampling=sampling) - half,
    )[1:-1, 1:-1, 1:-1]

    masks = []
    for _ in range(count):
        field_ = ndimage.gaussian_filter(rng.standard_normal(sdf.shape), 1.5)
        field_ = np.clip(field_ * (0.5 * jitter_mm / (field_.std() + 1e-12)), -jitter_mm, jitter_mm)
        out = np.zeros(g.shape, np.uint8)
        out[region] = sdf < field_
        if not out.any():
            out = gt.voxels.copy()
        masks.append(BinaryMask3D(out, gt.spacing))
    return RaterAnnotationSet(tuple(masks))


# --- corpus ---------------------------------------------------------------------------


def sample_diameter(rng, mean=DIAMETER_MEAN, std=DIAMETER_STD, bounds=DIAMETER_RANGE) -> float:
    """Normal diameter, redrawn until it falls inside ``bounds``."""
    while True:
        d = rng.normal(mean, std)
        if bounds[0] <= d <= bounds[1]:
            return float(d)


def _random_scores(rng, semi_axes, lobulation) -> dict:
    ratio = min(semi_axes) / max(semi_axes)
    scores = {
        "subtlety": int(rng.integers(1, 6)),
        "internal_structure": int(rng.choice([1, 1, 1, 1, 2, 4])),
        "calcification": int(rng.choice([3, 6, 6, 6, 6, 6])),
        "sphericity": int(np.clip(1 + round(4 * ratio), 1, 5)),
        "margin": int(rng.integers(1, 6)),
        "lobulation": int(np.clip(1 + round(lobulation / 0.25 * 4), 1, 5)),
        "spiculation": int(rng.choice([1, 1, 1, 2, 3, 4, 5])),
        "texture": int(rng.choice([3, 4, 5, 5, 5])),
        "malignancy": int(rng.integers(1, 6)),
    }
    return scores


def slices_reachable(nod: NoduleSpec, spec: PhantomSpec, margin: float = 0.2, min_area: int = MIN_ROI_AREA) -> bool:
    """True if every nodule slice's ideal ROI box covers at least ``min_area`` pixels.

    A thinner tip would fall below the ROI speckle floor, so slice-to-slice
    propagation could never reach it even with perfect predictions.
    """
    sx, sy, sz = spec.spacing
    r = nod.bounding_radius + 1
    cx, cy, cz = nod.center_mm
    lo = [max(0, int(math.floor((c - r) / s))) for c, s in zip((cz, cy, cx), (sz, sy, sx))]
    hi = [min(n, int(math.ceil((c + r) / s)) + 1) for c, s, n in zip((cz, cy, cx), (sz, sy, sx), spec.dims[::-1])]
    gz = (np.arange(lo[0], hi[0]) * sz)[:, None, None]
    gy = (np.arange(lo[1], hi[1]) * sy)[None, :, None]
    gx = (np.arange(lo[2], hi[2]) * sx)[None, None, :]
    mask = nodule_level(nod, gz, gy, gx) <= 0
    for sl in mask:
        if sl.any() and ideal_adjacent_roi(sl, margin).sum() < min_area:
            return False
    return True


def random_nodule_spec(base: PhantomSpec, rng, diameter_mm: Optional[float] = None) -> NoduleSpec:
    """Draw one nodule that fits inside ``base``'s lung field.

    Placements whose end slices are too small to propagate into (see
    :func:`slices_reachable`) are redrawn.
    """
    d = sample_diameter(rng) if diameter_mm is None else diameter_mm
    r = d / 2
    axes = [r, r * rng.uniform(0.75, 1.0), r * rng.uniform(0.75, 1.0)]
    rng.shuffle(axes)
    lob = float(rng.choice([0.0, 0.0, rng.uniform(0.05, 0.2)]))
    (ax, ay), (cx, cy) = base.lung_semi_axes_mm, base.lung_center_mm
    for _ in range(1000):
        t, u = rng.uniform(0, 2 * np.pi), math.sqrt(rng.uniform(0, 1))
        rb = max(axes) * (1 + lob)
        x = cx + max(ax - rb - 1, 0) * u * np.cos(t)
        y = cy + max(ay - rb - 1, 0) * u * np.sin(t)
        sz = base.spacing[2]
        zlo, zhi = rb + 2 * sz, (base.dims[2] - 1 - 2) * sz - rb
        if zhi < zlo:
            break
        z = rng.uniform(zlo, zhi)
        nod = NoduleSpec(
            center_mm=(float(x), float(y), float(z)),
            semi_axes_mm=tuple(float(a) for a in axes),
            hu=float(rng.uniform(-100, 60)),
            edge_sigma_mm=0.7,
            lobulation=lob,
            scores=_random_scores(rng, axes, lob),
        )
        if base.inside_lung(nod) and slices_reachable(nod, base):
            return nod
    raise ValueError(f"cannot place a {d:.1f} mm nodule inside dims {base.dims}")


def seed_roi_for(mask: BinaryMask3D, enlargement: float = 0.3):
    """Seed ROI on the slice with the largest nodule cross-section."""
    from .preprocess import RoiBox

    areas = mask.voxels.sum(axis=(1, 2))
    n = int(np.argmax(areas))
    x0, y0, x1, y1 = enlarged_box(bbox(mask.voxels[n]), enlargement)
    x, y, _ = mask.dims
    return RoiBox(n, max(x0, 0), max(y0, 0), min(x1, x - 1), min(y1, y - 1))


def generate_corpus(
    out_dir,
    n_train: int = 60,
    n_val: int = 20,
    n_test: int = 20,
    seed: int = 0,
    base: PhantomSpec = PhantomSpec(),
    nodules_per_phantom: int = 1,
    force: bool = False,
) -> Path:
    """Write seeded train/val/test phantoms plus ``manifest.tsv``.

    Per phantom directory: ``volume.nvol`` and, for nodule k,
    ``nodule{k}_truth.nvol``, ``nodule{k}_consensus.nvol`` (50% of 4 raters)
    and ``nodule{k}_raters/``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out}: output directory is not empty (use force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    splits = [("train", n_train), ("val", n_val), ("test", n_test)]
    children = np.random.SeedSequence(seed).spawn(sum(n for _, n in splits))
    rows, k = [], 0
    for split, count in splits:
        for i in range(count):
            child = children[k]
            k += 1
            phantom_seed = int(child.generate_state(1)[0])
            rng = np.random.default_rng(phantom_seed)
            nodules = []
            spec = replace(base, seed=phantom_seed, nodules=())
            for _ in range(nodules_per_phantom):
                nodules.append(random_nodule_spec(spec, rng))
            spec = replace(spec, nodules=tuple(nodules))
            volume, masks, records = generate_phantom(spec)
            pid = f"{split}_{i:03d}"
            pdir = out / split / pid
            pdir.mkdir(parents=True)
            write_volume(volume, pdir / "volume.nvol")
            for j, (mask, rec) in enumerate(zip(masks, records)):
                raters = simulate_raters(mask, spec.rater_jitter_mm, 4, phantom_seed + j)
                consensus = consensus_ground_truth(raters, 0.5)
                write_mask(mask, pdir / f"nodule{j}_truth.nvol")
                write_mask(consensus, pdir / f"nodule{j}_consensus.nvol")
                write_annotation_set(raters, pdir / f"nodule{j}_raters")
                roi = seed_roi_for(consensus)
                rows.append(
                    {
                        "id": f"{pid}_n{j}",
                        "split": split,
                        "phantom": pid,
                        "nodule": j,
                        "seed": phantom_seed,
                        "diameter_mm": f"{rec.diameter_mm:.4f}",
                        **{c: rec.scores[c] for c in CHARACTERISTICS},
                        "seed_roi": f"{roi.n},{roi.x_min},{roi.y_min},{roi.x_max},{roi.y_max}",
                    }
                )
    with open(out / "manifest.tsv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return out


def read_manifest(corpus_dir) -> list[dict]:
    with open(Path(corpus_dir) / "manifest.tsv", newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def load_cases(corpus_dir, split: str, mask_kind: str = "consensus") -> list[dict]:
    """Cases of one split: manifest row plus loaded volume, mask and seed ROI."""
    from .preprocess import RoiBox
    from .volume_store import read_mask, read_volume

    corpus_dir = Path(corpus_dir)
    cases, volumes = [], {}
    for row in read_manifest(corpus_dir):
        if row["split"] != split:
            continue
        pdir = corpus_dir / split / row["phantom"]
        if row["phantom"] not in volumes:
            volumes[row["phantom"]] = read_volume(pdir / "volume.nvol")
        mask = read_mask(pdir / f"nodule{row['nodule']}_{mask_kind}.nvol")
        record = NoduleRecord(
            row["id"], float(row["diameter_mm"]), {c: int(row[c]) for c in CHARACTERISTICS}
        )
        cases.append(
            {
                "id": row["id"],
                "phantom": row["phantom"],
                "volume": volumes[row["phantom"]],
                "mask": mask,
                "record": record,
                "seed": RoiBox.parse(row["seed_roi"]),
            }
        )
    return cases
