import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mesaha.preprocess import (
    PATCH,
    PatchFrame,
    RoiBox,
    bbox,
    build_bundle,
    crop_patch,
    enlarged_box,
    ideal_adjacent_roi,
    make_mip,
    mask_to_roi_box,
    normalize_hu,
    patch_frame,
    roi_box_to_mask,
    slab_slices_for,
    training_input_roi,
)
from mesaha.volume_store import CtVolume


def _volume(rng, shape=(8, 120, 130), lo=-1000, hi=400):
    return CtVolume(rng.integers(lo, hi, shape).astype(np.int16))


def test_crop_is_centered_on_roi_centroid(rng):
    vol = _volume(rng, (3, 200, 200))
    patch, frame = crop_patch(vol, RoiBox(1, 90, 80, 110, 100))
    assert (frame.x0, frame.y0) == (100 - 48, 90 - 48)
    assert np.array_equal(patch, vol.voxels[1, 42:138, 52:148])


def test_crop_clamps_at_the_border(rng):
    vol = _volume(rng, (1, 200, 200))
    _, frame = crop_patch(vol, RoiBox(0, 5, 5, 15, 15))
    assert (frame.x0, frame.y0) == (0, 0)
    _, frame = crop_patch(vol, RoiBox(0, 190, 185, 199, 199))
    assert (frame.x0, frame.y0) == (104, 104)


def test_small_slices_are_edge_padded(rng):
    vol = _volume(rng, (2, 50, 60))
    patch, frame = crop_patch(vol, RoiBox(0, 10, 10, 20, 20))
    assert patch.shape == (PATCH, PATCH)
    assert np.array_equal(patch[:50, :60], vol.voxels[0])
    assert np.all(patch[60:, :60] == vol.voxels[0, -1])


def test_roi_outside_volume_raises(rng):
    with pytest.raises(IndexError):
        patch_frame(_volume(rng), RoiBox(8, 0, 0, 4, 4))


def test_normalize_hu_window():
    assert np.allclose(normalize_hu([-2000, -1000, -300, 400, 900]), [0, 0, 0.5, 1, 1])


@pytest.mark.parametrize("spacing, expected", [(1.0, 3), (2.5, 1), (1.25, 2), (0.5, 6), (2.0, 2), (6.0, 1)])
def test_slab_slice_count(spacing, expected):
    assert slab_slices_for(spacing) == expected


# --- MIP algebra ------------------------------------------------------------------


def _brute_mip(vox, n, direction, s, frame):
    z = vox.shape[0]
    idx = range(n, n + s) if direction == "forward" else range(n - s + 1, n + 1)
    stack = [vox[min(max(k, 0), z - 1), frame.y0 : frame.y0 + 96, frame.x0 : frame.x0 + 96] for k in idx]
    return normalize_hu(np.max(stack, axis=0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 7), st.sampled_from(["forward", "backward"]), st.integers(1, 5))
def test_mip_matches_brute_force(seed, n, direction, slab):
    vol = _volume(np.random.default_rng(seed))
    frame = patch_frame(vol, RoiBox(n, 40, 40, 60, 60))
    assert np.array_equal(make_mip(vol, frame, n, direction, slab), _brute_mip(vol.voxels, n, direction, slab, frame))


def test_mip_of_constant_slab_is_the_slice(rng):
    base = rng.integers(-1000, 400, (100, 100))
    vol = CtVolume(np.broadcast_to(base, (6, 100, 100)).astype(np.int16))
    frame = PatchFrame(0, 0, 2)
    for d in ("forward", "backward"):
        assert np.array_equal(make_mip(vol, frame, 2, d, 3), normalize_hu(base[:96, :96]))


def test_mip_at_last_slice_equals_that_slice(rng):
    vol = _volume(rng)
    frame = PatchFrame(0, 0, 7)
    last = normalize_hu(vol.voxels[7, :96, :96])
    assert np.array_equal(make_mip(vol, frame, 7, "forward", 3), last)


def test_mip_dominates_its_slices(rng):
    vol = _volume(rng)
    frame = PatchFrame(5, 5, 3)
    mip = make_mip(vol, frame, 3, "backward", 3)
    for k in (1, 2, 3):
        assert np.all(mip >= normalize_hu(vol.voxels[k, 5:101, 5:101]))


def test_mip_rejects_bad_direction(rng):
    with pytest.raises(ValueError):
        make_mip(_volume(rng), PatchFrame(0, 0, 0), 0, "sideways")


# --- ROI geometry -----------------------------------------------------------------


def test_roi_box_mask_is_filled_rectangle():
    m = roi_box_to_mask(RoiBox(0, 12, 10, 14, 11), PatchFrame(10, 10, 0))
    assert m.sum() == 3 * 2
    assert np.array_equal(np.argwhere(m)[0], [0, 2])


def test_roi_box_missing_the_patch_gives_zero_mask():
    assert roi_box_to_mask(RoiBox(0, 200, 200, 210, 210), PatchFrame(0, 0, 0)).sum() == 0


def test_mask_to_roi_box_round_trip():
    frame = PatchFrame(30, 40, 5)
    box = RoiBox(6, 50, 60, 70, 75)
    prob = roi_box_to_mask(box, frame).astype(float) * 0.9
    assert mask_to_roi_box(prob, frame, 6) == box


def test_mask_to_roi_box_min_area():
    prob = np.zeros((96, 96))
    prob[10, 10:13] = 1.0
    assert mask_to_roi_box(prob, PatchFrame(0, 0, 0), 1, min_area=4) is None
    assert mask_to_roi_box(prob, PatchFrame(0, 0, 0), 1, min_area=3) == RoiBox(1, 10, 10, 12, 10)


def test_ideal_adjacent_roi_margin():
    g = np.zeros((96, 96), np.uint8)
    g[40:50, 30:35] = 1  # 5 wide, 10 tall
    box = bbox(ideal_adjacent_roi(g, 0.2))
    assert box == (29, 38, 35, 51)


def test_ideal_adjacent_roi_of_empty_slice_is_empty():
    assert ideal_adjacent_roi(np.zeros((8, 8))).sum() == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.floats(0.0, 2.0))
def test_enlarged_box_scales_area(w, h, e):
    x0, y0, x1, y1 = enlarged_box((10, 20, 10 + w - 1, 20 + h - 1), e)
    nw, nh = x1 - x0 + 1, y1 - y0 + 1
    assert nw >= w and nh >= h
    # each side is rounded independently, so the area is within one step of the target
    assert abs(nw - w * np.sqrt(1 + e)) <= 0.5 + 1e-9
    assert abs(nh - h * np.sqrt(1 + e)) <= 0.5 + 1e-9
    # concentric up to the one-pixel split
    assert abs((x0 + x1) - (20 + w - 1)) <= 1


def test_training_roi_contains_the_nodule():
    g = np.zeros((96, 96), np.uint8)
    g[40:52, 30:41] = 1
    roi = training_input_roi(g, 0.3)
    assert np.all(roi[g == 1] == 1)
    assert abs(roi.sum() / g.sum() - 1.3) < 0.15


def test_training_roi_needs_a_nodule():
    with pytest.raises(ValueError):
        training_input_roi(np.zeros((96, 96)))


def test_bundle_channels(rng):
    vol = _volume(rng)
    b = build_bundle(vol, RoiBox(3, 40, 40, 60, 60))
    x = b.stacked()
    assert x.shape == (4, 96, 96) and x.dtype == np.float32
    assert np.array_equal(x[3], roi_box_to_mask(RoiBox(3, 40, 40, 60, 60), b.frame))
    assert x[:3].min() >= 0 and x[:3].max() <= 1


def test_parse_seed_string():
    assert RoiBox.parse("4,1,2,3,5") == RoiBox(4, 1, 2, 3, 5)
    for bad in ("4,1,2,3", "a,1,2,3,4", "4,5,2,3,5"):
        with pytest.raises(ValueError):
            RoiBox.parse(bad)
