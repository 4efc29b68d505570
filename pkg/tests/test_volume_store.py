import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from mesaha.volume_store import (
    BinaryMask3D,
    CtVolume,
    NoduleRecord,
    RaterAnnotationSet,
    VolumeFormatError,
    consensus_ground_truth,
    consensus_threshold,
    import_slice_stack,
    read_annotation_set,
    read_mask,
    read_volume,
    write_annotation_set,
    write_mask,
    write_volume,
)


def test_header_layout_is_byte_exact(tmp_path):
    vol = CtVolume(np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 12, (0.7, 0.7, 1.25))
    write_volume(vol, tmp_path / "v.nvol")
    raw = (tmp_path / "v.nvol").read_bytes()
    header = b"NVOL1\ndims\n4 3 2\nspacing\n0.7 0.7 1.25\ndtype\ni16\nendian\nlittle\n\n"
    assert raw.startswith(header)
    assert raw[len(header):] == vol.voxels.astype("<i2").tobytes()


def test_dims_are_xyz_and_arrays_zyx():
    vol = CtVolume(np.zeros((5, 6, 7), np.int16))
    assert vol.dims == (7, 6, 5)
    assert vol.shape == (5, 6, 7)


@settings(max_examples=30, deadline=None)
@given(
    hnp.arrays(np.int16, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6), elements=st.integers(-4096, 4095)),
    st.tuples(*[st.floats(0.1, 5.0)] * 3),
)
def test_volume_round_trip(tmp_path_factory, voxels, spacing):
    path = tmp_path_factory.mktemp("rt") / "v.nvol"
    write_volume(CtVolume(voxels, spacing), path)
    back = read_volume(path)
    assert np.array_equal(back.voxels, voxels)
    assert back.spacing == tuple(float(s) for s in spacing)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6), elements=st.integers(0, 1)))
def test_mask_round_trip(tmp_path_factory, voxels):
    path = tmp_path_factory.mktemp("rt") / "m.nvol"
    write_mask(BinaryMask3D(voxels), path)
    assert np.array_equal(read_mask(path).voxels, voxels)


def test_one_voxel_volume(tmp_path):
    write_volume(CtVolume(np.full((1, 1, 1), -1000, np.int16)), tmp_path / "v.nvol")
    assert read_volume(tmp_path / "v.nvol").voxels.item() == -1000


def test_truncated_payload_is_rejected(tmp_path):
    path = tmp_path / "v.nvol"
    write_volume(CtVolume(np.zeros((2, 2, 2), np.int16)), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(VolumeFormatError, match="payload"):
        read_volume(path)


@pytest.mark.parametrize(
    "line, value",
    [(0, b"NVOL2"), (6, b"f32"), (8, b"big"), (2, b"4 x 2")],
)
def test_bad_header_fields(tmp_path, line, value):
    path = tmp_path / "v.nvol"
    write_volume(CtVolume(np.zeros((2, 3, 4), np.int16)), path)
    lines = path.read_bytes().split(b"\n")
    lines[line] = value
    path.write_bytes(b"\n".join(lines))
    with pytest.raises(VolumeFormatError):
        read_volume(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nope.nvol")


def test_mask_and_volume_tags_are_not_interchangeable(tmp_path):
    write_mask(BinaryMask3D(np.zeros((1, 2, 2), np.uint8)), tmp_path / "m.nvol")
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "m.nvol")


def test_hu_range_enforced():
    with pytest.raises(ValueError):
        CtVolume(np.full((1, 1, 1), 5000, np.int32))


def test_mask_values_enforced():
    with pytest.raises(ValueError):
        BinaryMask3D(np.full((1, 1, 2), 2, np.uint8))


def test_nodule_record_ranges():
    NoduleRecord("a", 5.0, {"calcification": 6, "subtlety": 1})
    with pytest.raises(ValueError):
        NoduleRecord("a", 5.0, {"calcification": 1})
    with pytest.raises(ValueError):
        NoduleRecord("a", 5.0, {"spiculation": 6})
    with pytest.raises(ValueError):
        NoduleRecord("a", 0.0)


def test_annotation_set_round_trip(tmp_path, rng):
    masks = tuple(BinaryMask3D(rng.integers(0, 2, (3, 4, 5), dtype=np.uint8)) for _ in range(3))
    manifest = write_annotation_set(RaterAnnotationSet(masks), tmp_path)
    back = read_annotation_set(manifest)
    assert back.rater_ids == ("R1", "R2", "R3")
    for a, b in zip(masks, back.masks):
        assert np.array_equal(a.voxels, b.voxels)


def test_annotation_set_rejects_misaligned_masks():
    with pytest.raises(ValueError):
        RaterAnnotationSet((BinaryMask3D(np.zeros((1, 2, 2))), BinaryMask3D(np.zeros((1, 2, 3)))))


# --- consensus ------------------------------------------------------------------


def test_consensus_matches_pattern_enumeration():
    # every one of the 16 possible 4-rater votes, one voxel each
    patterns = np.array(list(itertools.product((0, 1), repeat=4)), dtype=np.uint8)
    masks = tuple(BinaryMask3D(patterns[:, r].reshape(1, 1, 16)) for r in range(4))
    ann = RaterAnnotationSet(masks)
    votes = patterns.sum(axis=1)
    assert np.array_equal(consensus_ground_truth(ann, 0.5).voxels.ravel(), votes >= 2)
    assert np.array_equal(consensus_ground_truth(ann, 1.0).voxels.ravel(), votes == 4)
    assert np.array_equal(consensus_ground_truth(ann, 0.25).voxels.ravel(), votes >= 1)


@pytest.mark.parametrize("fraction, raters, expected", [(0.5, 4, 2), (0.5, 3, 2), (0.3, 10, 3), (0.01, 4, 1), (1.0, 7, 7)])
def test_consensus_threshold(fraction, raters, expected):
    assert consensus_threshold(fraction, raters) == expected


def test_single_rater_consensus_is_identity(rng):
    m = BinaryMask3D(rng.integers(0, 2, (2, 3, 3), dtype=np.uint8))
    assert np.array_equal(consensus_ground_truth(RaterAnnotationSet((m,)), 0.5).voxels, m.voxels)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.floats(0.05, 1.0), st.integers(0, 2**31))
def test_consensus_monotone_in_fraction(raters, fraction, seed):
    r = np.random.default_rng(seed)
    ann = RaterAnnotationSet(tuple(BinaryMask3D(r.integers(0, 2, (2, 3, 3), dtype=np.uint8)) for _ in range(raters)))
    lo = consensus_ground_truth(ann, fraction / 2).voxels
    hi = consensus_ground_truth(ann, fraction).voxels
    assert np.all(hi <= lo)


def test_fraction_out_of_range():
    with pytest.raises(ValueError):
        consensus_threshold(0.0, 4)


# --- slice stacks -----------------------------------------------------------------


def test_import_slice_stack(tmp_path):
    stack = np.arange(3 * 4 * 5, dtype=np.uint16).reshape(3, 4, 5) * 10
    for z in range(3):
        Image.fromarray(stack[z]).save(tmp_path / f"slice_{z:02d}.png")
    vol = import_slice_stack(tmp_path, (0.5, 0.5, 2.0), intercept=-1024)
    assert vol.shape == (3, 4, 5)
    assert np.array_equal(vol.voxels, stack.astype(np.int32) - 1024)
    assert vol.spacing == (0.5, 0.5, 2.0)
