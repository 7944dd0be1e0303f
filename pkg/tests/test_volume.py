"""Volume model, NIfTI round-trips, windowing, slicing and tiling geometry."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locseg import volume as V


def _vol(data, spacing=(1.0, 1.0, 1.0), modality="PET"):
    return V.Volume(np.asarray(data, dtype=np.float32), spacing, modality)


def rand_volume(seed, shape=(4, 5, 6), modality="PET"):
    rng = np.random.default_rng(seed)
    return _vol(rng.normal(size=shape).astype(np.float32), modality=modality)


# ---------------------------------------------------------------------------
# data model invariants


def test_volume_rejects_bad_spacing():
    with pytest.raises(ValueError, match="spacing"):
        V.Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0), "CT")


def test_mask_values_validated():
    with pytest.raises(ValueError, match="MASK"):
        V.Volume(np.full((2, 2, 2), 0.5), (1, 1, 1), "MASK")
    v = V.Volume(np.ones((2, 2, 2)), (1, 1, 1), "MASK")
    assert v.data.dtype == np.uint8


def test_prob_range_validated():
    with pytest.raises(ValueError, match="PROB"):
        V.Volume(np.full((2, 2, 2), 1.5), (1, 1, 1), "PROB")


def test_case_alignment_checked():
    ct = _vol(np.zeros((2, 2, 2)), modality="CT")
    pet_bad = _vol(np.zeros((2, 2, 3)), modality="PET")
    with pytest.raises(ValueError, match="does not match"):
        V.Case("c0", ct, pet_bad)


# ---------------------------------------------------------------------------
# NIfTI I/O


@pytest.mark.parametrize("modality,code", [("PROB", 16), ("PET", 16), ("MASK", 2)])
def test_write_datatype_codes(tmp_path, modality, code):
    data = np.zeros((3, 4, 5), dtype=np.float32)
    if modality == "MASK":
        data = data.astype(np.uint8)
        data[0, 0, 0] = 1
    elif modality == "PROB":
        data[:] = 0.25
    path = tmp_path / "v.nii"
    V.write_nifti(V.Volume(data, (1, 2, 3), modality), path)
    raw = path.read_bytes()
    datatype = int.from_bytes(raw[70:72], "little")
    assert datatype == code
    assert int.from_bytes(raw[0:4], "little") == 348
    assert raw[344:348] == b"n+1\0"


def test_float32_round_trip_bit_exact(tmp_path):
    v = rand_volume(3, shape=(5, 6, 7))
    path = tmp_path / "rt.nii"
    V.write_nifti(v, path)
    back = V.read_nifti(path)
    assert back.modality == "PET"
    np.testing.assert_array_equal(back.data, v.data)
    assert back.data.dtype == np.float32


def test_round_trip_preserves_spacing(tmp_path):
    v = _vol(np.zeros((2, 3, 4)), spacing=(0.9765625, 2.5, 3.0))
    path = tmp_path / "sp.nii"
    V.write_nifti(v, path)
    back = V.read_nifti(path)
    assert back.spacing == tuple(np.float32(s) for s in v.spacing)


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    mask = (rng.random((4, 4, 4)) > 0.5).astype(np.uint8)
    path = tmp_path / "m.nii"
    V.write_nifti(V.Volume(mask, (1, 1, 1), "MASK"), path)
    back = V.read_nifti(path)
    assert back.modality == "MASK"
    np.testing.assert_array_equal(back.data, mask)


def test_header_field_layout(tmp_path):
    # dim/pixdim fields land where the format says they do
    v = _vol(np.zeros((4, 5, 6)), spacing=(2.0, 2.0, 3.0))
    path = tmp_path / "h.nii"
    V.write_nifti(v, path)
    raw = path.read_bytes()
    dim = np.frombuffer(raw[40:56], dtype="<i2")
    np.testing.assert_array_equal(dim, [3, 4, 5, 6, 1, 1, 1, 1])
    pixdim = np.frombuffer(raw[76:108], dtype="<f4")
    np.testing.assert_array_equal(pixdim[1:4], [2.0, 2.0, 3.0])
    vox_offset = np.frombuffer(raw[108:112], dtype="<f4")[0]
    assert vox_offset == 352.0


def test_read_rejects_bad_magic(tmp_path):
    v = _vol(np.zeros((2, 2, 2)))
    path = tmp_path / "bad.nii"
    V.write_nifti(v, path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(V.NiftiFormatError, match="magic"):
        V.read_nifti(path)


def test_read_rejects_unsupported_datatype(tmp_path):
    v = _vol(np.zeros((2, 2, 2)))
    path = tmp_path / "dt.nii"
    V.write_nifti(v, path)
    raw = bytearray(path.read_bytes())
    raw[70:72] = (4).to_bytes(2, "little")  # int16
    path.write_bytes(bytes(raw))
    with pytest.raises(V.NiftiUnsupportedError, match="datatype code 4"):
        V.read_nifti(path)


def test_read_rejects_gzip(tmp_path):
    import gzip
    path = tmp_path / "z.nii"
    path.write_bytes(gzip.compress(b"not a volume"))
    with pytest.raises(V.NiftiUnsupportedError, match="gzip"):
        V.read_nifti(path)


def test_scl_slope_applied(tmp_path):
    v = _vol(np.full((2, 2, 2), 10.0))
    path = tmp_path / "sc.nii"
    V.write_nifti(v, path)
    raw = bytearray(path.read_bytes())
    raw[112:116] = np.float32(2.0).tobytes()  # scl_slope
    raw[116:120] = np.float32(1.0).tobytes()  # scl_inter
    path.write_bytes(bytes(raw))
    back = V.read_nifti(path)
    np.testing.assert_allclose(back.data, 21.0)


# ---------------------------------------------------------------------------
# windowing


def test_window_endpoints_and_midpoint():
    v = _vol(np.array([[[100.0, 250.0, 400.0, 175.0]]]), modality="CT")
    out = V.window_scale(v, 100.0, 250.0)
    np.testing.assert_allclose(out.data[0, 0], [0.0, 1.0, 1.0, 0.5])
    assert out.modality == "CT"


def test_window_rejects_bad_range():
    with pytest.raises(ValueError, match="hi > lo"):
        V.window_scale(rand_volume(0), 5.0, 5.0)


@given(st.floats(min_value=-100, max_value=100), st.integers(0, 2**31 - 1))
@settings(max_examples=40)
def test_window_bounded_and_idempotent_on_unit(shift, seed):
    v = rand_volume(seed)
    out = V.window_scale(v, -1.0 + shift, 1.0 + shift)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    again = V.window_scale(out, 0.0, 1.0)
    np.testing.assert_array_equal(again.data, out.data)


# ---------------------------------------------------------------------------
# slicing and stacking


def test_slice_shapes_and_count():
    v = rand_volume(7, shape=(4, 5, 6))
    slices = V.slice_stack(v, axis=1)
    assert len(slices) == 5
    assert all(s.shape == (4, 6) for s in slices)


def test_slice_indexing_matches_subarray():
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    v = _vol(data)
    for k, s in enumerate(V.slice_stack(v, axis=0)):
        np.testing.assert_array_equal(s, data[k])


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_stack_inverts_slice(axis):
    rng = np.random.default_rng(11)
    data = rng.random((3, 4, 5)).astype(np.float32)
    v = V.Volume(data, (1, 2, 3), "PROB")
    cue = V.stack_to_cue(V.slice_stack(v, axis), axis, v.spacing)
    np.testing.assert_array_equal(cue.data, data)
    assert cue.cue.spacing == v.spacing


def test_stack_rejects_ragged_and_out_of_range():
    with pytest.raises(ValueError, match="ragged"):
        V.stack_to_cue([np.zeros((2, 2)), np.zeros((2, 3))], 0, (1, 1, 1))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        V.stack_to_cue([np.full((2, 2), 1.5)], 0, (1, 1, 1))


def test_stack_single_slice():
    cue = V.stack_to_cue([np.full((3, 4), 0.5, dtype=np.float32)], 1, (1, 1, 1))
    assert cue.shape == (3, 1, 4)


def test_slice_axis_out_of_range():
    with pytest.raises(ValueError, match="axis"):
        V.slice_stack(rand_volume(0), 3)


# ---------------------------------------------------------------------------
# patches and tiling


def test_patch_identity_and_single_voxel():
    v = rand_volume(13, shape=(3, 4, 5))
    whole = V.extract_patch(v, (0, 0, 0), v.shape)
    np.testing.assert_array_equal(whole.data, v.data)
    one = V.extract_patch(v, (1, 2, 3), (1, 1, 1))
    assert one.data[0, 0, 0] == v.data[1, 2, 3]


def test_patch_out_of_bounds_names_axis():
    v = rand_volume(17, shape=(3, 4, 5))
    with pytest.raises(ValueError, match="axis 2"):
        V.extract_patch(v, (0, 0, 3), (1, 1, 4))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25)
def test_patch_of_patch_composes(seed):
    rng = np.random.default_rng(seed)
    v = rand_volume(seed, shape=(6, 7, 8))
    o1 = tuple(int(rng.integers(0, 3)) for _ in range(3))
    s1 = tuple(int(rng.integers(2, 4)) for _ in range(3))
    o2 = tuple(int(rng.integers(0, 2)) for _ in range(3))
    s2 = tuple(int(rng.integers(1, s1[i] - o2[i] + 1)) for i in range(3))
    inner = V.extract_patch(V.extract_patch(v, o1, s1), o2, s2)
    direct = V.extract_patch(v, tuple(a + b for a, b in zip(o1, o2)), s2)
    np.testing.assert_array_equal(inner.data, direct.data)


def test_tile_positions_enumerated():
    assert V.tile_positions((10,), (4,), (2,)) == [(0,), (2,), (4,), (6,)]
    assert V.tile_positions((8,), (8,), (8,)) == [(0,)]
    assert V.tile_positions((10,), (4,), (3,)) == [(0,), (3,), (6,)]


def test_tile_positions_rejects_oversized_patch():
    with pytest.raises(ValueError, match="pad"):
        V.tile_positions((4, 4, 4), (5, 4, 4), (1, 1, 1))


@given(st.tuples(st.integers(3, 12), st.integers(3, 12), st.integers(3, 12)),
       st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=60)
def test_tile_positions_cover_every_voxel(shape, patch_seed, stride_seed):
    patch = tuple(min(1 + patch_seed, n) for n in shape)
    stride = tuple(min(1 + stride_seed % p, p) for p in patch)
    covered = np.zeros(shape, dtype=bool)
    for origin in V.tile_positions(shape, patch, stride):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        covered[sl] = True
    assert covered.all()
