import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthct.nifti import UnsupportedFeatureError, read_nifti
from synthct.volume import (
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    IntensitySpace,
    InvalidRangeError,
    Mask,
    NormStats,
    Volume,
    VolumeError,
    clip_hu,
    denormalize,
    load_mask,
    load_volume,
    normalize,
    resample_trilinear,
    save_volume,
    zscore_dataset,
    zscore_per_scan,
)


def vol(values, space=IntensitySpace.HU, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(values, dtype=np.float64).reshape(1, 1, -1), spacing, space)


# --- types ---------------------------------------------------------------------

def test_volume_is_float32_and_read_only():
    v = vol([1, 2, 3])
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 5


def test_volume_rejects_bad_input():
    with pytest.raises(VolumeError):
        Volume(np.array([np.nan]).reshape(1, 1, 1))
    with pytest.raises(InvalidRangeError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(VolumeError):
        Volume(np.zeros((2, 2)))


def test_normstats_invariants():
    with pytest.raises(InvalidRangeError):
        NormStats(0.0, 0.0)
    with pytest.raises(InvalidRangeError):
        NormStats(0.0, 1.0, 10.0, 5.0)


# --- clipping ------------------------------------------------------------------

def test_clip_examples():
    out = clip_hu(vol([2000, 0, -2000])).data.ravel()
    np.testing.assert_array_equal(out, [1500, 0, -1024])


def test_clip_empty_range():
    with pytest.raises(InvalidRangeError):
        clip_hu(vol([0]), 10, 10)


@given(arrays(np.float32, (2, 3, 4), elements=st.floats(-5000, 5000, width=32)))
def test_clip_idempotent(data):
    v = Volume(data)
    once = clip_hu(v)
    assert np.array_equal(clip_hu(once).data, once.data)
    inside = (data >= -1024) & (data <= 1500)
    assert np.array_equal(once.data[inside], data[inside])


# --- z-scores ------------------------------------------------------------------

def test_zscore_two_points():
    out, stats = zscore_per_scan(vol([1, 3], IntensitySpace.MRI_RAW))
    np.testing.assert_allclose(out.data.ravel(), [-1, 1])
    assert (stats.mean, stats.std, stats.scope) == (2.0, 1.0, "PER_SCAN")
    assert out.intensity_space is IntensitySpace.NORMALIZED


def test_zscore_constant_is_degenerate():
    with pytest.raises(DegenerateInputError):
        zscore_per_scan(vol([4, 4, 4]))


def test_zscore_matches_two_pass_oracle(rng):
    data = rng.standard_normal((8, 8, 8)) * 30 + 7
    v = Volume(data)
    x = v.data.astype(np.float64).ravel()
    total = 0.0
    for value in x:
        total += value
    mean = total / x.size
    sq = 0.0
    for value in x:
        sq += (value - mean) ** 2
    std = (sq / x.size) ** 0.5
    out, stats = zscore_per_scan(v)
    assert stats.mean == pytest.approx(mean, rel=1e-6)
    assert stats.std == pytest.approx(std, rel=1e-6)
    np.testing.assert_allclose(out.data, ((v.data - mean) / std), rtol=1e-5, atol=1e-6)


@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1000, 1000)), st.floats(0.5, 200))
def test_zscore_property(data, scale):
    data = data + np.arange(data.size).reshape(data.shape) * scale  # guarantees spread
    out, _ = zscore_per_scan(Volume(data))
    x = out.data.astype(np.float64)
    assert abs(x.mean()) < 1e-5
    assert abs(x.std() - 1) < 1e-5


def test_dataset_two_volume_hand_case():
    outs, stats = zscore_dataset([vol([0, 0]), vol([2, 2])])
    assert (stats.mean, stats.std, stats.scope) == (1.0, 1.0, "DATASET")
    np.testing.assert_array_equal(outs[0].data.ravel(), [-1, -1])
    np.testing.assert_array_equal(outs[1].data.ravel(), [1, 1])


def test_dataset_single_volume_matches_per_scan(rng):
    v = Volume(rng.uniform(-1000, 1000, (4, 4, 4)))
    a, _ = zscore_dataset([v])
    b, _ = zscore_per_scan(v)
    np.testing.assert_array_equal(a[0].data, b.data)


def test_dataset_empty():
    with pytest.raises(EmptyInputError):
        zscore_dataset([])


def test_dataset_masked_alternative(rng):
    v = Volume(rng.uniform(-1000, 1000, (4, 4, 4)))
    m = Mask(v.data > 0)
    _, stats = zscore_dataset([v], masks=[m])
    assert stats.mean == pytest.approx(float(v.data[v.data > 0].astype(np.float64).mean()))


def test_denormalize_examples():
    zero = vol([0, 0, 0], IntensitySpace.NORMALIZED)
    np.testing.assert_array_equal(denormalize(zero, NormStats(40, 300)).data, 40)
    out = denormalize(vol([10], IntensitySpace.NORMALIZED), NormStats(0, 300, -1024, 1500))
    assert out.data.ravel()[0] == 1500 and out.intensity_space is IntensitySpace.HU


def test_dataset_roundtrip_within_1e4_hu(rng):
    vols = [clip_hu(Volume(rng.uniform(-1100, 1600, (6, 7, 8)))) for _ in range(3)]
    outs, stats = zscore_dataset(vols)
    for v, o in zip(vols, outs):
        assert np.abs(denormalize(o, stats).data.astype(np.float64) - v.data).max() <= 1e-4
        assert np.abs(denormalize(normalize(v, stats), stats).data - v.data).max() <= 1e-4


# --- resampling ----------------------------------------------------------------

def test_resample_identity_is_bit_exact(rng):
    v = Volume(rng.standard_normal((3, 4, 5)), (3.0, 1.0, 1.0))
    assert resample_trilinear(v, (3.0, 1.0, 1.0)).data.tobytes() == v.data.tobytes()


@given(st.floats(0.3, 4.0), st.floats(0.3, 4.0), st.floats(0.3, 4.0), st.floats(-1000, 1000))
def test_resample_constant(sz, sy, sx, c):
    v = Volume(np.full((4, 5, 6), c), (1.0, 1.5, 2.0))
    out = resample_trilinear(v, (sz, sy, sx))
    np.testing.assert_allclose(out.data, np.float32(c), rtol=1e-6)


def test_resample_shape_rule():
    v = Volume(np.zeros((10, 20, 30)), (3.0, 1.0, 1.0))
    assert resample_trilinear(v, (1.0, 2.0, 0.5)).shape == (30, 10, 60)


def test_resample_linear_ramp_halved_x():
    nx = 8
    ramp = np.tile(np.arange(nx, dtype=np.float64) * 2.0, (2, 3, 1))
    out = resample_trilinear(Volume(ramp, (1.0, 1.0, 1.0)), (1.0, 1.0, 0.5))
    assert out.shape == (2, 3, 16)
    # output voxel i sits at input coordinate (i + 0.5) / 2 - 0.5, clamped to the grid
    coords = np.clip((np.arange(16) + 0.5) * 0.5 - 0.5, 0, nx - 1)
    np.testing.assert_allclose(out.data[0, 0], 2.0 * coords, atol=1e-5)


def test_resample_rejects_bad_spacing():
    with pytest.raises(InvalidRangeError):
        resample_trilinear(Volume(np.zeros((2, 2, 2))), (1.0, -1.0, 1.0))


# --- container -----------------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path, rng):
    v = Volume(rng.standard_normal((4, 5, 6)), (1.0, 1.0, 3.0), IntensitySpace.MRI_RAW)
    save_volume(v, tmp_path / "a")
    back, mask = load_volume(tmp_path / "a")
    assert mask is None
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing_mm == (1.0, 1.0, 3.0)
    assert back.intensity_space is IntensitySpace.MRI_RAW


def test_header_layout(tmp_path):
    save_volume(Volume(np.zeros((2, 3, 4)), (3.0, 1.0, 1.0)), tmp_path / "h")
    header = json.loads((tmp_path / "h.json").read_text())
    assert header == {"shape": [2, 3, 4], "spacing_mm": [3.0, 1.0, 1.0], "dtype": "f32le",
                      "intensity_space": "HU", "mask": False}
    assert (tmp_path / "h.raw").stat().st_size == 2 * 3 * 4 * 4


def test_mask_roundtrip(tmp_path, rng):
    m = Mask(rng.random((3, 3, 3)) > 0.5, (2.0, 1.0, 1.0))
    save_volume(m, tmp_path / "m")
    back = load_mask(tmp_path / "m")
    assert np.array_equal(back.data, m.data) and back.spacing_mm == m.spacing_mm
    with pytest.raises(FormatError):
        save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v")
        load_mask(tmp_path / "v")


def _write(tmp_path, header, n_values):
    (tmp_path / "x.json").write_text(json.dumps(header))
    (tmp_path / "x.raw").write_bytes(np.zeros(n_values, "<f4").tobytes())
    return tmp_path / "x"


GOOD = {"shape": [2, 2, 2], "spacing_mm": [1, 1, 1], "dtype": "f32le", "intensity_space": "HU", "mask": False}


@pytest.mark.parametrize(
    "patch,n,field",
    [
        ({}, 7, "shape"),
        ({"intensity_space": "CBCT"}, 8, "intensity_space"),
        ({"dtype": "f64le"}, 8, "dtype"),
        ({"spacing_mm": [1, 0, 1]}, 8, "spacing_mm"),
        ({"shape": [2, 2]}, 8, "shape"),
        ({"mask": "yes"}, 8, "mask"),
    ],
)
def test_format_errors_name_field(tmp_path, patch, n, field):
    path = _write(tmp_path, {**GOOD, **patch}, n)
    with pytest.raises(FormatError, match=field):
        load_volume(path)


def test_missing_field(tmp_path):
    header = dict(GOOD)
    del header["dtype"]
    with pytest.raises(FormatError, match="dtype"):
        load_volume(_write(tmp_path, header, 8))


def test_malformed_json(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    (tmp_path / "x.raw").write_bytes(b"")
    with pytest.raises(FormatError):
        load_volume(tmp_path / "x")


# --- NIfTI import ----------------------------------------------------------------

def nifti_bytes(data, pixdim=(1.0, 1.0, 1.0), datatype=16, endian="<", magic=b"n+1\x00", dims=None, slope=0.0):
    nz, ny, nx = data.shape
    codes = {16: "f4", 4: "i2", 2: "u1", 64: "f8"}
    arr = np.asarray(data).astype(endian + codes[datatype])
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dim = dims or (3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    struct.pack_into(endian + "2h", hdr, 70, datatype, arr.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, pixdim[2], pixdim[1], pixdim[0], 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, 0.0)
    hdr[344:348] = magic
    # x varies fastest on disk
    return bytes(hdr) + b"\x00" * 4 + arr.tobytes(order="C")


@pytest.mark.parametrize("endian", ["<", ">"])
def test_nifti_reads_zyx_and_spacing(tmp_path, rng, endian):
    data = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "a.nii"
    path.write_bytes(nifti_bytes(data, pixdim=(3.0, 1.0, 0.5), endian=endian))
    v = read_nifti(path)
    np.testing.assert_array_equal(v.data, data)
    assert v.spacing_mm == (3.0, 1.0, 0.5)
    assert v.intensity_space is IntensitySpace.MRI_RAW


def test_nifti_gzip_and_scaling(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "a.nii.gz"
    path.write_bytes(gzip.compress(nifti_bytes(data, datatype=4, slope=2.0)))
    np.testing.assert_array_equal(read_nifti(path, IntensitySpace.HU).data, data * 2.0)


def test_nifti_unsupported_features(tmp_path, rng):
    data = rng.standard_normal((2, 2, 2))
    p = tmp_path / "a.nii"
    p.write_bytes(nifti_bytes(data, magic=b"ni1\x00"))
    with pytest.raises(UnsupportedFeatureError):
        read_nifti(p)
    p.write_bytes(nifti_bytes(data, dims=(4, 2, 2, 2, 3, 1, 1, 1)))
    with pytest.raises(UnsupportedFeatureError):
        read_nifti(p)
    hdr = bytearray(nifti_bytes(data))
    struct.pack_into("<h", hdr, 70, 1536)
    p.write_bytes(bytes(hdr))
    with pytest.raises(UnsupportedFeatureError):
        read_nifti(p)


def test_nifti_truncated(tmp_path):
    p = tmp_path / "a.nii"
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(FormatError):
        read_nifti(p)
