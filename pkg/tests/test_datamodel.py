"""Data-object, forward-map, and file-format tests.

Forward-map oracles are filters whose contraction has a closed form: a
delta filter picks one detector pixel, an all-ones filter is the frame
sum, zero gives zero.  Format tests check byte-exact round trips and
rejection of malformed files.
"""

import numpy as np
import pytest

from stemfilter import datamodel as dm
from stemfilter.errors import FormatError


def _dataset(seed=0, dims=(3, 4, 5, 6)):
    rng = np.random.default_rng(seed)
    return dm.Dataset4D(rng.random(dims, dtype=np.float32))


# ---------------------------------------------------------------------------
# value objects
# ---------------------------------------------------------------------------

def test_dataset_shape_properties():
    d = _dataset()
    assert d.dims == (3, 4, 5, 6)
    assert d.scan_dims == (3, 4)
    assert d.detector_dims == (5, 6)
    assert d.frames().shape == (12, 30)


def test_dataset_frames_is_a_view():
    d = _dataset()
    assert d.frames().base is d.values


def test_dataset_is_immutable():
    d = _dataset()
    with pytest.raises(ValueError):
        d.values[0, 0, 0, 0] = 1.0


@pytest.mark.parametrize("bad", [
    np.zeros((2, 2, 2)),                       # wrong rank
    np.zeros((2, 0, 2, 2)),                    # degenerate axis
    np.full((1, 1, 2, 2), -1.0),               # negative
    np.full((1, 1, 2, 2), np.nan),             # non-finite
])
def test_dataset_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        dm.Dataset4D(bad)


def test_filter_geometry_tags():
    v = np.zeros((2, 2))
    assert dm.FilterImage(v).geometry == "pixelated"
    assert dm.FilterImage(v, "masked").geometry == "masked"
    with pytest.raises(ValueError):
        dm.FilterImage(v, "hexagonal")


def test_region_row_ids_example():
    # rows 1..2, cols 0..1 of a 4 x 5 scan, row-major flat indices
    region = dm.ScanRegion(1, 3, 0, 2)
    assert region.dims == (2, 2)
    assert region.size == 4
    assert region.row_ids((4, 5)).tolist() == [5, 6, 10, 11]


def test_region_validation():
    with pytest.raises(ValueError):
        dm.ScanRegion(2, 2, 0, 1)       # empty
    with pytest.raises(ValueError):
        dm.ScanRegion(-1, 2, 0, 1)      # negative origin
    with pytest.raises(ValueError):
        dm.ScanRegion(0, 5, 0, 1).check_within((4, 4))


def test_vectorize_round_trip():
    image = dm.RealImage(np.arange(6.0).reshape(2, 3))
    vec = dm.vectorize(image)
    assert vec.tolist() == [0, 1, 2, 3, 4, 5]
    back = dm.devectorize(vec, (2, 3))
    assert np.array_equal(back.values, image.values)
    with pytest.raises(ValueError):
        dm.devectorize(vec, (3, 3))


def test_design_matrix_validation():
    values = np.zeros((4, 3))
    with pytest.raises(ValueError):
        dm.DesignMatrix(values, np.array([0, 2, 1]), (2, 2))   # not increasing
    with pytest.raises(ValueError):
        dm.DesignMatrix(values, np.array([0, 1]), (2, 2))      # wrong length
    with pytest.raises(ValueError):
        dm.DesignMatrix(values, np.array([0, 1, 2]), (2, 2), "banded")


# ---------------------------------------------------------------------------
# forward map
# ---------------------------------------------------------------------------

def test_apply_filter_delta_picks_one_pixel():
    d = _dataset(1)
    k0, l0 = 2, 4
    weights = np.zeros(d.detector_dims)
    weights[k0, l0] = 1.0
    recon = dm.apply_filter(d, dm.FilterImage(weights))
    assert np.array_equal(recon.values,
                          d.values[:, :, k0, l0].astype(np.float64))


def test_apply_filter_ones_is_frame_sum():
    d = _dataset(2)
    recon = dm.apply_filter(d, dm.FilterImage(np.ones(d.detector_dims)))
    expected = d.values.astype(np.float64).sum(axis=(2, 3))
    assert np.allclose(recon.values, expected, rtol=1e-12, atol=0)


def test_apply_filter_zero_gives_zero():
    d = _dataset(3)
    recon = dm.apply_filter(d, dm.FilterImage(np.zeros(d.detector_dims)))
    assert not recon.values.any()


def test_apply_filter_linearity():
    d = _dataset(4)
    rng = np.random.default_rng(5)
    f1 = rng.standard_normal(d.detector_dims)
    f2 = rng.standard_normal(d.detector_dims)
    a, b = 2.5, -0.75
    lhs = dm.apply_filter(d, dm.FilterImage(a * f1 + b * f2)).values
    rhs = (a * dm.apply_filter(d, dm.FilterImage(f1)).values
           + b * dm.apply_filter(d, dm.FilterImage(f2)).values)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_apply_filter_region_matches_full_slice():
    d = _dataset(6, dims=(6, 7, 4, 4))
    filt = dm.FilterImage(np.random.default_rng(7).random((4, 4)))
    full = dm.apply_filter(d, filt)
    region = dm.ScanRegion(2, 5, 1, 6)
    part = dm.apply_filter(d, filt, region)
    assert np.array_equal(part.values, full.values[2:5, 1:6])


def test_apply_filter_dims_mismatch():
    d = _dataset(8)
    with pytest.raises(ValueError):
        dm.apply_filter(d, dm.FilterImage(np.zeros((2, 2))))


# ---------------------------------------------------------------------------
# design assembly
# ---------------------------------------------------------------------------

def test_design_rows_are_vectorized_frames():
    d = _dataset(9)
    x = dm.assemble_design(d, dm.full_region(d.scan_dims))
    assert (x.n, x.p) == (12, 30)
    assert x.geometry == "pixelated"
    assert np.array_equal(x.values, d.frames().astype(np.float64))
    assert np.array_equal(x.col_map, np.arange(30))


def test_design_region_rows():
    d = _dataset(10)
    region = dm.ScanRegion(1, 3, 0, 4)
    x = dm.assemble_design(d, region)
    assert x.n == 8
    assert np.array_equal(x.values[0], d.values[1, 0].ravel().astype(np.float64))


def test_design_prediction_matches_apply_filter():
    # X w must equal the vectorized contraction with the same weights
    d = _dataset(11)
    rng = np.random.default_rng(12)
    weights = rng.standard_normal(d.detector_dims)
    x = dm.assemble_design(d, dm.full_region(d.scan_dims))
    pred = x.values @ weights.ravel()
    recon = dm.vectorize(dm.apply_filter(d, dm.FilterImage(weights)))
    assert np.allclose(pred, recon, atol=1e-12)


def test_design_with_mask_drops_columns():
    d = _dataset(13)

    class Mask:
        flags = np.zeros((5, 6), dtype=bool)
        dims = (5, 6)

    Mask.flags[1, 2] = True
    Mask.flags[3, 4] = True
    x = dm.assemble_design(d, dm.full_region(d.scan_dims), Mask)
    assert x.geometry == "masked"
    assert x.p == 2
    assert x.col_map.tolist() == [1 * 6 + 2, 3 * 6 + 4]
    assert np.array_equal(x.values[:, 0],
                          d.frames()[:, 8].astype(np.float64))


def test_filter_from_weights_zeroes_missing_pixels():
    col_map = np.array([1, 5, 7], dtype=np.int64)
    filt = dm.filter_from_weights([2.0, -1.0, 0.5], col_map, (3, 3), "masked")
    expected = np.zeros(9)
    expected[[1, 5, 7]] = [2.0, -1.0, 0.5]
    assert np.array_equal(filt.values.ravel(), expected)
    assert filt.geometry == "masked"
    with pytest.raises(ValueError):
        dm.filter_from_weights([1.0], col_map, (3, 3))


# ---------------------------------------------------------------------------
# tensor format
# ---------------------------------------------------------------------------

def test_s4dm_round_trip_bit_exact(tmp_path):
    d = _dataset(14)
    path = str(tmp_path / "d.s4dm")
    dm.store_s4dm(d, path)
    back = dm.load_s4dm(path)
    assert back.dims == d.dims
    assert np.array_equal(
        back.values.view(np.uint32), d.values.view(np.uint32))


def test_s4dm_header_layout(tmp_path):
    d = _dataset(15, dims=(2, 3, 4, 5))
    path = str(tmp_path / "d.s4dm")
    dm.store_s4dm(d, path)
    blob = open(path, "rb").read()
    assert blob[:4] == b"S4DM"
    assert np.frombuffer(blob[4:24], dtype="<u4").tolist() == [1, 2, 3, 4, 5]
    assert len(blob) == 24 + 2 * 3 * 4 * 5 * 4


@pytest.mark.parametrize("mangle", [
    lambda blob: blob[:20],                          # truncated payload
    lambda blob: blob + b"\x00\x00\x00\x00",         # trailing bytes
    lambda blob: b"X4DM" + blob[4:],                 # bad magic
    lambda blob: blob[:4] + b"\x02\x00\x00\x00" + blob[8:],  # bad version
    lambda blob: blob[:8],                           # truncated header
])
def test_s4dm_rejects_malformed(tmp_path, mangle):
    d = _dataset(16, dims=(1, 2, 2, 2))
    path = str(tmp_path / "d.s4dm")
    dm.store_s4dm(d, path)
    blob = mangle(open(path, "rb").read())
    bad = tmp_path / "bad.s4dm"
    bad.write_bytes(blob)
    with pytest.raises(FormatError):
        dm.load_s4dm(str(bad))


def test_open_s4dm_frames_matches_load(tmp_path):
    d = _dataset(17)
    path = str(tmp_path / "d.s4dm")
    dm.store_s4dm(d, path)
    dims, frames = dm.open_s4dm_frames(path)
    assert dims == d.dims
    assert np.array_equal(np.asarray(frames), d.frames())


# ---------------------------------------------------------------------------
# filter format
# ---------------------------------------------------------------------------

def test_filter_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(18)
    original = rng.standard_normal((4, 7)).astype(np.float32)
    filt = dm.FilterImage(original.astype(np.float64))
    path = str(tmp_path / "f.f4dm")
    dm.store_filter(filt, path)
    back = dm.load_filter(path)
    assert back.dims == (4, 7)
    assert np.array_equal(back.values, original.astype(np.float64))


def test_filter_storage_quantizes_to_float32(tmp_path):
    value = 0.1  # not float32-representable
    filt = dm.FilterImage(np.full((1, 1), value))
    path = str(tmp_path / "f.f4dm")
    dm.store_filter(filt, path)
    back = dm.load_filter(path)
    assert back.values[0, 0] == float(np.float32(value))
    assert back.values[0, 0] != value


def test_filter_rejects_wrong_size(tmp_path):
    filt = dm.FilterImage(np.zeros((2, 2)))
    path = str(tmp_path / "f.f4dm")
    dm.store_filter(filt, path)
    blob = open(path, "rb").read()
    bad = tmp_path / "bad.f4dm"
    bad.write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        dm.load_filter(str(bad))


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------

def test_pgm16_known_levels(tmp_path):
    image = dm.RealImage(np.array([[0.0, 1.0], [2.0, 3.0]]))
    path = str(tmp_path / "i.pgm")
    dm.export_image(image, "pgm16", path)
    back = dm.load_pgm16(path)
    assert back.values.ravel().tolist() == [0.0, 21845.0, 43690.0, 65535.0]


def test_pgm16_constant_image_is_zeros(tmp_path):
    image = dm.RealImage(np.full((3, 3), 7.5))
    path = str(tmp_path / "i.pgm")
    dm.export_image(image, "pgm16", path)
    assert not dm.load_pgm16(path).values.any()


def test_pgm16_header_and_endianness(tmp_path):
    image = dm.RealImage(np.array([[0.0, 65535.0]]))
    path = str(tmp_path / "i.pgm")
    dm.export_image(image, "pgm16", path)
    blob = open(path, "rb").read()
    assert blob.startswith(b"P5\n2 1\n65535\n")
    assert blob[-4:] == b"\x00\x00\xff\xff"  # big-endian samples


def test_pgm16_rejects_eight_bit(tmp_path):
    path = tmp_path / "i.pgm"
    path.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError):
        dm.load_pgm16(str(path))


def test_csv_round_trip_exact(tmp_path):
    rng = np.random.default_rng(19)
    image = dm.RealImage(rng.standard_normal((5, 4)))
    path = str(tmp_path / "i.csv")
    dm.export_image(image, "csv", path)
    back = dm.load_image_csv(path)
    assert np.array_equal(back.values, image.values)


def test_csv_rejects_garbage(tmp_path):
    path = tmp_path / "i.csv"
    path.write_text("1.0,2.0\nthree,4.0\n")
    with pytest.raises(FormatError):
        dm.load_image_csv(str(path))


def test_export_rejects_unknown_format(tmp_path):
    image = dm.RealImage(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        dm.export_image(image, "tiff", str(tmp_path / "i.tiff"))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    d = _dataset(20, dims=(1, 1, 2, 2))
    dm.store_s4dm(d, str(tmp_path / "d.s4dm"))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d.s4dm"]
