from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevpretrain.grid import BevFeatureMap, BevGridSpec, WeightMask, grid_index, grid_indices
from bevpretrain.tensorio import (
    MAGIC, TensorFileError, decode_tensor, encode_tensor, header_size, read_tensor, write_tensor,
)

SPEC128 = BevGridSpec(-51.2, 51.2, -51.2, 51.2, 128, 128)


def test_grid_index_lower_corner():
    assert grid_index(SPEC128, -51.2, -51.2) == (0, 0)


def test_grid_index_origin():
    # floor((0 + 51.2) / 0.8) = 64
    assert grid_index(SPEC128, 0.0, 0.0) == (64, 64)


def test_grid_index_upper_bound_is_open():
    assert grid_index(SPEC128, 51.2, 0.0) is None
    assert grid_index(SPEC128, 0.0, 51.2) is None
    assert grid_index(SPEC128, -51.3, 0.0) is None


def test_grid_index_just_below_upper_bound():
    x = np.nextafter(51.2, 0.0)
    assert grid_index(SPEC128, x, x) == (127, 127)


def test_default_grid_cell_size():
    spec = BevGridSpec()
    assert spec.shape == (64, 64)
    assert spec.cell_size_x == pytest.approx(1.6)


@pytest.mark.parametrize("bounds", [(0, 0, -1, 1, 4, 4), (-1, 1, -1, 1, 0, 4), (-1, float("nan"), -1, 1, 4, 4)])
def test_grid_spec_rejects_degenerate(bounds):
    with pytest.raises(ValueError):
        BevGridSpec(*bounds)


@settings(max_examples=200, deadline=None)
@given(st.floats(-60, 60), st.floats(-60, 60))
def test_vectorized_index_matches_scalar(x, y):
    i, j, valid = grid_indices(SPEC128, np.array([[x, y]]))
    cell = grid_index(SPEC128, x, y)
    assert bool(valid[0]) == (cell is not None)
    if cell is not None:
        assert (int(i[0]), int(j[0])) == cell
        lo_x, hi_x, lo_y, hi_y = SPEC128.cell_bounds(*cell)
        assert lo_x - 1e-9 <= x < hi_x + 1e-9 and lo_y - 1e-9 <= y < hi_y + 1e-9


def test_feature_map_validates_shape_and_finiteness():
    spec = BevGridSpec(-2, 2, -2, 2, 2, 2)
    with pytest.raises(ValueError):
        BevFeatureMap(spec, np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        BevFeatureMap(spec, np.full((1, 2, 2), np.nan))
    fm = BevFeatureMap(spec, np.ones((3, 2, 2)))
    assert fm.channels == 3 and fm.data.dtype == np.float32
    with pytest.raises(ValueError):
        fm.data[0, 0, 0] = 2.0


def test_weight_mask_rejects_negative():
    spec = BevGridSpec(-2, 2, -2, 2, 2, 2)
    with pytest.raises(ValueError):
        WeightMask(spec, -np.ones((2, 2)))


def test_tensor_round_trip(tmp_path):
    arr = np.array([[[1, 2], [3, 4]]], dtype=np.float32)
    write_tensor(tmp_path / "t.bdkt", arr)
    out = read_tensor(tmp_path / "t.bdkt")
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_tensor_file_size_arithmetic(tmp_path):
    arr = np.zeros((256, 200, 200), dtype=np.float32)
    write_tensor(tmp_path / "z.bdkt", arr)
    assert (tmp_path / "z.bdkt").stat().st_size == 4 * 256 * 200 * 200 + header_size(3)
    assert header_size(3) == 16 + 24


def test_tensor_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert buf[:8] == MAGIC
    assert buf[8] == 0 and buf[9] == 2
    assert buf[10:16] == b"\x00" * 6
    assert int.from_bytes(buf[16:24], "little") == 2
    assert int.from_bytes(buf[24:32], "little") == 3


def test_float64_round_trip_is_exact():
    arr = np.random.default_rng(0).standard_normal((3, 4))
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.float64
    np.testing.assert_array_equal(out, arr)


def test_truncated_file_is_malformed(tmp_path):
    path = tmp_path / "t.bdkt"
    write_tensor(path, np.ones((2, 2), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TensorFileError, match="malformed tensor file"):
        read_tensor(path)


@pytest.mark.parametrize("buf", [b"", b"NOTMAGIC" + b"\x00" * 8, MAGIC + bytes([7, 0]) + b"\x00" * 6])
def test_corrupt_headers(buf):
    with pytest.raises(TensorFileError, match="malformed tensor file"):
        decode_tensor(buf)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=0, max_size=4), st.sampled_from([np.float32, np.float64]))
def test_round_trip_any_shape(shape, dtype):
    arr = np.arange(int(np.prod(shape)) if shape else 1, dtype=dtype).reshape(shape)
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == arr.shape and out.dtype == arr.dtype
    np.testing.assert_array_equal(out, arr)
