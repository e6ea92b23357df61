import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segmaformer.errors import DataError
from segmaformer.volume_io import read_svf, write_svf

shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5)


@given(arr=hnp.arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=False)))
@settings(max_examples=60, deadline=None)
def test_float_round_trip_is_bitwise(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("svf") / "v.svf"
    write_svf(path, arr)
    back = read_svf(path)
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@given(arr=hnp.arrays(np.uint8, shapes))
@settings(max_examples=30, deadline=None)
def test_label_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("svf") / "l.svf"
    write_svf(path, arr)
    np.testing.assert_array_equal(read_svf(path), arr)


def test_header_layout(tmp_path):
    write_svf(tmp_path / "a.svf", np.zeros((2, 3), dtype=np.uint8))
    raw = (tmp_path / "a.svf").read_bytes()
    assert raw[:4] == b"SVF1"
    assert struct.unpack_from("<BB2I", raw, 4) == (1, 2, 2, 3)
    assert len(raw) == 4 + 2 + 8 + 6


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(DataError):
        write_svf(tmp_path / "a.svf", np.zeros(3, dtype=np.float64))


def test_rejects_bad_magic(tmp_path):
    (tmp_path / "a.svf").write_bytes(b"XXXX\0\1\1\0\0\0")
    with pytest.raises(DataError, match="not an SVF"):
        read_svf(tmp_path / "a.svf")


def test_rejects_truncated_payload(tmp_path):
    write_svf(tmp_path / "a.svf", np.ones((4, 4), dtype=np.float32))
    raw = (tmp_path / "a.svf").read_bytes()
    (tmp_path / "a.svf").write_bytes(raw[:-3])
    with pytest.raises(DataError, match="payload"):
        read_svf(tmp_path / "a.svf")


def test_rejects_unknown_dtype_code(tmp_path):
    (tmp_path / "a.svf").write_bytes(b"SVF1" + bytes([9, 1]) + struct.pack("<I", 1) + b"\0")
    with pytest.raises(DataError, match="dtype code"):
        read_svf(tmp_path / "a.svf")
