"""Minimal binary volume format (``.svf``).

Layout, little-endian: ``b"SVF1"``, dtype code (u8: 0 = float32, 1 = uint8), ndim (u8),
``ndim`` u32 extents, then the C-order payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SVF1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


def write_svf(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _DTYPES.get(array.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {array.dtype}; use float32 or uint8")
    header = MAGIC + struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=_CODES[code]).tobytes())


def read_svf(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not an SVF file")
    if len(raw) < 6:
        raise DataError(f"{path}: truncated header")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    off = 6 + 4 * ndim
    if len(raw) < off:
        raise DataError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 6)
    dt = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) - off != expected:
        raise DataError(f"{path}: payload is {len(raw) - off} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))
