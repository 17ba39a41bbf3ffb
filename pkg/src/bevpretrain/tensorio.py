"""Binary tensor files.

Layout (little-endian)::

    8 bytes  magic  b"BDKT0001"
    u8       dtype code (0 = float32, 1 = float64)
    u8       rank
    6 bytes  zero padding
    rank*u64 dims
    payload  row-major values
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BDKT0001"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFileError(ValueError):
    pass


def header_size(rank: int) -> int:
    return 16 + 8 * rank


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise TensorFileError("rank too large")
    head = MAGIC + struct.pack("<BB6x", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise TensorFileError("malformed tensor file: bad magic")
    code, rank = struct.unpack_from("<BB", buf, 8)
    if code not in _DTYPES:
        raise TensorFileError(f"malformed tensor file: unknown dtype code {code}")
    if len(buf) < header_size(rank):
        raise TensorFileError("malformed tensor file: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 16)
    dtype = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = header_size(rank) + n * dtype.itemsize
    if len(buf) != expected:
        raise TensorFileError(
            f"malformed tensor file: expected {expected} bytes, found {len(buf)}")
    out = np.frombuffer(buf, dtype=dtype, count=n, offset=header_size(rank))
    return out.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, array) -> None:
    path = Path(path)
    data = encode_tensor(array)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
