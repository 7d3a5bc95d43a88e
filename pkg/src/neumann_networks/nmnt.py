"""NMNT binary tensor files.

Layout (all integers little-endian)::

    b"NMNT"  u32 version (=1)  u8 dtype (0 = float64)  u32 ndims
    ndims x u64 dims
    payload: float64 little-endian, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"NMNT"
VERSION = 1
DTYPE_FLOAT64 = 0
_HEADER = struct.Struct("<4sIBI")


class NMNTError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f8", order="C")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def loads(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise NMNTError("truncated header")
    magic, version, dtype, ndims = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise NMNTError(f"bad magic {magic!r}")
    if version != VERSION:
        raise NMNTError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT64:
        raise NMNTError(f"unsupported dtype code {dtype}")
    offset = _HEADER.size
    if len(data) < offset + 8 * ndims:
        raise NMNTError("truncated dimensions")
    dims = struct.unpack_from(f"<{ndims}Q", data, offset)
    offset += 8 * ndims
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    if len(data) != offset + 8 * count:
        raise NMNTError(f"payload holds {(len(data) - offset) // 8} values, expected {count}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(dims).astype(
        np.float64)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
