"""Binary tensor records.

Layout (little-endian)::

    magic    4 bytes   b"IVT1" (float32 payload) or b"IVD1" (float64 payload)
    rank     u32
    extents  rank x u32
    payload  prod(extents) raw values, row-major

A rank-2 record therefore has a 16-byte header. ``IVD1`` exists so float64
models can be checkpointed bit-exactly; datasets always use ``IVT1``.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC_F32 = b"IVT1"
MAGIC_F64 = b"IVD1"
_DTYPE_BY_MAGIC = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, array, dtype=np.float32) -> None:
    dt = np.dtype(dtype)
    if dt == np.float32:
        magic = MAGIC_F32
    elif dt == np.float64:
        magic = MAGIC_F64
    else:
        raise TensorFormatError(f"unsupported record dtype {dt}")
    arr = np.asarray(array, dtype=dt.newbyteorder("<"), order="C")
    f.write(magic)
    f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    f.write(arr.tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor record while reading {what}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic not in _DTYPE_BY_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    dt = _DTYPE_BY_MAGIC[magic]
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    if rank > 16:
        raise TensorFormatError(f"implausible rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
    count = math.prod(shape)
    payload = _read_exact(f, count * dt.itemsize, "payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, array, dtype=np.float32) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array, dtype)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after tensor record")
    return arr


def read_header(path) -> tuple[np.dtype, tuple[int, ...]]:
    """Dtype and shape of a record without reading its payload."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic not in _DTYPE_BY_MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
        if rank > 16:
            raise TensorFormatError(f"{path}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
    return _DTYPE_BY_MAGIC[magic], tuple(shape)
