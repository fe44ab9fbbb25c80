"""Flat little-endian binary tensor format ("GFT1").

Layout: 4-byte magic ``GFT1``, uint8 dtype code (1 = float32, 2 = float64),
uint8 rank, then ``rank`` uint64 extents, then row-major elements.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"GFT1"
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype} for GFT1")
    f.write(MAGIC)
    f.write(struct.pack("<BB", _CODES[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", f.read(2))
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    dt = _DTYPES[code]
    n = int(np.prod(shape)) if shape else 1
    buf = f.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))
