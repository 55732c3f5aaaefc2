"""Bit-exact tensor container I/O.

Wire format: magic ``RTN1``, one dtype-code byte (0 = float32, 1 = float64),
one rank byte, ``rank`` little-endian uint32 dims, then the little-endian
payload. Round trips are bit-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"RTN1"
MAX_RANK = 4

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Serialize ``t`` (rank <= 4, float32 or float64) to ``path``."""
    arr = np.asarray(t)
    if arr.ndim > MAX_RANK:
        raise TensorFormatError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}", 5)
    dtype = np.dtype(arr.dtype)
    if dtype not in _KIND_TO_CODE:
        raise TensorFormatError(f"unsupported dtype {dtype}", 4)
    code = _KIND_TO_CODE[dtype]
    le = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code])
    header = MAGIC + bytes([code, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + le.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor container; inverse of :func:`write_tensor`, bit-exact."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise TensorFormatError("bad magic, expected RTN1", 0)
    if len(data) < 5:
        raise TensorFormatError("missing dtype code", 4)
    code = data[4]
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype code {code}", 4)
    if len(data) < 6:
        raise TensorFormatError("missing rank byte", 5)
    rank = data[5]
    if rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} exceeds maximum {MAX_RANK}", 5)
    end_dims = 6 + 4 * rank
    if len(data) < end_dims:
        raise TensorFormatError("truncated dims", len(data))
    dims = struct.unpack(f"<{rank}I", data[6:end_dims])
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = end_dims + count * dtype.itemsize
    if len(data) != expected:
        raise TensorFormatError(
            f"payload length {len(data) - end_dims} != expected {count * dtype.itemsize}",
            end_dims,
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=end_dims)
    return arr.reshape(dims).copy()
