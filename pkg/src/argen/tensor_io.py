"""Minimal binary tensor container (ARGT).

Layout, all little-endian::

    b"ARGT" | u32 version (=1) | u32 ndim | ndim x u64 dims | f32 payload (row-major)
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"ARGT"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_MAX_NDIM = 32


class TensorFormatError(ValueError):
    """Raised when bytes do not form a valid ARGT container."""


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("ARGT payload must be finite")
    dims = arr.shape
    head = _HEADER.pack(MAGIC, VERSION, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if ndim > _MAX_NDIM:
        raise TensorFormatError(f"ndim {ndim} exceeds {_MAX_NDIM}")
    offset = _HEADER.size
    if len(data) < offset + 8 * ndim:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    count = 1
    for d in dims:
        count *= d
        if count * 4 > len(data):
            raise TensorFormatError("dims overflow payload")
    payload = data[offset:]
    if len(payload) != 4 * count:
        raise TensorFormatError(f"payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path: str | os.PathLike, array) -> None:
    atomic_write_bytes(path, dumps(array))


def read(path: str | os.PathLike) -> np.ndarray:
    return loads(Path(path).read_bytes())
