"""Reader/writer for the MPCT binary tensor container.

Layout (all little-endian)::

    b"MPCT" | u8 version=1 | u8 dtype | u8 rank | u8 reserved
    rank x u32 extents
    row-major payload: float64 (dtype 0) or uint64 raw ring elements (dtype 1)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MPCT"
VERSION = 1
DTYPE_REAL = 0
DTYPE_RING = 1

_PAYLOAD = {DTYPE_REAL: np.dtype("<f8"), DTYPE_RING: np.dtype("<u8")}
_HEADER = struct.Struct("<4sBBBB")


class MPCTError(ValueError):
    """Malformed MPCT data.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.uint64:
        code = DTYPE_RING
    elif arr.dtype.kind == "f":
        code = DTYPE_REAL
    else:
        raise TypeError(f"MPCT stores float64 or uint64 tensors, got {arr.dtype}")
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError("MPCT tensors must have rank between 1 and 255")
    header = _HEADER.pack(MAGIC, VERSION, code, arr.ndim, 0)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_PAYLOAD[code]).tobytes()
    return header + extents + payload


def decode(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise MPCTError(f"truncated header: need {_HEADER.size} bytes, have {len(data)}", len(data))
    magic, version, code, rank, _reserved = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MPCTError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise MPCTError(f"unsupported version {version}", 4)
    if code not in _PAYLOAD:
        raise MPCTError(f"unknown dtype code {code}", 5)
    if rank == 0:
        raise MPCTError("rank-0 tensors are not allowed", 6)
    pos = _HEADER.size
    need = pos + 4 * rank
    if len(data) < need:
        raise MPCTError(f"truncated extents: missing {need - len(data)} bytes", len(data))
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos = need
    count = int(np.prod(dims, dtype=np.int64))
    itemsize = _PAYLOAD[code].itemsize
    need = pos + count * itemsize
    if len(data) < need:
        raise MPCTError(f"truncated payload: missing {need - len(data)} bytes", len(data))
    if len(data) > need:
        raise MPCTError(f"{len(data) - need} trailing bytes after payload", need)
    arr = np.frombuffer(data, dtype=_PAYLOAD[code], count=count, offset=pos)
    native = np.float64 if code == DTYPE_REAL else np.uint64
    return arr.astype(native).reshape(dims)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path, expect_shape=None) -> np.ndarray:
    """Load a tensor; ``expect_shape`` may contain ``None`` wildcards."""
    arr = decode(Path(path).read_bytes())
    if expect_shape is not None:
        ok = len(expect_shape) == arr.ndim and all(
            e is None or e == s for e, s in zip(expect_shape, arr.shape)
        )
        if not ok:
            raise MPCTError(f"shape {arr.shape} does not match expected {tuple(expect_shape)}", 8)
    return arr
