"""GEMT: a minimal little-endian binary tensor container.

Layout: b"GEMT" | u16 version | u8 dtype | u8 rank | rank x u32 dims | row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GEMT"
VERSION = 1
DTYPES = {1: np.dtype("<f4")}
CODES = {v: k for k, v in DTYPES.items()}


class GEMTError(ValueError):
    pass


def dumps(array) -> bytes:
    a = np.asarray(array)
    if not np.issubdtype(a.dtype, np.floating) and not np.issubdtype(a.dtype, np.integer):
        raise GEMTError(f"cannot store dtype {a.dtype}")
    a = np.asarray(a, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if a.ndim > 255:
        raise GEMTError("rank too large")
    header = MAGIC + struct.pack("<HBB", VERSION, CODES[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def loads(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise GEMTError("bad magic")
    version, code, rank = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise GEMTError(f"unsupported version {version}")
    if code not in DTYPES:
        raise GEMTError(f"unknown dtype code {code}")
    off = 8 + 4 * rank
    if len(data) < off:
        raise GEMTError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    dt = DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) != off + n * dt.itemsize:
        raise GEMTError(f"payload is {len(data) - off} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(data, dtype=dt, offset=off).reshape(dims).copy()


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
