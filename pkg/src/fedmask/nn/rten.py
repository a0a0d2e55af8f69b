"""Raw tensor file format: magic "RTEN", u32 rank, u32 dims, little-endian f64 payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTEN"


def rten_bytes(array: np.ndarray) -> bytes:
    """Serialize an array as an RTEN blob (values cast to float64)."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def rten_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not an RTEN blob (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise ValueError(f"RTEN payload length {len(blob)} != expected {expected}")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return values.reshape(dims).astype(np.float64)


def write_rten(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(rten_bytes(array))


def read_rten(path: str | Path) -> np.ndarray:
    return rten_from_bytes(Path(path).read_bytes())
