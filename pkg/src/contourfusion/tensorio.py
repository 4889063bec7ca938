"""Reading and writing the CFT1 tensor format.

Layout: the 4 magic bytes ``CFT1``, a little-endian uint32 rank, ``rank``
little-endian uint32 dimension sizes, then the float32 payload in row-major
order. Every grid, mask and weight blob in this package goes through here.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFT1"


class FormatError(ValueError):
    """Raised when a file does not hold a valid CFT1 tensor or bundle."""


def to_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not a CFT1 tensor")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise FormatError("truncated CFT1 header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise FormatError(
            f"CFT1 payload size mismatch: expected {4 * count} bytes, got {len(blob) - offset}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).astype(np.float32)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor {path}: {exc}") from exc
    try:
        return from_bytes(blob)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
