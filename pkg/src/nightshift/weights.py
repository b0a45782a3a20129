"""Flat binary weight container shared by networks, extractor, and checkpoints.

Layout: magic b"DICOW1", u32 tensor count, then per tensor a u32 name length,
the UTF-8 name, four u32 extents, and the raw float32 data. All integers and
floats are little-endian; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DICOW1"


class WeightFormatError(IOError):
    """Bad magic, truncation, or malformed record."""


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim != 4:
            raise WeightFormatError(f"{name}: tensors must be rank-4, got shape {arr.shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<4I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    view = memoryview(blob)
    offset = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise WeightFormatError(f"{path}: truncated at byte {offset}")
        piece = view[offset : offset + n]
        offset += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        shape = struct.unpack("<4I", take(16))
        size = int(np.prod(shape))
        data = np.frombuffer(take(size * 4), dtype="<f4").reshape(shape)
        out[name] = data.copy()
    if offset != len(view):
        raise WeightFormatError(f"{path}: {len(view) - offset} trailing bytes")
    return out
