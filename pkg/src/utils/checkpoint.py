# src/utils/checkpoint.py
"""
Single-file tensor checkpoint.

Layout (little endian):
    b"MLNS"
    u32 version
    u32 tensor count
    per tensor:
        u32 name length, UTF-8 name
        u32 rank, u32 dims[rank]
        f64 data[prod(dims)]   (C order)
"""

import logging
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from src.utils.errors import CheckpointError
from src.utils.file_io import atomic_write

logger = logging.getLogger("mlns.checkpoint")

MAGIC = b"MLNS"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:4]!r}")
    offset = 4

    def u32() -> int:
        nonlocal offset
        if offset + 4 > len(raw):
            raise CheckpointError(f"{source}: truncated at byte {offset}")
        (value,) = _U32.unpack_from(raw, offset)
        offset += 4
        return value

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(u32()):
        length = u32()
        if offset + length > len(raw):
            raise CheckpointError(f"{source}: truncated tensor name")
        name = raw[offset:offset + length].decode("utf-8")
        offset += length
        dims = tuple(u32() for _ in range(u32()))
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{source}: truncated data for {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(dims).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - offset} trailing bytes")
    return tensors


def save_checkpoint(path: str | Path, tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    try:
        atomic_write(path, encode_checkpoint(tensors))
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug("Checkpoint written: %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: str | Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e
    return decode_checkpoint(raw, str(path))
