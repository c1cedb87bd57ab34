# src/utils/mnist_reader.py
"""
MNIST IDX reader.

Format (big endian):
    u32 magic     0x00000803 images / 0x00000801 labels
    u32 dims...   count[, rows, cols]
    u8[] payload  pixels row-wise / labels 0-9

Images are zero-padded to 32x32, scaled to [0, 1], then standardized with the
global mean/std of the training split.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.utils.errors import IdxFormatError
from src.utils.tensor_ops import DTYPE

logger = logging.getLogger("mlns.mnist")

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PADDED_SIZE = 32

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
VAL_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, limit: Optional[int]) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return Dataset(self.images[:limit], self.labels[:limit], self.split, self.mean, self.std)


# -----------------------------
# Raw IDX
# -----------------------------
def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(IdxFormatError.TRUNCATED, str(path), "missing header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(IdxFormatError.WRONG_MAGIC, str(path), f"0x{magic:08x}, expected 0x{expected_magic:08x}")

    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(IdxFormatError.TRUNCATED, str(path), "short dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(IdxFormatError.TRUNCATED, str(path), f"{len(raw) - header} of {size} payload bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x0801 for 1-D, 0x0803 for 3-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# -----------------------------
# Dataset
# -----------------------------
def pad_images(pixels: np.ndarray, size: int = PADDED_SIZE) -> np.ndarray:
    _, rows, cols = pixels.shape
    top, left = (size - rows) // 2, (size - cols) // 2
    padded = np.zeros((pixels.shape[0], size, size), dtype=pixels.dtype)
    padded[:, top:top + rows, left:left + cols] = pixels
    return padded


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train",
             stats: Optional[Tuple[float, float]] = None, limit: Optional[int] = None) -> Dataset:
    """Parse an image/label pair; stats=None standardizes with this split's own mean/std."""
    pixels = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if pixels.shape[0] != labels.shape[0]:
        raise IdxFormatError(IdxFormatError.COUNT_MISMATCH, f"{images_path} / {labels_path}",
                             f"{pixels.shape[0]} images vs {labels.shape[0]} labels")
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]

    images = pad_images(pixels).astype(DTYPE) / 255.0
    mean, std = stats if stats is not None else (float(images.mean()), float(images.std()))
    images = ((images - mean) / std)[:, None, :, :]
    logger.info("Loaded %d %s images from %s", images.shape[0], split, images_path)
    return Dataset(images, labels.astype(np.int64), split, mean, std)


def _locate(mnist_dir: Path, name: str) -> Path:
    for candidate in (mnist_dir / name, mnist_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found in {mnist_dir}")


def load_mnist(mnist_dir: str | Path, train_limit: Optional[int] = None,
               val_limit: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Training split plus the standard test set as validation, both standardized with training stats."""
    mnist_dir = Path(mnist_dir)
    train = load_idx(_locate(mnist_dir, TRAIN_FILES[0]), _locate(mnist_dir, TRAIN_FILES[1]), "train", limit=train_limit)
    val = load_idx(_locate(mnist_dir, VAL_FILES[0]), _locate(mnist_dir, VAL_FILES[1]), "val",
                   stats=(train.mean, train.std), limit=val_limit)
    return train, val
