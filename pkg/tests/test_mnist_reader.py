import gzip
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.utils.errors import IdxFormatError
from src.utils.mnist_reader import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    TRAIN_FILES,
    VAL_FILES,
    load_idx,
    load_mnist,
    pad_images,
    read_idx,
    write_idx,
)


def write_split(directory, images, labels, names):
    write_idx(directory / names[0], images)
    write_idx(directory / names[1], labels)


def tiny_images(count, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(count, 28, 28), dtype=np.uint8)


def test_read_back_written_images(tmp_path):
    images = tiny_images(3)
    write_idx(tmp_path / "img", images)
    np.testing.assert_array_equal(read_idx(tmp_path / "img", IMAGE_MAGIC), images)


def test_gzip_files_are_read(tmp_path):
    labels = np.array([0, 9, 4], dtype=np.uint8)
    write_idx(tmp_path / "lbl", labels)
    with gzip.open(tmp_path / "lbl.gz", "wb") as f:
        f.write((tmp_path / "lbl").read_bytes())
    np.testing.assert_array_equal(read_idx(tmp_path / "lbl.gz", LABEL_MAGIC), labels)


def test_wrong_magic(tmp_path):
    write_idx(tmp_path / "lbl", np.array([1, 2], dtype=np.uint8))
    with pytest.raises(IdxFormatError) as exc:
        read_idx(tmp_path / "lbl", IMAGE_MAGIC)
    assert exc.value.kind == IdxFormatError.WRONG_MAGIC


def test_truncated_payload(tmp_path):
    write_idx(tmp_path / "img", tiny_images(2))
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(raw[:-10])
    with pytest.raises(IdxFormatError) as exc:
        read_idx(tmp_path / "img", IMAGE_MAGIC)
    assert exc.value.kind == IdxFormatError.TRUNCATED


def test_truncated_header(tmp_path):
    (tmp_path / "img").write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError) as exc:
        read_idx(tmp_path / "img", IMAGE_MAGIC)
    assert exc.value.kind == IdxFormatError.TRUNCATED


def test_count_mismatch(tmp_path):
    write_split(tmp_path, tiny_images(4), np.array([1, 2, 3], dtype=np.uint8), TRAIN_FILES)
    with pytest.raises(IdxFormatError) as exc:
        load_idx(tmp_path / TRAIN_FILES[0], tmp_path / TRAIN_FILES[1])
    assert exc.value.kind == IdxFormatError.COUNT_MISMATCH


def test_padding_centres_digit():
    pixels = np.full((1, 28, 28), 7, dtype=np.uint8)
    padded = pad_images(pixels)
    assert padded.shape == (1, 32, 32)
    assert padded[0, 2:30, 2:30].min() == 7
    assert padded[0, :2].max() == 0 and padded[0, :, 30:].max() == 0


def test_load_mnist_standardizes_with_training_stats(tmp_path):
    write_split(tmp_path, tiny_images(6, seed=1), np.arange(6, dtype=np.uint8), TRAIN_FILES)
    write_split(tmp_path, tiny_images(3, seed=2), np.arange(3, dtype=np.uint8), VAL_FILES)
    train, val = load_mnist(tmp_path, train_limit=5)
    assert train.images.shape == (5, 1, 32, 32)
    assert abs(train.images.mean()) < 1e-10
    assert train.images.std() == pytest.approx(1.0)
    assert (val.mean, val.std) == (train.mean, train.std)
    np.testing.assert_array_equal(val.labels, [0, 1, 2])


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
