"""
Data Pipeline Module - CIFAR-10 binary ingestion, augmentation and batching

Binary records are 3073 bytes: one label byte followed by 1024 red, 1024
green and 1024 blue bytes (row-major). Images are held as N x 32 x 32 x 3
uint8 arrays.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from errors import CorruptDatasetError, CorruptRecordError, InvalidArgumentError
from services.keyed_permutation import BlockGrid, PermutationVector, SecretKey, derive_permutation, shuffle_array

logger = logging.getLogger(__name__)

IMAGE_SIDE = 32
CHANNELS = 3
NUM_CLASSES = 10
RECORD_BYTES = 1 + IMAGE_SIDE * IMAGE_SIDE * CHANNELS
RECORDS_PER_FILE = 10000
TRAIN_FILES = [f'data_batch_{i}.bin' for i in range(1, 6)]
TEST_FILE = 'test_batch.bin'
CROP_PADDING = 4
TRANSFORM_STAGES = ('pre', 'post')


@dataclass
class DatasetSplit:
    """Images (N x 32 x 32 x 3, uint8) with integer labels in [0, 9]."""

    images: np.ndarray
    labels: np.ndarray
    split: str = 'train'

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise InvalidArgumentError(
                f"Images {self.images.shape} and labels {self.labels.shape} do not line up.")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise InvalidArgumentError("Labels must lie in [0, 9].")
        if self.split not in ('train', 'test'):
            raise InvalidArgumentError(f"Unknown split '{self.split}'.")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, count: int) -> 'DatasetSplit':
        """First ``count`` samples; 0 or a count beyond the split keeps everything."""
        if count <= 0 or count >= len(self):
            return self
        return DatasetSplit(self.images[:count], self.labels[:count], self.split)


def read_batch_file(path: Union[str, Path], expected_records: Optional[int] = RECORDS_PER_FILE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decode one CIFAR-10 binary batch file.

    Args:
        path: batch file
        expected_records: required record count; None accepts any whole number of records

    Returns:
        tuple: (images N x 32 x 32 x 3 uint8, labels N int64)
    """
    path = Path(path)
    if not path.is_file():
        raise CorruptDatasetError(f"Dataset file '{path}' is missing.", str(path))
    raw = np.fromfile(path, dtype=np.uint8)
    if expected_records is not None and raw.size != expected_records * RECORD_BYTES:
        raise CorruptDatasetError(
            f"Dataset file '{path.name}' has {raw.size} bytes, expected {expected_records * RECORD_BYTES}.",
            str(path))
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise CorruptDatasetError(
            f"Dataset file '{path.name}' has {raw.size} bytes, not a whole number of records.", str(path))

    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        index = int(bad[0])
        raise CorruptRecordError(
            f"Record {index} of '{path.name}' has label {labels[index]}.", str(path), index)
    images = records[:, 1:].reshape(-1, CHANNELS, IMAGE_SIDE, IMAGE_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_batch_file(path: Union[str, Path], images: np.ndarray, labels: Sequence[int]):
    """Encode images (N x 32 x 32 x 3) and labels back into the binary record layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    planar = images.transpose(0, 3, 1, 2).reshape(images.shape[0], -1)
    np.concatenate([labels, planar], axis=1).tofile(str(path))


def resolve_data_dir(data_dir: Optional[Union[str, Path]] = None) -> Path:
    """The dataset directory from an argument or SHUFFLEGUARD_DATA_DIR."""
    value = data_dir or os.environ.get('SHUFFLEGUARD_DATA_DIR')
    if not value:
        raise CorruptDatasetError("No dataset directory given (use --data-dir or SHUFFLEGUARD_DATA_DIR).")
    path = Path(value)
    nested = path / 'cifar-10-batches-bin'
    if not (path / TEST_FILE).exists() and nested.is_dir():
        return nested
    return path


def load_cifar10(dir_path: Optional[Union[str, Path]] = None) -> Tuple[DatasetSplit, DatasetSplit]:
    """
    Load the five training batches and the test batch.

    Returns:
        tuple: (train split, test split)
    """
    train, test = load_split(dir_path, 'train'), load_split(dir_path, 'test')
    logger.info("Loaded CIFAR-10: %d train, %d test", len(train), len(test))
    return train, test


def load_split(dir_path: Optional[Union[str, Path]] = None, split: str = 'test') -> DatasetSplit:
    """Load only the training batches or only the test batch."""
    directory = resolve_data_dir(dir_path)
    if not directory.is_dir():
        raise CorruptDatasetError(f"Dataset directory '{directory}' does not exist.", str(directory))
    if split not in ('train', 'test'):
        raise InvalidArgumentError(f"Unknown split '{split}'.")
    names = TRAIN_FILES if split == 'train' else [TEST_FILE]
    parts = [read_batch_file(directory / name, RECORDS_PER_FILE) for name in names]
    return DatasetSplit(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), split)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator so serial and parallel batching agree."""
    return np.random.default_rng([seed, epoch, index])


def augment(img: np.ndarray, rng: np.random.Generator, offset: Optional[Tuple[int, int]] = None,
            flip: Optional[bool] = None) -> np.ndarray:
    """
    Random crop from a zero-padded image followed by a random horizontal flip.

    Args:
        img: H x W x C image
        rng: randomness source
        offset: forced (row, col) crop offset into the padded image
        flip: forced flip decision

    Returns:
        np.ndarray: augmented image with the input's shape and dtype
    """
    img = np.asarray(img)
    height, width = img.shape[:2]
    padded = np.pad(img, ((CROP_PADDING, CROP_PADDING), (CROP_PADDING, CROP_PADDING), (0, 0)))
    if offset is None:
        offset = (int(rng.integers(0, 2 * CROP_PADDING + 1)), int(rng.integers(0, 2 * CROP_PADDING + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    row, col = offset
    out = padded[row:row + height, col:col + width]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def prepare_batch(split: DatasetSplit, indices: Sequence[int], key: Optional[SecretKey], grid: Optional[BlockGrid],
                  augment_flag: bool = False, seed: int = 0, epoch: int = 0, transform_stage: str = 'post',
                  permutation: Optional[PermutationVector] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Assemble a training or evaluation batch.

    Order for the default 'post' stage: augment -> scale to [0, 1] -> shuffle.
    The 'pre' stage shuffles the byte images before augmenting them.
    A None key skips the transform (undefended model).

    Returns:
        tuple: (float32 batch N x 32 x 32 x 3 in [0, 1], labels)
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= len(split)):
        raise InvalidArgumentError(f"Batch index out of range for a split of {len(split)} samples.")
    if transform_stage not in TRANSFORM_STAGES:
        raise InvalidArgumentError(f"transform_stage must be one of {TRANSFORM_STAGES}, got '{transform_stage}'.")

    shuffle = key is not None or permutation is not None
    if shuffle:
        if grid is None:
            raise InvalidArgumentError("A block grid is required when shuffling.")
        permutation = permutation or derive_permutation(key, grid.n)

    images = split.images[indices]
    if shuffle and transform_stage == 'pre':
        images = shuffle_array(images, permutation, grid)
    if augment_flag and len(indices):
        images = np.stack([augment(img, augment_rng(seed, epoch, int(i))) for img, i in zip(images, indices)])
    batch = images.astype(np.float32) / 255.0
    if shuffle and transform_stage == 'post':
        batch = shuffle_array(batch, permutation, grid)
    return batch, split.labels[indices]


def batch_indices(count: int, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index arrays covering a split once, in a per-epoch seeded order."""
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be positive.")
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(count) if shuffle else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]
