"""
Shared pytest fixtures: a throwaway run registry, fixed keys, tiny models
and small synthetic CIFAR-10 batch files.
"""

import os
from unittest.mock import patch

import numpy as np
import pytest

from database import init_database
from services.checkpoint import save_checkpoint
from services.data_pipeline import TEST_FILE, TRAIN_FILES, DatasetSplit, write_batch_file
from services.keyed_permutation import SecretKey
from services.nn_model import ArchitectureConfig, build_model
from services.tensor_autodiff import OptimizerState

SYNTHETIC_RECORDS = 20


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale runs on the real CIFAR-10 binaries')


def pytest_collection_modifyitems(config, items):
    if os.environ.get('SHUFFLEGUARD_DATA_DIR'):
        return
    skip = pytest.mark.skip(reason='SHUFFLEGUARD_DATA_DIR is not set')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def synthetic_split(count: int, split: str = 'test', seed: int = 0) -> DatasetSplit:
    """Random images with labels cycling through 0..9."""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(count, 32, 32, 3), dtype=np.uint8)
    return DatasetSplit(images, np.arange(count) % 10, split)


def tiny_config() -> ArchitectureConfig:
    return ArchitectureConfig(variant='desk_small', stage_widths=[4, 8], blocks_per_stage=[1, 1])


@pytest.fixture
def registry_db(tmp_path):
    """Point the run registry at a fresh database file."""
    with patch('database.DATABASE', str(tmp_path / 'registry.db')):
        init_database()
        yield tmp_path / 'registry.db'


@pytest.fixture
def secret_key():
    return SecretKey(bytes(range(32)), label='fixture')


@pytest.fixture
def other_key():
    return SecretKey(bytes(range(100, 132)), label='other')


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0).eval()


@pytest.fixture
def make_checkpoint(tmp_path):
    """Factory writing a tiny untrained checkpoint for a key/block size."""

    def _make(key=None, block_size=4, name='model.npz'):
        model = build_model(tiny_config(), seed=0)
        meta = {
            'block_size': block_size if key is not None else 0,
            'key_fingerprint': key.fingerprint() if key is not None else None,
            'seed': 0,
            'manifest_hash': 'f' * 64,
        }
        path = tmp_path / name
        save_checkpoint(path, model, OptimizerState(), meta)
        return path

    return _make


@pytest.fixture
def synthetic_cifar_dir(tmp_path):
    """Five training batches and a test batch of SYNTHETIC_RECORDS records each."""
    data_dir = tmp_path / 'cifar-10-batches-bin'
    data_dir.mkdir()
    for i, name in enumerate(TRAIN_FILES + [TEST_FILE]):
        split = synthetic_split(SYNTHETIC_RECORDS, seed=i)
        write_batch_file(data_dir / name, split.images, split.labels)
    with patch('services.data_pipeline.RECORDS_PER_FILE', SYNTHETIC_RECORDS):
        yield data_dir
