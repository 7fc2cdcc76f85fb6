"""
Checkpoint container: named parameters, running statistics, optimizer state
and the metadata needed to check a key/grid against the model.

Stored as an uncompressed .npz archive; float arrays and JSON-encoded floats
round-trip bit-exactly.
"""

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from errors import CheckpointError
from services.keyed_permutation import BlockGrid, SecretKey
from services.nn_model import ArchitectureConfig, ResNet, build_model
from services.tensor_autodiff import OptimizerState

CHECKPOINT_FORMAT = 'shuffleguard-ckpt-v1'


@dataclass
class Checkpoint:
    model: ResNet
    optimizer: OptimizerState
    meta: Dict = field(default_factory=dict)

    @property
    def block_size(self) -> int:
        return int(self.meta.get('block_size', 0))

    @property
    def key_fingerprint(self) -> Optional[str]:
        return self.meta.get('key_fingerprint')

    def check_key(self, key: Optional[SecretKey], block_size: int, allow_key_mismatch: bool = False):
        """Raise CheckpointError when a key/grid disagrees with what the model was trained on."""
        if block_size != self.block_size:
            raise CheckpointError(
                f"Checkpoint was trained with block size {self.block_size}, got {block_size}.")
        trained_with_key = self.key_fingerprint is not None
        if trained_with_key != (key is not None):
            raise CheckpointError("Checkpoint and requested evaluation disagree on whether a key is used.")
        if key is not None and key.fingerprint() != self.key_fingerprint and not allow_key_mismatch:
            raise CheckpointError(
                f"Key fingerprint {key.fingerprint()} does not match checkpoint ({self.key_fingerprint}).")

    def defense_grid(self, key: Optional[SecretKey], allow_key_mismatch: bool = False) -> Optional[BlockGrid]:
        """Check a key against the checkpoint and return the grid it was trained with."""
        self.check_key(key, self.block_size if key is not None else 0, allow_key_mismatch)
        return BlockGrid(M=self.block_size) if key is not None else None


def save_checkpoint(path: Union[str, Path], model: ResNet, optimizer: OptimizerState, meta: Dict):
    arrays = dict(model.state_dict())
    for i, buffer in enumerate(optimizer.momentum_buffers):
        if buffer is not None:
            arrays[f'optim/momentum/{i}'] = buffer
    header = dict(meta)
    header.update({
        'format': CHECKPOINT_FORMAT,
        'variant': model.cfg.variant,
        'stage_widths': model.cfg.stage_widths,
        'blocks_per_stage': model.cfg.blocks_per_stage,
        'num_classes': model.cfg.num_classes,
        'dtype': np.dtype(model.dtype).name,
        'optimizer': {
            'lr': optimizer.lr,
            'initial_lr': optimizer.initial_lr,
            'momentum': optimizer.momentum,
            'weight_decay': optimizer.weight_decay,
            'step_epochs': optimizer.step_epochs,
            'gamma': optimizer.gamma,
            'epoch': optimizer.epoch,
            'buffers': len(optimizer.momentum_buffers),
        },
    })
    arrays['meta'] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as handle:
            np.savez(handle, **arrays)
    except OSError as error:
        raise CheckpointError(f"Could not write checkpoint '{path}': {error}") from error


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as error:
        raise CheckpointError(f"Could not read checkpoint '{path}': {error}") from error

    if 'meta' not in arrays:
        raise CheckpointError(f"'{path}' is not a checkpoint (no metadata).")
    try:
        meta = json.loads(str(arrays.pop('meta')))
    except json.JSONDecodeError as error:
        raise CheckpointError(f"Checkpoint '{path}' has an unreadable header: {error}") from error
    if not isinstance(meta, dict) or meta.get('format') != CHECKPOINT_FORMAT:
        found = meta.get('format') if isinstance(meta, dict) else None
        raise CheckpointError(f"Unsupported checkpoint format {found!r}.")

    try:
        cfg = ArchitectureConfig(variant=meta['variant'], stage_widths=meta['stage_widths'],
                                 blocks_per_stage=meta['blocks_per_stage'], num_classes=meta['num_classes'])
        model = build_model(cfg, seed=0, dtype=np.dtype(meta['dtype']))
        model.load_state_dict(arrays)
        opt = meta['optimizer']
        buffers = [arrays.get(f'optim/momentum/{i}') for i in range(opt['buffers'])]
        optimizer = OptimizerState(lr=opt['lr'], momentum=opt['momentum'], weight_decay=opt['weight_decay'],
                                   step_epochs=opt['step_epochs'], gamma=opt['gamma'], epoch=opt['epoch'],
                                   initial_lr=opt['initial_lr'], momentum_buffers=buffers)
    except KeyError as error:
        raise CheckpointError(f"Checkpoint '{path}' header is missing {error}.") from error
    except (TypeError, ValueError) as error:
        raise CheckpointError(f"Checkpoint '{path}' does not fit its architecture: {error}") from error
    model.eval()
    return Checkpoint(model=model, optimizer=optimizer, meta=meta)
