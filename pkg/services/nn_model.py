"""
NN Model Module - residual classifiers built on the tensor engine

Two variants: desk_small (3 stages, widths 16/32/64, one basic block each)
and resnet18 (4 stages, widths 64/128/256/512, two basic blocks each, 3x3
stem without max-pooling, as used for 32x32 inputs).
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from errors import InvalidArgumentError, InvalidStateError
from services.tensor_autodiff import (
    DEFAULT_DTYPE, Tensor, batch_norm, conv2d, dense, global_avg_pool, relu, add
)

VARIANTS = {
    'desk_small': ([16, 32, 64], [1, 1, 1]),
    'resnet18': ([64, 128, 256, 512], [2, 2, 2, 2]),
}


@dataclass
class ArchitectureConfig:
    """Shape of a residual classifier."""

    variant: str = 'desk_small'
    stage_widths: List[int] = field(default_factory=list)
    blocks_per_stage: List[int] = field(default_factory=list)
    num_classes: int = 10
    input_shape: Tuple[int, int, int] = (32, 32, 3)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(
                f"Unknown variant '{self.variant}'. Expected one of: {', '.join(VARIANTS)}.")
        widths, blocks = VARIANTS[self.variant]
        if not self.stage_widths:
            self.stage_widths = list(widths)
        if not self.blocks_per_stage:
            self.blocks_per_stage = list(blocks)
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise InvalidArgumentError("stage_widths and blocks_per_stage must have the same length.")
        if self.num_classes < 1 or any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.blocks_per_stage):
            raise InvalidArgumentError("Widths, block counts and num_classes must be positive.")
        self.input_shape = tuple(self.input_shape)


class Module:
    """Base class: walks attributes for parameters, buffers and submodules."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, 'Module']]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f'{name}.{i}', item

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f'{prefix}{name}.')

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f'{prefix}{name}.')

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def freeze(self) -> 'Module':
        """Stop tracking parameter gradients (attacks only need input gradients)."""
        for param in self.parameters():
            param.requires_grad = False
            param.grad = None
        return self

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f'param/{name}': param.data.copy() for name, param in self.named_parameters()}
        state.update({f'buffer/{name}': buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f'param/{n}' for n in params} | {f'buffer/{n}' for n in buffers}
        missing = expected - set(state)
        if missing:
            raise InvalidArgumentError(f"State is missing entries: {sorted(missing)[:5]}")
        for name, param in params.items():
            value = state[f'param/{name}']
            if value.shape != param.shape:
                raise InvalidArgumentError(f"Shape mismatch for {name}: {value.shape} vs {param.shape}.")
            param.data = value.astype(param.dtype, copy=True)
        for name, buf in buffers.items():
            value = state[f'buffer/{name}']
            if value.shape != buf.shape:
                raise InvalidArgumentError(f"Shape mismatch for {name}: {value.shape} vs {buf.shape}.")
            buf[...] = value

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _kaiming(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2
        self.weight = _kaiming(rng, (kernel_size, kernel_size, in_channels, out_channels),
                               kernel_size * kernel_size * in_channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _kaiming(rng, (in_features, out_features), in_features, dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, size=out_features).astype(dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity or 1x1 projection shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, rng, dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, rng, dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype)
        self.shortcut = []
        if stride != 1 or in_channels != out_channels:
            self.shortcut = [Conv2d(in_channels, out_channels, 1, stride, rng, dtype), BatchNorm2d(out_channels, dtype)]

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        residual = x
        for layer in self.shortcut:
            residual = layer(residual)
        return relu(add(out, residual))


class ResNet(Module):
    """Residual classifier: stem, stages of basic blocks, global pooling, linear head."""

    def __init__(self, cfg: ArchitectureConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        in_channels = cfg.input_shape[2]
        width = cfg.stage_widths[0]
        self.stem = Conv2d(in_channels, width, 3, 1, rng, dtype)
        self.stem_bn = BatchNorm2d(width, dtype)
        self.blocks = []
        for stage, (out_width, count) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
            for i in range(count):
                stride = 2 if stage > 0 and i == 0 else 1
                self.blocks.append(BasicBlock(width, out_width, stride, rng, dtype))
                width = out_width
        self.head = Dense(width, cfg.num_classes, rng, dtype)

    @property
    def dtype(self):
        return self.stem.weight.dtype

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise InvalidArgumentError(
                f"Model expects (N, {', '.join(map(str, self.cfg.input_shape))}) input, got {x.shape}.")
        out = relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            out = block(out)
        return self.head(global_avg_pool(out))


def build_model(cfg: ArchitectureConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ResNet:
    """
    Build a freshly initialised classifier.

    Args:
        cfg: architecture configuration
        seed: initialisation seed; equal seeds give identical parameters
        dtype: float32 for training and attacks, float64 for gradient checks

    Returns:
        ResNet: model in training mode
    """
    if not isinstance(cfg, ArchitectureConfig):
        raise InvalidArgumentError("build_model expects an ArchitectureConfig.")
    rng = np.random.default_rng(seed)
    return ResNet(cfg, rng, dtype)


def count_parameters(cfg: ArchitectureConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    total = 9 * cfg.input_shape[2] * cfg.stage_widths[0] + 2 * cfg.stage_widths[0]
    width = cfg.stage_widths[0]
    for stage, (out_width, count) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
        for i in range(count):
            stride = 2 if stage > 0 and i == 0 else 1
            total += 9 * width * out_width + 9 * out_width * out_width + 4 * out_width
            if stride != 1 or width != out_width:
                total += width * out_width + 2 * out_width
            width = out_width
    return total + width * cfg.num_classes + cfg.num_classes


def model_parameter_count(model: Module) -> int:
    return sum(param.data.size for param in model.parameters())


@contextmanager
def frozen_parameters(model: Module):
    """Temporarily stop tracking parameter gradients; a no-op on frozen models."""
    tracked = [param for param in model.parameters() if param.requires_grad]
    for param in tracked:
        param.requires_grad = False
    try:
        yield model
    finally:
        for param in tracked:
            param.requires_grad = True


def logits(model: ResNet, batch: np.ndarray) -> np.ndarray:
    """Forward a numpy batch without tracking gradients."""
    with frozen_parameters(model):
        return model(Tensor(np.asarray(batch, dtype=model.dtype))).data


def predict(model: ResNet, batch: np.ndarray) -> np.ndarray:
    """
    Predicted class per row (argmax of logits, ties to the lowest index).

    Args:
        model: classifier in eval mode
        batch: (N, H, W, C) images in [0, 1]

    Returns:
        np.ndarray: N integer labels
    """
    if model.training:
        raise InvalidStateError("predict requires an eval-mode model; call model.eval() first.")
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.cfg.input_shape:
        raise InvalidArgumentError(f"predict expects (N, {model.cfg.input_shape}) input, got {batch.shape}.")
    return labels_from_logits(logits(model, batch))


def labels_from_logits(values: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(values), axis=1)
