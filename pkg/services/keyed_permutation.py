"""
Keyed Permutation Module - block-wise pixel shuffling with a secret key

A 32-byte secret key drives a counter-mode SHA-256 stream ("sha256-ctr-v1"),
which drives a Fisher-Yates shuffle of the n = M*M*C positions of a block.
The same permutation is applied to every block of every image.

Within a block, pixels are flattened row-major with channels fastest:
i = (r * M + c) * C + ch.
"""

import hashlib
import math
import secrets
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from errors import InvalidArgumentError
from services.tensor_autodiff import Tensor, gather_elements, permute_elements

SEED_BYTES = 32
KEY_FILE_HEADER = 'shuffleguard-key-v1'
PRNG_NAME = 'sha256-ctr-v1'
SEED_SPACE_BITS = SEED_BYTES * 8

_U64 = 1 << 64


@dataclass(frozen=True)
class SecretKey:
    """Seed material for deriving permutations. Equality ignores the label."""

    seed_bytes: bytes
    label: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if not isinstance(self.seed_bytes, (bytes, bytearray)) or len(self.seed_bytes) != SEED_BYTES:
            raise InvalidArgumentError(f"A secret key needs exactly {SEED_BYTES} seed bytes.")
        object.__setattr__(self, 'seed_bytes', bytes(self.seed_bytes))

    @classmethod
    def generate(cls, label: Optional[str] = None) -> 'SecretKey':
        return cls(secrets.token_bytes(SEED_BYTES), label)

    @classmethod
    def from_hex(cls, hex_seed: str, label: Optional[str] = None) -> 'SecretKey':
        hex_seed = hex_seed.strip().lower()
        if len(hex_seed) != SEED_BYTES * 2:
            raise InvalidArgumentError(f"Key seed must be {SEED_BYTES * 2} hex characters.")
        try:
            return cls(bytes.fromhex(hex_seed), label)
        except ValueError as error:
            raise InvalidArgumentError("Key seed is not valid hexadecimal.") from error

    @classmethod
    def guess(cls, seed: int, attempt: int = 0) -> 'SecretKey':
        """A reproducible 'random' key for adversaries who guess."""
        material = hashlib.sha256(f'shuffleguard-guess:{seed}:{attempt}'.encode()).digest()
        return cls(material, label=f'guess-{seed}-{attempt}')

    @property
    def hex(self) -> str:
        return self.seed_bytes.hex()

    def fingerprint(self) -> str:
        """Short identifier safe to store next to a model."""
        return hashlib.sha256(b'shuffleguard-fingerprint' + self.seed_bytes).hexdigest()[:16]

    def dumps(self) -> str:
        lines = [KEY_FILE_HEADER, self.hex]
        if self.label:
            lines.append(f'label: {self.label}')
        return '\n'.join(lines) + '\n'

    @classmethod
    def loads(cls, text: str) -> 'SecretKey':
        lines = [line.strip() for line in text.splitlines() if line.strip()]
        if len(lines) < 2 or lines[0] != KEY_FILE_HEADER:
            raise InvalidArgumentError(f"Key file must start with '{KEY_FILE_HEADER}'.")
        label = None
        if len(lines) > 2 and lines[2].startswith('label:'):
            label = lines[2][len('label:'):].strip() or None
        return cls.from_hex(lines[1], label)

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.dumps(), encoding='ascii')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'SecretKey':
        try:
            text = Path(path).read_text(encoding='ascii')
        except (OSError, UnicodeDecodeError) as error:
            raise InvalidArgumentError(f"Cannot read key file '{path}': {error}") from error
        return cls.loads(text)

    def __repr__(self):
        return f"SecretKey(fingerprint={self.fingerprint()}, label={self.label!r})"


class KeyedStream:
    """Counter-mode SHA-256 generator: block k = SHA256(tag || seed || context || k)."""

    def __init__(self, seed_bytes: bytes, context: bytes = b''):
        self._prefix = PRNG_NAME.encode() + seed_bytes + context
        self._counter = 0
        self._words = []

    def next_u64(self) -> int:
        if not self._words:
            digest = hashlib.sha256(self._prefix + self._counter.to_bytes(8, 'big')).digest()
            self._counter += 1
            self._words = [int.from_bytes(digest[i:i + 8], 'big') for i in (24, 16, 8, 0)]
        return self._words.pop()

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        if bound < 1:
            raise InvalidArgumentError("bound must be positive.")
        limit = _U64 - (_U64 % bound)
        while True:
            value = self.next_u64()
            if value < limit:
                return value % bound


@dataclass(frozen=True)
class PermutationVector:
    """A bijection on {0..n-1}; out[i] = in[mapping[i]]."""

    mapping: Tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(i) for i in self.mapping)
        if not mapping:
            raise InvalidArgumentError("A permutation needs at least one element.")
        if sorted(mapping) != list(range(len(mapping))):
            raise InvalidArgumentError("mapping is not a bijection on {0..n-1}.")
        object.__setattr__(self, 'mapping', mapping)

    @property
    def n(self) -> int:
        return len(self.mapping)

    @cached_property
    def array(self) -> np.ndarray:
        array = np.asarray(self.mapping, dtype=np.int64)
        array.setflags(write=False)
        return array

    def inverse(self) -> 'PermutationVector':
        return PermutationVector(tuple(np.argsort(self.array).tolist()))

    def is_identity(self) -> bool:
        return self.mapping == tuple(range(self.n))

    @classmethod
    def identity(cls, n: int) -> 'PermutationVector':
        return cls(tuple(range(n)))


@dataclass(frozen=True)
class BlockGrid:
    """Block side M over an image of width X, height Y and C channels."""

    M: int
    X: int = 32
    Y: int = 32
    C: int = 3

    def __post_init__(self):
        for name in ('M', 'X', 'Y', 'C'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidArgumentError(f"BlockGrid.{name} must be a positive integer, got {value!r}.")

    @property
    def n(self) -> int:
        return self.M * self.M * self.C

    @property
    def padded_width(self) -> int:
        return -(-self.X // self.M) * self.M

    @property
    def padded_height(self) -> int:
        return -(-self.Y // self.M) * self.M

    @property
    def needs_padding(self) -> bool:
        return self.padded_width != self.X or self.padded_height != self.Y

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.Y, self.X, self.C)

    @classmethod
    def for_shape(cls, shape: Tuple[int, ...], M: int) -> 'BlockGrid':
        """Grid for an (..., H, W, C) shape."""
        if len(shape) < 3:
            raise InvalidArgumentError(f"Expected an (..., H, W, C) shape, got {shape}.")
        height, width, channels = shape[-3:]
        return cls(M=M, X=width, Y=height, C=channels)


@dataclass
class ImageTensor:
    """An H x W x C image tagged with its value domain ('byte' or 'unit')."""

    data: np.ndarray
    domain: str = 'byte'

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidArgumentError(f"ImageTensor expects H x W x C data, got shape {self.data.shape}.")
        if self.domain == 'byte':
            if self.data.dtype != np.uint8:
                if np.any(self.data < 0) or np.any(self.data > 255) or np.any(self.data != np.round(self.data)):
                    raise InvalidArgumentError("byte-domain image holds values outside 0..255.")
                self.data = self.data.astype(np.uint8)
        elif self.domain == 'unit':
            if not np.issubdtype(self.data.dtype, np.floating):
                self.data = self.data.astype(np.float32)
            if np.any(self.data < 0) or np.any(self.data > 1):
                raise InvalidArgumentError("unit-domain image holds values outside [0, 1].")
        else:
            raise InvalidArgumentError(f"Unknown image domain '{self.domain}'.")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def to_unit(self) -> 'ImageTensor':
        if self.domain == 'unit':
            return self
        return ImageTensor(self.data.astype(np.float32) / 255.0, 'unit')

    def to_byte(self) -> 'ImageTensor':
        if self.domain == 'byte':
            return self
        return ImageTensor(np.clip(np.round(self.data * 255.0), 0, 255).astype(np.uint8), 'byte')


def derive_permutation(key: SecretKey, n: int) -> PermutationVector:
    """
    Derive the block permutation for a key.

    Fisher-Yates from the last position down, each swap index drawn from the
    key's stream with the block size n as context.

    Args:
        key: shared secret key
        n: pixels per block (M * M * C)

    Returns:
        PermutationVector: bijection on {0..n-1}
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"n must be a positive integer, got {n!r}.")
    return PermutationVector(_fisher_yates(key.seed_bytes, int(n)))


@lru_cache(maxsize=256)
def _fisher_yates(seed_bytes: bytes, n: int) -> Tuple[int, ...]:
    stream = KeyedStream(seed_bytes, n.to_bytes(8, 'big'))
    mapping = list(range(n))
    for i in range(n - 1, 0, -1):
        j = stream.below(i + 1)
        mapping[i], mapping[j] = mapping[j], mapping[i]
    return tuple(mapping)


def key_space(n: int) -> int:
    """Number of distinct block permutations: n!."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"n must be a positive integer, got {n!r}.")
    return math.factorial(int(n))


def key_space_report(block_size: int, channels: int = 3) -> dict:
    """Key space of a block next to the seed space that bounds it in practice."""
    if not isinstance(block_size, (int, np.integer)) or block_size < 1:
        raise InvalidArgumentError(f"block size must be a positive integer, got {block_size!r}.")
    n = block_size * block_size * channels
    permutations = key_space(n)
    return {
        'block_size': block_size,
        'n': n,
        'key_space': str(permutations),
        'key_space_digits': len(str(permutations)),
        'key_space_bits': round(math.log2(permutations), 2) if permutations > 1 else 0.0,
        'seed_space_bits': SEED_SPACE_BITS,
        'effective_bits': min(round(math.log2(permutations), 2) if permutations > 1 else 0.0,
                              float(SEED_SPACE_BITS)),
    }


@lru_cache(maxsize=64)
def _block_index_map(permutation: PermutationVector, M: int, height: int, width: int, channels: int) -> np.ndarray:
    positions = np.arange(height * width * channels).reshape(height, width, channels)
    blocks = positions.reshape(height // M, M, width // M, M, channels).transpose(0, 2, 1, 3, 4)
    blocks = blocks.reshape(height // M, width // M, M * M * channels)[..., permutation.array]
    index = blocks.reshape(height // M, width // M, M, M, channels).transpose(0, 2, 1, 3, 4).reshape(-1)
    index.setflags(write=False)
    return index


def block_index_map(permutation: PermutationVector, grid: BlockGrid) -> np.ndarray:
    """
    Flat gather index over a padded image: out.flat[i] = in.flat[index[i]].
    """
    if permutation.n != grid.n:
        raise InvalidArgumentError(f"Permutation of length {permutation.n} does not fit blocks of n={grid.n}.")
    return _block_index_map(permutation, grid.M, grid.padded_height, grid.padded_width, grid.C)


def _check_grid(shape: Tuple[int, ...], grid: BlockGrid):
    if len(shape) < 3 or tuple(shape[-3:]) != grid.image_shape:
        raise InvalidArgumentError(f"Image shape {shape} does not match grid {grid.image_shape} (M={grid.M}).")


def shuffle_array(images: np.ndarray, permutation: PermutationVector, grid: BlockGrid) -> np.ndarray:
    """
    Apply block-wise pixel shuffling to an (..., H, W, C) array.

    Images whose sides are not multiples of M are reflect-padded on the
    right/bottom, shuffled and cropped back to their original shape.
    """
    images = np.asarray(images)
    _check_grid(images.shape, grid)
    index = block_index_map(permutation, grid)
    lead = images.shape[:-3]
    if grid.needs_padding:
        pad = [(0, 0)] * len(lead) + [(0, grid.padded_height - grid.Y), (0, grid.padded_width - grid.X), (0, 0)]
        padded = np.pad(images, pad, mode='reflect')
    else:
        padded = images
    flat = padded.reshape(lead + (-1,))
    out = flat[..., index].reshape(padded.shape)
    return out[..., :grid.Y, :grid.X, :]


def shuffle_image(img: ImageTensor, key: SecretKey, grid: BlockGrid,
                  permutation: Optional[PermutationVector] = None) -> ImageTensor:
    """
    Shuffle the pixels of every block of an image with the key's permutation.

    Args:
        img: image in either domain
        key: shared secret key
        grid: block grid matching the image shape
        permutation: overrides the key-derived permutation (test hook)

    Returns:
        ImageTensor: shuffled image in the same domain
    """
    permutation = permutation or derive_permutation(key, grid.n)
    return ImageTensor(shuffle_array(img.data, permutation, grid), img.domain)


def deshuffle_image(img: ImageTensor, key: SecretKey, grid: BlockGrid,
                    permutation: Optional[PermutationVector] = None) -> ImageTensor:
    """Invert shuffle_image under the same key."""
    permutation = permutation or derive_permutation(key, grid.n)
    return ImageTensor(shuffle_array(img.data, permutation.inverse(), grid), img.domain)


@lru_cache(maxsize=64)
def _padded_source_map(permutation: PermutationVector, M: int, height: int, width: int,
                       channels: int) -> np.ndarray:
    grid = BlockGrid(M=M, X=width, Y=height, C=channels)
    positions = np.arange(height * width * channels).reshape(height, width, channels)
    source = shuffle_array(positions, permutation, grid).reshape(-1)
    source.setflags(write=False)
    return source


def source_index_map(permutation: PermutationVector, grid: BlockGrid) -> np.ndarray:
    """
    Flat gather index over the unpadded image: shuffled.flat[i] = image.flat[index[i]].

    Without padding this is the block permutation itself; with reflect padding
    some source pixels appear twice and others are cropped away.
    """
    if not grid.needs_padding:
        return block_index_map(permutation, grid)
    if permutation.n != grid.n:
        raise InvalidArgumentError(f"Permutation of length {permutation.n} does not fit blocks of n={grid.n}.")
    return _padded_source_map(permutation, grid.M, grid.Y, grid.X, grid.C)


def shuffle_tensor(x: Tensor, permutation: PermutationVector, grid: BlockGrid) -> Tensor:
    """Differentiable shuffle of an (N, H, W, C) tensor; gradients flow back to the source pixels."""
    _check_grid(x.shape, grid)
    if grid.needs_padding:
        return gather_elements(x, source_index_map(permutation, grid), x.shape[1:])
    return permute_elements(x, block_index_map(permutation, grid))


@dataclass(frozen=True)
class KeyedShuffle:
    """A keyed shuffle bound to its grid, usable on arrays and inside the compute graph."""

    permutation: PermutationVector
    grid: BlockGrid

    @classmethod
    def from_key(cls, key: SecretKey, grid: BlockGrid) -> 'KeyedShuffle':
        return cls(derive_permutation(key, grid.n), grid)

    def apply(self, images: np.ndarray) -> np.ndarray:
        return shuffle_array(images, self.permutation, self.grid)

    def invert(self, images: np.ndarray) -> np.ndarray:
        return shuffle_array(images, self.permutation.inverse(), self.grid)

    def apply_tensor(self, x: Tensor) -> Tensor:
        return shuffle_tensor(x, self.permutation, self.grid)
