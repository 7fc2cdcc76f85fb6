"""
Attack Engine Module - untargeted l-infinity white-box attacks

FGSM, PGD with optional uniform random start, and the adaptive BPDA attack
that shuffles with a guessed key, runs PGD in the shuffled domain and
de-shuffles the result.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from errors import InvalidArgumentError, InvalidStateError
from services.keyed_permutation import BlockGrid, KeyedShuffle, SecretKey
from services.nn_model import ResNet, frozen_parameters, labels_from_logits, logits
from services.tensor_autodiff import Tensor, backward, softmax_cross_entropy

logger = logging.getLogger(__name__)

DEFAULT_STEP_SIZE = 2 / 255
SWEEP_EPSILONS = tuple(k / 255 for k in (2, 4, 8, 16, 32))
BPDA_BACKWARDS = ('identity', 'exact-guessed')


def parse_epsilon(value: Union[str, float, int]) -> float:
    """Parse '8/255', '0.03' or a number into a float budget."""
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as error:
        raise InvalidArgumentError(f"Cannot parse epsilon '{value}'.") from error


def format_epsilon(epsilon: float) -> str:
    """Render a budget as k/255 when it is one, else as a decimal."""
    scaled = epsilon * 255
    if abs(scaled - round(scaled)) < 1e-9:
        return f'{int(round(scaled))}/255'
    return f'{epsilon:.6g}'


@dataclass
class AttackConfig:
    """Budget and schedule of an l-infinity attack."""

    epsilon: float
    step_size: float = DEFAULT_STEP_SIZE
    iterations: int = 20
    random_init: bool = False
    guessed_key: Optional[SecretKey] = None
    grid: Optional[BlockGrid] = None
    bpda_backward: str = 'identity'
    seed: int = 0

    def __post_init__(self):
        self.epsilon = parse_epsilon(self.epsilon)
        self.step_size = parse_epsilon(self.step_size)
        if not 0 <= self.epsilon <= 1:
            raise InvalidArgumentError(f"epsilon must lie in [0, 1], got {self.epsilon}.")
        if self.step_size < 0:
            raise InvalidArgumentError(f"step_size must be non-negative, got {self.step_size}.")
        if self.iterations < 0:
            raise InvalidArgumentError(f"iterations must be non-negative, got {self.iterations}.")
        if self.bpda_backward not in BPDA_BACKWARDS:
            raise InvalidArgumentError(f"bpda_backward must be one of {BPDA_BACKWARDS}.")
        if 0 < self.iterations and self.iterations * self.step_size < self.epsilon:
            logger.warning("Attack cannot reach the budget: %d steps of %.5f < epsilon %.5f",
                           self.iterations, self.step_size, self.epsilon)


@dataclass
class AdversarialResult:
    adv_images: np.ndarray
    success_mask: np.ndarray
    linf_achieved: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(self.success_mask.mean()) if self.success_mask.size else 0.0


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the epsilon ball around x, then into [0, 1]."""
    x_adv = np.asarray(x_adv)
    x = np.asarray(x)
    if x_adv.shape != x.shape:
        raise InvalidArgumentError(f"project: shapes {x_adv.shape} and {x.shape} differ.")
    if epsilon < 0:
        raise InvalidArgumentError(f"epsilon must be non-negative, got {epsilon}.")
    bounded = np.clip(x_adv, x - epsilon, x + epsilon)
    return np.clip(bounded, 0.0, 1.0).astype(x.dtype)


def input_gradient(model: ResNet, x: np.ndarray, y: np.ndarray,
                   transform: Optional[KeyedShuffle] = None) -> np.ndarray:
    """Gradient of the summed per-sample cross-entropy with respect to the input."""
    if model.training:
        raise InvalidStateError("Attacks require an eval-mode model.")
    with frozen_parameters(model):
        x_tensor = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
        model_input = transform.apply_tensor(x_tensor) if transform is not None else x_tensor
        loss = softmax_cross_entropy(model(model_input), y, reduction='sum')
        backward(loss)
    return x_tensor.grad


def random_start(x: np.ndarray, epsilon: float, seed: int, sample_ids: Sequence[int]) -> np.ndarray:
    """Uniform per-pixel noise in [-epsilon, epsilon], seeded per sample."""
    noise = [np.random.default_rng([seed, int(i)]).uniform(-epsilon, epsilon, size=x.shape[1:]) for i in sample_ids]
    return np.stack(noise).astype(x.dtype) if noise else np.zeros_like(x)


def _check_inputs(x: np.ndarray, y: np.ndarray):
    if x.ndim != 4 or x.shape[0] != np.asarray(y).shape[0]:
        raise InvalidArgumentError(f"Attack inputs {x.shape} and labels {np.asarray(y).shape} do not line up.")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise InvalidArgumentError("Attack inputs must lie in [0, 1].")


def _result(model: ResNet, adv: np.ndarray, x: np.ndarray, y: np.ndarray,
            transform: Optional[KeyedShuffle]) -> AdversarialResult:
    view = transform.apply(adv) if transform is not None else adv
    predictions = labels_from_logits(logits(model, view))
    linf = np.abs(adv - x).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)
    return AdversarialResult(adv_images=adv, success_mask=predictions != np.asarray(y), linf_achieved=linf)


def pgd(model: ResNet, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        transform: Optional[KeyedShuffle] = None, sample_ids: Optional[Sequence[int]] = None) -> AdversarialResult:
    """
    Projected gradient ascent on the classification loss.

    Args:
        model: eval-mode classifier
        x: (N, H, W, C) clean images in [0, 1]
        y: true labels
        cfg: budget, step size, iterations and random start
        transform: keyed shuffle placed in front of the model; gradients
            flow back through its inverse permutation
        sample_ids: stable per-sample ids seeding the random start

    Returns:
        AdversarialResult
    """
    x0 = np.asarray(x, dtype=model.dtype)
    _check_inputs(x0, y)
    ids = np.arange(len(x0)) if sample_ids is None else np.asarray(sample_ids)

    if cfg.random_init and cfg.epsilon > 0:
        x_adv = project(x0 + random_start(x0, cfg.epsilon, cfg.seed, ids), x0, cfg.epsilon)
    else:
        x_adv = x0.copy()
    for _ in range(cfg.iterations):
        grad = input_gradient(model, x_adv, y, transform)
        x_adv = project(x_adv + cfg.step_size * np.sign(grad), x0, cfg.epsilon)
    return _result(model, x_adv, x0, y, transform)


def fgsm(model: ResNet, x: np.ndarray, y: np.ndarray, epsilon: float,
         transform: Optional[KeyedShuffle] = None) -> AdversarialResult:
    """Single signed-gradient step of size epsilon."""
    cfg = AttackConfig(epsilon=epsilon, step_size=epsilon, iterations=1, random_init=False)
    return pgd(model, x, y, cfg, transform)


def bpda_attack(model: ResNet, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                sample_ids: Optional[Sequence[int]] = None) -> AdversarialResult:
    """
    Adaptive attack with a guessed key.

    The image is shuffled with the guessed key, attacked with PGD as if the
    model saw it directly (identity backward for the unknown defense stage),
    and de-shuffled with the guessed key. In 'exact-guessed' mode PGD instead
    differentiates through the guessed-key shuffle in front of the model.
    """
    if cfg.guessed_key is None:
        raise InvalidArgumentError("bpda_attack needs a guessed key.")
    if cfg.grid is None:
        raise InvalidArgumentError("bpda_attack needs the block grid of the defense.")
    x0 = np.asarray(x, dtype=model.dtype)
    _check_inputs(x0, y)
    guess = KeyedShuffle.from_key(cfg.guessed_key, cfg.grid)

    if cfg.bpda_backward == 'identity':
        inner = pgd(model, guess.apply(x0), y, cfg, transform=None, sample_ids=sample_ids)
        x_adv = guess.invert(inner.adv_images)
    else:
        x_adv = pgd(model, x0, y, cfg, transform=guess, sample_ids=sample_ids).adv_images
    # permutations keep the l-infinity distance; re-project to make it explicit
    x_adv = project(x_adv, x0, cfg.epsilon)
    return _result(model, x_adv, x0, y, guess)
