import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import synthetic_split
from errors import InvalidArgumentError, InvalidStateError
from services.attack_engine import (
    SWEEP_EPSILONS, AttackConfig, bpda_attack, fgsm, format_epsilon, input_gradient, parse_epsilon, pgd, project,
    random_start
)
from services.keyed_permutation import BlockGrid, KeyedShuffle, SecretKey
from services.nn_model import Module, labels_from_logits, logits
from services.tensor_autodiff import Tensor, dense

ULP = np.finfo(np.float32).eps


class LinearTwoClass(Module):
    """Two-class model with logits [0, w.x]; for label 0 the loss gradient points along w."""

    def __init__(self, w):
        super().__init__()
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        self.weight = Tensor(np.stack([np.zeros_like(w), w], axis=1), requires_grad=True)

    @property
    def dtype(self):
        return self.weight.dtype

    def forward(self, x):
        return dense(x.reshape(x.shape[0], -1), self.weight)


def unit_batch(count, seed=0):
    return synthetic_split(count, seed=seed).images.astype(np.float32) / 255.0


class TestProject:

    def test_clamps_into_ball(self):
        out = project(np.array([0.9]), np.array([0.5]), 0.1)
        assert out[0] == pytest.approx(0.6)

    def test_valid_range_clamp_dominates(self):
        out = project(np.array([-0.5]), np.array([0.02]), 0.1)
        assert out[0] == 0.0

    def test_zero_budget_returns_x(self):
        x = unit_batch(2)
        noisy = np.clip(x + 0.3, 0, 1)
        assert np.array_equal(project(noisy, x, 0.0), x)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            project(np.zeros((2, 3)), np.zeros((3, 2)), 0.1)

    def test_negative_budget(self):
        with pytest.raises(InvalidArgumentError):
            project(np.zeros(3), np.zeros(3), -0.1)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), epsilon=st.floats(0.0, 0.5))
    def test_result_in_ball_and_valid_range(self, seed, epsilon):
        rng = np.random.default_rng(seed)
        x = rng.random((4, 8))
        x_adv = x + rng.uniform(-1.0, 1.0, size=x.shape)
        out = project(x_adv, x, epsilon)
        assert np.abs(out - x).max() <= epsilon + 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_points_inside_stay_put(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.2, 0.8, size=(3, 5))
        inside = x + rng.uniform(-0.05, 0.05, size=x.shape)
        assert np.array_equal(project(inside, x, 0.1), inside)


class TestEpsilonParsing:

    def test_fraction_string(self):
        assert parse_epsilon('8/255') == 8 / 255

    def test_decimal_string(self):
        assert parse_epsilon('0.03') == pytest.approx(0.03)

    def test_number_passthrough(self):
        assert parse_epsilon(0.5) == 0.5

    def test_garbage(self):
        with pytest.raises(InvalidArgumentError):
            parse_epsilon('eight')

    def test_format(self):
        assert [format_epsilon(e) for e in SWEEP_EPSILONS] == ['2/255', '4/255', '8/255', '16/255', '32/255']
        assert format_epsilon(0.0) == '0/255'
        assert format_epsilon(0.1) == '0.1'


class TestAttackConfig:

    def test_rejects_budget_above_one(self):
        with pytest.raises(InvalidArgumentError):
            AttackConfig(epsilon=1.5)

    def test_rejects_negative_iterations(self):
        with pytest.raises(InvalidArgumentError):
            AttackConfig(epsilon=0.1, iterations=-1)

    def test_rejects_unknown_backward(self):
        with pytest.raises(InvalidArgumentError):
            AttackConfig(epsilon=0.1, bpda_backward='zero')

    def test_warns_when_budget_unreachable(self, caplog):
        with caplog.at_level(logging.WARNING, logger='services.attack_engine'):
            AttackConfig(epsilon='32/255', step_size='2/255', iterations=5)
        assert 'cannot reach' in caplog.text

    def test_quiet_when_reachable(self, caplog):
        with caplog.at_level(logging.WARNING, logger='services.attack_engine'):
            AttackConfig(epsilon='8/255', step_size='2/255', iterations=20)
        assert caplog.text == ''


class TestLinearClosedForm:
    """One step on a linear loss moves each pixel by step_size in the direction of sign(w)"""

    def setup_method(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(32 * 32 * 3)
        w[::7] = 0.0
        self.w = w
        self.model = LinearTwoClass(w).eval()
        self.x = np.full((1, 32, 32, 3), 0.5)
        self.y = np.array([0])

    def test_pgd_single_step(self):
        cfg = AttackConfig(epsilon=0.1, step_size=0.01, iterations=1)
        adv = pgd(self.model, self.x, self.y, cfg).adv_images
        expected = self.x + 0.01 * np.sign(self.w).reshape(self.x.shape)
        assert np.allclose(adv, expected, atol=1e-12)

    def test_fgsm_single_step(self):
        adv = fgsm(self.model, self.x, self.y, 0.05).adv_images
        expected = self.x + 0.05 * np.sign(self.w).reshape(self.x.shape)
        assert np.allclose(adv, expected, atol=1e-12)

    def test_gradient_free_pixels_never_move(self):
        cfg = AttackConfig(epsilon=0.1, step_size=0.01, iterations=5)
        adv = pgd(self.model, self.x, self.y, cfg).adv_images.reshape(-1)
        assert np.array_equal(adv[::7], self.x.reshape(-1)[::7])

    def test_input_gradient_is_parallel_to_w(self):
        grad = input_gradient(self.model, self.x, self.y).reshape(-1)
        assert np.array_equal(np.sign(grad), np.sign(self.w))


class TestPGD:
    """Projected gradient ascent on a tiny residual network"""

    def setup_method(self):
        self.x = unit_batch(6)
        self.y = np.arange(6) % 10

    def test_zero_budget_returns_clean_images(self, tiny_model):
        result = pgd(tiny_model, self.x, self.y, AttackConfig(epsilon=0.0, iterations=3, random_init=True))
        assert np.array_equal(result.adv_images, self.x)
        clean_wrong = labels_from_logits(logits(tiny_model, self.x)) != self.y
        assert np.array_equal(result.success_mask, clean_wrong)

    def test_zero_iterations_returns_clean_images(self, tiny_model):
        result = pgd(tiny_model, self.x, self.y, AttackConfig(epsilon=0.1, iterations=0))
        assert np.array_equal(result.adv_images, self.x)
        assert not result.linf_achieved.any()

    def test_containment_across_budgets(self, tiny_model):
        """
        Positive test: 500 attacked samples over the five standard budgets.
        Expected: every output within epsilon of its input (plus one ulp) and inside [0, 1].
        """
        for k, epsilon in enumerate(SWEEP_EPSILONS):
            x = unit_batch(100, seed=k)
            y = np.arange(100) % 10
            cfg = AttackConfig(epsilon=epsilon, step_size=epsilon / 2, iterations=3, random_init=True, seed=k)
            result = pgd(tiny_model, x, y, cfg)
            assert (result.linf_achieved <= epsilon + ULP).all()
            assert result.adv_images.min() >= 0.0 and result.adv_images.max() <= 1.0

    def test_deterministic_without_random_start(self, tiny_model):
        cfg = AttackConfig(epsilon=8 / 255, iterations=3)
        a = pgd(tiny_model, self.x, self.y, cfg).adv_images
        b = pgd(tiny_model, self.x, self.y, cfg).adv_images
        assert np.array_equal(a, b)

    def test_seeded_random_start_is_reproducible(self, tiny_model):
        cfg = AttackConfig(epsilon=8 / 255, iterations=2, random_init=True, seed=3)
        a = pgd(tiny_model, self.x, self.y, cfg, sample_ids=[10, 11, 12, 13, 14, 15]).adv_images
        b = pgd(tiny_model, self.x, self.y, cfg, sample_ids=[10, 11, 12, 13, 14, 15]).adv_images
        assert np.array_equal(a, b)

    def test_fgsm_is_one_pgd_step(self, tiny_model):
        epsilon = 4 / 255
        a = fgsm(tiny_model, self.x, self.y, epsilon).adv_images
        b = pgd(tiny_model, self.x, self.y, AttackConfig(epsilon=epsilon, step_size=epsilon, iterations=1)).adv_images
        assert np.array_equal(a, b)

    def test_requires_eval_mode(self, tiny_model):
        tiny_model.train()
        with pytest.raises(InvalidStateError):
            pgd(tiny_model, self.x, self.y, AttackConfig(epsilon=0.1, iterations=1))

    def test_rejects_out_of_range_inputs(self, tiny_model):
        with pytest.raises(InvalidArgumentError):
            pgd(tiny_model, self.x + 2.0, self.y, AttackConfig(epsilon=0.1, iterations=1))

    def test_parameters_untouched(self, tiny_model):
        before = tiny_model.state_dict()
        pgd(tiny_model, self.x, self.y, AttackConfig(epsilon=0.1, iterations=2))
        after = tiny_model.state_dict()
        assert all(np.array_equal(before[name], after[name]) for name in before)
        assert all(p.grad is None for p in tiny_model.parameters())

    def test_transform_gradient_is_inverse_permuted(self, tiny_model, secret_key):
        shuffle = KeyedShuffle.from_key(secret_key, BlockGrid(M=4))
        through = input_gradient(tiny_model, self.x, self.y, shuffle)
        direct = input_gradient(tiny_model, shuffle.apply(self.x), self.y)
        assert np.allclose(through, shuffle.invert(direct))

    def test_transform_with_padded_blocks(self, tiny_model, secret_key):
        shuffle = KeyedShuffle.from_key(secret_key, BlockGrid(M=3))
        result = pgd(tiny_model, self.x, self.y, AttackConfig(epsilon=8 / 255, iterations=2), transform=shuffle)
        assert (result.linf_achieved <= 8 / 255 + ULP).all()
        assert np.abs(input_gradient(tiny_model, self.x, self.y, shuffle)).sum() > 0


class TestRandomStart:

    def test_bounded_and_seeded(self):
        x = unit_batch(3)
        noise = random_start(x, 0.1, seed=2, sample_ids=[0, 1, 2])
        assert noise.shape == x.shape
        assert np.abs(noise).max() <= 0.1
        assert np.array_equal(noise, random_start(x, 0.1, seed=2, sample_ids=[0, 1, 2]))

    def test_noise_follows_sample_id_not_position(self):
        x = unit_batch(2)
        a = random_start(x, 0.1, seed=0, sample_ids=[5, 9])
        b = random_start(x, 0.1, seed=0, sample_ids=[9, 5])
        assert np.array_equal(a[0], b[1])


class TestBPDA:
    """Adaptive attack with a guessed key"""

    def setup_method(self):
        self.x = unit_batch(4)
        self.y = np.arange(4)
        self.grid = BlockGrid(M=4)

    def test_identity_matches_exact_guessed_without_random_start(self, tiny_model, secret_key):
        base = dict(epsilon=8 / 255, iterations=3, guessed_key=secret_key, grid=self.grid)
        identity = bpda_attack(tiny_model, self.x, self.y, AttackConfig(bpda_backward='identity', **base))
        exact = bpda_attack(tiny_model, self.x, self.y, AttackConfig(bpda_backward='exact-guessed', **base))
        assert np.array_equal(identity.adv_images, exact.adv_images)

    def test_containment(self, tiny_model, other_key):
        cfg = AttackConfig(epsilon=16 / 255, iterations=3, random_init=True, guessed_key=other_key, grid=self.grid)
        result = bpda_attack(tiny_model, self.x, self.y, cfg)
        assert (result.linf_achieved <= 16 / 255 + ULP).all()
        assert result.adv_images.min() >= 0.0 and result.adv_images.max() <= 1.0

    def test_zero_budget(self, tiny_model, other_key):
        cfg = AttackConfig(epsilon=0.0, iterations=3, guessed_key=other_key, grid=self.grid)
        assert np.array_equal(bpda_attack(tiny_model, self.x, self.y, cfg).adv_images, self.x)

    def test_missing_guessed_key(self, tiny_model):
        with pytest.raises(InvalidArgumentError):
            bpda_attack(tiny_model, self.x, self.y, AttackConfig(epsilon=0.1, grid=self.grid))

    def test_missing_grid(self, tiny_model, secret_key):
        with pytest.raises(InvalidArgumentError):
            bpda_attack(tiny_model, self.x, self.y, AttackConfig(epsilon=0.1, guessed_key=secret_key))

    def test_shuffle_keeps_perturbation_size(self):
        shuffle = KeyedShuffle.from_key(SecretKey.guess(7), self.grid)
        delta = np.random.default_rng(0).uniform(-0.03, 0.03, size=self.x.shape).astype(np.float32)
        moved = shuffle.apply(self.x + delta) - shuffle.apply(self.x)
        assert np.abs(moved).max() == pytest.approx(np.abs(delta).max(), abs=1e-6)

    def test_exact_guessed_with_padded_blocks(self, tiny_model, other_key):
        """
        Positive test: M=3 does not divide 32, so the guessed-key shuffle is reflect-padded.
        Expected: the attack runs and stays inside the epsilon ball.
        """
        cfg = AttackConfig(epsilon=8 / 255, iterations=2, guessed_key=other_key, grid=BlockGrid(M=3),
                           bpda_backward='exact-guessed')
        result = bpda_attack(tiny_model, self.x, self.y, cfg)
        assert (result.linf_achieved <= 8 / 255 + ULP).all()
        assert result.adv_images.min() >= 0.0 and result.adv_images.max() <= 1.0
