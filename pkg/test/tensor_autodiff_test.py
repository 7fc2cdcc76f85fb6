import math

import numpy as np
import pytest

from errors import InvalidArgumentError, InvalidStateError
from services.tensor_autodiff import (
    SGD, ComputeGraph, OptimizerState, Tensor, add, backward, batch_norm, conv2d, dense, gather_elements,
    global_avg_pool, mul, permute_elements, relu, scheduler_step, sgd_step, softmax_cross_entropy
)

H = 1e-5
TOLERANCE = 1e-4


def numeric_gradient(f, x, h=H):
    """Central finite differences of a scalar function over every element of x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        index = it.multi_index
        original = x[index]
        x[index] = original + h
        upper = f()
        x[index] = original - h
        lower = f()
        x[index] = original
        grad[index] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


def check_gradients(build, arrays):
    """
    Compare backward() against finite differences for every input array.

    ``build`` maps a list of Tensors to a scalar Tensor.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(tensors))
    for tensor, array in zip(tensors, arrays):
        numeric = numeric_gradient(lambda: float(build([Tensor(a) for a in arrays]).data), array)
        assert tensor.grad.shape == array.shape
        assert relative_error(tensor.grad, numeric) < TOLERANCE


def away_from_zero(rng, shape):
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


class TestForwardOps:
    """Forward definitions of the engine's operations"""

    def test_relu(self):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_identity_conv(self):
        x = np.random.default_rng(0).random((2, 5, 5, 3))
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(kernel), stride=1, padding=0)
        assert np.allclose(out.data, x)

    def test_conv_matches_direct_definition(self):
        rng = np.random.default_rng(1)
        x = rng.random((1, 5, 5, 2))
        w = rng.random((3, 3, 2, 4))
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                window = padded[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                expected = np.tensordot(window, w, axes=([0, 1, 2], [0, 1, 2]))
                assert np.allclose(out[0, i, j], expected, atol=1e-5)

    def test_conv_output_shape(self):
        out = conv2d(Tensor(np.zeros((2, 32, 32, 3))), Tensor(np.zeros((3, 3, 3, 8))), stride=2, padding=1)
        assert out.shape == (2, 16, 16, 8)

    def test_conv_channel_mismatch(self):
        with pytest.raises(InvalidArgumentError) as excinfo:
            conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 4))))
        assert '(1, 4, 4, 3)' in str(excinfo.value)

    def test_uniform_cross_entropy_is_ln2(self):
        loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
        assert math.isclose(float(loss.data), math.log(2), rel_tol=1e-6)

    def test_cross_entropy_non_negative(self):
        logits = Tensor(np.random.default_rng(2).standard_normal((8, 10)))
        losses = softmax_cross_entropy(logits, np.arange(8) % 10, reduction='none')
        assert np.all(losses.data >= 0)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_dense_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_add_preserves_shape(self):
        a = Tensor(np.ones((2, 4, 4, 3)))
        assert add(a, a).shape == (2, 4, 4, 3)

    def test_add_incompatible_shapes(self):
        with pytest.raises(InvalidArgumentError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_batch_norm_eval_is_affine(self):
        rng = np.random.default_rng(3)
        x = rng.random((4, 3, 3, 2))
        mean, var = np.array([0.5, 0.2]), np.array([2.0, 0.5])
        gamma, beta = Tensor([1.5, -1.0]), Tensor([0.1, 0.2])
        out = batch_norm(Tensor(x), gamma, beta, mean.copy(), var.copy(), training=False).data
        expected = gamma.data * (x - mean) / np.sqrt(var + 1e-5) + beta.data
        assert np.allclose(out, expected)

    def test_batch_norm_training_updates_running_stats(self):
        x = np.random.default_rng(4).random((8, 2, 2, 3))
        running_mean, running_var = np.zeros(3), np.ones(3)
        batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), running_mean, running_var, training=True)
        assert np.allclose(running_mean, 0.1 * x.mean(axis=(0, 1, 2)))
        assert np.allclose(running_var, 0.9 + 0.1 * x.var(axis=(0, 1, 2), ddof=1))

    def test_global_avg_pool(self):
        x = np.arange(2 * 2 * 2 * 3, dtype=np.float64).reshape(2, 2, 2, 3)
        assert np.allclose(global_avg_pool(Tensor(x)).data, x.mean(axis=(1, 2)))

    def test_permute_elements_rejects_wrong_length(self):
        with pytest.raises(InvalidArgumentError):
            permute_elements(Tensor(np.zeros((1, 4))), np.arange(3))

    def test_gather_elements_rejects_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            gather_elements(Tensor(np.zeros((1, 4))), np.array([0, 4]))

    def test_float64_preserved(self):
        x = Tensor(np.zeros((1, 4, 4, 2), dtype=np.float64))
        w = Tensor(np.zeros((3, 3, 2, 2), dtype=np.float64))
        assert conv2d(x, w, padding=1).dtype == np.float64


class TestBackward:
    """Reverse-mode differentiation"""

    def test_square_sum(self):
        x = Tensor([3.0], requires_grad=True)
        backward((x * x).sum())
        assert x.grad.tolist() == [6.0]

    def test_pow(self):
        x = Tensor([3.0], requires_grad=True)
        (x ** 2).sum().backward()
        assert x.grad.tolist() == [6.0]

    def test_dense_input_gradient_is_weight(self):
        w = np.array([[2.0], [-1.0], [0.5]])
        x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        backward(dense(x, Tensor(w)).sum())
        assert np.allclose(x.grad, w.T)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            backward(x * 2.0)

    def test_gradients_accumulate_on_leaves(self):
        x = Tensor([1.0], requires_grad=True)
        backward((x * 2.0).sum())
        backward((x * 3.0).sum())
        assert x.grad.tolist() == [5.0]

    def test_shared_node_visited_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        loss = (y + y).sum()
        graph = ComputeGraph.from_loss(loss)
        assert len({id(node) for node in graph.nodes}) == len(graph.nodes)
        backward(loss, graph)
        assert x.grad.tolist() == [8.0]

    def test_every_leaf_gets_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.random((2, 3)), requires_grad=True)
        w = Tensor(rng.random((3, 4)), requires_grad=True)
        b = Tensor(rng.random(4), requires_grad=True)
        grads = backward(softmax_cross_entropy(dense(x, w, b), [0, 3]))
        assert len(grads) == 3
        for leaf in (x, w, b):
            assert leaf.grad is not None and leaf.grad.shape == leaf.shape

    def test_constant_inputs_get_no_gradient(self):
        x = Tensor([1.0, 2.0])
        w = Tensor([3.0, 4.0], requires_grad=True)
        backward((x * w).sum())
        assert x.grad is None
        assert w.grad.tolist() == [1.0, 2.0]


class TestFiniteDifferences:
    """Central finite-difference checks at float64, h=1e-5"""

    def setup_method(self):
        self.rng = np.random.default_rng(1234)

    @pytest.mark.parametrize('shape_a,shape_b', [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((5,), (1,))])
    def test_add(self, shape_a, shape_b):
        weights = self.rng.standard_normal(np.broadcast_shapes(shape_a, shape_b))
        check_gradients(lambda t: (add(t[0], t[1]) * weights).sum(),
                        [self.rng.standard_normal(shape_a), self.rng.standard_normal(shape_b)])

    @pytest.mark.parametrize('shape', [(4,), (2, 3), (2, 2, 2, 3)])
    def test_mul(self, shape):
        weights = self.rng.standard_normal(shape)
        check_gradients(lambda t: (mul(t[0], t[1]) * weights).sum(),
                        [self.rng.standard_normal(shape), self.rng.standard_normal(shape)])

    @pytest.mark.parametrize('shape', [(6,), (2, 3, 3, 2)])
    def test_relu(self, shape):
        weights = self.rng.standard_normal(shape)
        check_gradients(lambda t: (relu(t[0]) * weights).sum(), [away_from_zero(self.rng, shape)])

    @pytest.mark.parametrize('n,d,k', [(1, 3, 2), (4, 5, 3), (2, 8, 10)])
    def test_dense(self, n, d, k):
        weights = self.rng.standard_normal((n, k))
        check_gradients(lambda t: (dense(t[0], t[1], t[2]) * weights).sum(),
                        [self.rng.standard_normal((n, d)), self.rng.standard_normal((d, k)),
                         self.rng.standard_normal(k)])

    @pytest.mark.parametrize('x_shape,w_shape,stride,padding', [
        ((1, 5, 5, 1), (3, 3, 1, 2), 1, 1),
        ((2, 6, 6, 3), (3, 3, 3, 4), 2, 1),
        ((1, 4, 4, 2), (1, 1, 2, 3), 2, 0),
        ((2, 5, 4, 2), (2, 3, 2, 2), 1, 0),
    ])
    def test_conv2d(self, x_shape, w_shape, stride, padding):
        out_shape = conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), stride=stride, padding=padding).shape
        weights = self.rng.standard_normal(out_shape)
        check_gradients(lambda t: (conv2d(t[0], t[1], t[2], stride=stride, padding=padding) * weights).sum(),
                        [self.rng.standard_normal(x_shape), self.rng.standard_normal(w_shape),
                         self.rng.standard_normal(w_shape[3])])

    @pytest.mark.parametrize('shape,training', [((4, 3, 3, 2), True), ((6, 3), True), ((3, 2, 2, 4), False)])
    def test_batch_norm(self, shape, training):
        channels = shape[-1]
        weights = self.rng.standard_normal(shape)
        mean, var = self.rng.random(channels), self.rng.random(channels) + 0.5

        def build(t):
            out = batch_norm(t[0], t[1], t[2], mean.copy(), var.copy(), training=training)
            return (out * weights).sum()

        check_gradients(build, [self.rng.standard_normal(shape), self.rng.standard_normal(channels),
                                self.rng.standard_normal(channels)])

    @pytest.mark.parametrize('shape', [(1, 2, 2, 3), (3, 4, 5, 2)])
    def test_global_avg_pool(self, shape):
        weights = self.rng.standard_normal((shape[0], shape[3]))
        check_gradients(lambda t: (global_avg_pool(t[0]) * weights).sum(), [self.rng.standard_normal(shape)])

    @pytest.mark.parametrize('n,k,reduction', [(1, 2, 'mean'), (5, 10, 'mean'), (4, 3, 'sum')])
    def test_softmax_cross_entropy(self, n, k, reduction):
        labels = self.rng.integers(0, k, size=n)
        check_gradients(lambda t: softmax_cross_entropy(t[0], labels, reduction=reduction),
                        [self.rng.standard_normal((n, k))])

    def test_softmax_cross_entropy_per_sample(self):
        labels = np.array([0, 2, 1])
        weights = self.rng.standard_normal(3)
        check_gradients(lambda t: (softmax_cross_entropy(t[0], labels, reduction='none') * weights).sum(),
                        [self.rng.standard_normal((3, 4))])

    @pytest.mark.parametrize('shape', [(2, 6), (2, 2, 2, 3)])
    def test_permute_elements(self, shape):
        per_sample = int(np.prod(shape[1:]))
        index = self.rng.permutation(per_sample)
        weights = self.rng.standard_normal(shape)
        check_gradients(lambda t: (permute_elements(t[0], index) * weights).sum(), [self.rng.standard_normal(shape)])

    def test_gather_elements_with_repeats(self):
        index = np.array([0, 1, 1, 4, 5, 5])
        weights = self.rng.standard_normal((2, 6))
        check_gradients(lambda t: (gather_elements(t[0], index) * weights).sum(), [self.rng.standard_normal((2, 6))])

    def test_gather_elements_sample_shape(self):
        index = np.array([3, 0, 0, 2, 1, 3])
        weights = self.rng.standard_normal((2, 2, 3))
        check_gradients(lambda t: (gather_elements(t[0], index, (2, 3)) * weights).sum(),
                        [self.rng.standard_normal((2, 2, 2))])

    def test_mean_reshape_sub_neg(self):
        check_gradients(lambda t: ((t[0].reshape(6) - t[1]) ** 2).mean() + (-t[0]).sum(),
                        [self.rng.standard_normal((2, 3)), self.rng.standard_normal(6)])

    def test_three_layer_cnn_input_gradient(self):
        """
        conv -> relu -> conv(stride 2) -> relu -> pool -> dense -> cross-entropy
        """
        w1 = Tensor(self.rng.standard_normal((3, 3, 3, 4)) * 0.5)
        w2 = Tensor(self.rng.standard_normal((3, 3, 4, 6)) * 0.5)
        w3 = Tensor(self.rng.standard_normal((6, 10)))
        b3 = Tensor(self.rng.standard_normal(10))
        labels = np.array([1, 7])

        def build(t):
            out = relu(conv2d(t[0], w1, padding=1))
            out = relu(conv2d(out, w2, stride=2, padding=1))
            return softmax_cross_entropy(dense(global_avg_pool(out), w3, b3), labels)

        check_gradients(build, [self.rng.random((2, 6, 6, 3))])


class TestSGD:
    """Momentum SGD and the step scheduler"""

    def test_plain_step(self):
        param = Tensor([0.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step([param], [np.array([1.0])], state)
        assert np.allclose(param.data, [-0.1])

    def test_momentum_two_steps(self):
        g = 0.5
        param = Tensor([0.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([param], [np.array([g])], state)
        sgd_step([param], [np.array([g])], state)
        assert np.allclose(state.momentum_buffers[0], [1.9 * g])

    def test_weight_decay(self):
        param = Tensor([2.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.5)
        sgd_step([param], [np.array([0.0])], state)
        assert np.allclose(param.data, [1.9])

    def test_missing_gradient(self):
        param = Tensor([0.0], requires_grad=True)
        with pytest.raises(InvalidStateError):
            sgd_step([param], [None], OptimizerState())

    def test_gradient_shape_mismatch(self):
        param = Tensor([0.0, 1.0], requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            sgd_step([param], [np.zeros(3)], OptimizerState())

    def test_buffers_match_parameter_shapes(self):
        params = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
        state = OptimizerState()
        sgd_step(params, [np.ones((2, 3)), np.ones(4)], state)
        assert [b.shape for b in state.momentum_buffers] == [(2, 3), (4,)]

    def test_epoch_40_boundary(self):
        state = OptimizerState(lr=0.1, step_epochs=40, gamma=0.1)
        for _ in range(39):
            scheduler_step(state)
        assert math.isclose(state.lr, 0.1)
        scheduler_step(state)
        assert math.isclose(state.lr, 0.01)

    def test_every_epoch_decay(self):
        state = OptimizerState(lr=0.1, step_epochs=1, gamma=0.5)
        for k in range(1, 5):
            scheduler_step(state)
            assert math.isclose(state.lr, 0.1 * 0.5 ** k)

    def test_invalid_step_epochs(self):
        with pytest.raises(InvalidArgumentError):
            OptimizerState(step_epochs=0)

    def test_optimizer_wrapper_reduces_loss(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((16, 4))
        labels = (x[:, 0] > 0).astype(int)
        w = Tensor(np.zeros((4, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        optimizer = SGD([w, b], OptimizerState(lr=0.5, momentum=0.9, weight_decay=0.0))

        losses = []
        for _ in range(20):
            optimizer.zero_grad()
            loss = softmax_cross_entropy(dense(Tensor(x), w, b), labels)
            backward(loss)
            optimizer.step()
            losses.append(float(loss.data))

        assert losses[-1] < losses[0]
