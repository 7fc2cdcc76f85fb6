"""
Tensor Autodiff Module - dense tensors with reverse-mode differentiation

Provides the Tensor node type, the differentiable operations the residual
classifier needs, the backward pass and the momentum SGD optimizer with its
step learning-rate scheduler.

Images and activations use NHWC layout; convolution kernels are stored as
(kh, kw, in_channels, out_channels).
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import InvalidArgumentError, InvalidStateError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A node in the compute graph: an array, its gradient and how it was made."""

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence['Tensor'] = (),
                 _backward: Optional[BackwardFn] = None, _op: str = '', dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self) -> List[np.ndarray]:
        """Backpropagate from this scalar tensor; see backward()."""
        return backward(self)

    def __repr__(self):
        grad_flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad_flag})"

    # Elementwise arithmetic with numpy broadcasting

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), 'neg')

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise InvalidArgumentError("Only scalar exponents are supported.")
        base = self.data

        def _backward(g):
            return (g * exponent * base ** (exponent - 1),)

        return _make(base ** exponent, (self,), _backward, 'pow')

    def sum(self) -> 'Tensor':
        shape = self.shape
        return _make(np.asarray(self.data.sum(), dtype=self.dtype), (self,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), 'sum')

    def mean(self) -> 'Tensor':
        size = self.data.size
        shape = self.shape
        return _make(np.asarray(self.data.mean(), dtype=self.dtype), (self,),
                     lambda g: (np.broadcast_to(g / size, shape).copy(),), 'mean')

    def reshape(self, *shape) -> 'Tensor':
        original = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),), 'reshape')


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Create an op output; only record the graph edge when a parent needs gradients."""
    requires_grad = any(parent.requires_grad for parent in parents)
    if not requires_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_ndim(name: str, tensor: Tensor, ndim: int):
    if tensor.data.ndim != ndim:
        raise InvalidArgumentError(f"{name} expects a {ndim}-D input, got shape {tensor.shape}.")


# Graph and backward pass

@dataclass
class ComputeGraph:
    """Nodes reachable from a loss, in topological order (loss last)."""

    nodes: List[Tensor] = field(default_factory=list)
    leaves: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> 'ComputeGraph':
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        leaves = [node for node in order if node.is_leaf and node.requires_grad]
        return cls(nodes=order, leaves=leaves)


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None) -> List[np.ndarray]:
    """
    Run reverse-mode differentiation from a scalar loss.

    Leaf gradients are accumulated into ``leaf.grad``; intermediate gradients
    are discarded once consumed.

    Args:
        loss: scalar tensor
        graph: optional prebuilt graph for this loss

    Returns:
        list: gradients aligned with ``graph.leaves``
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}.")
    if graph is None:
        graph = ComputeGraph.from_loss(loss)
    if not loss.requires_grad:
        return [np.zeros_like(leaf.data) for leaf in graph.leaves]

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._backward(grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    return [leaf.grad for leaf in graph.leaves]


# Forward operations

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; residual connections require equal shapes upstream."""
    try:
        out = a.data + b.data
    except ValueError as error:
        raise InvalidArgumentError(f"add: incompatible shapes {a.shape} and {b.shape}.") from error
    a_shape, b_shape = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), 'add')


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as error:
        raise InvalidArgumentError(f"mul: incompatible shapes {a.shape} and {b.shape}.") from error
    a_data, b_data = a.data, b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b_data, a_data.shape),
                                         _unbroadcast(g * a_data, b_data.shape)), 'mul')


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), 'relu')


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ W + b with x (N, D), W (D, K), b (K,)."""
    _check_ndim('dense', x, 2)
    _check_ndim('dense weight', weight, 2)
    if x.shape[1] != weight.shape[0]:
        raise InvalidArgumentError(f"dense: input {x.shape} does not match weight {weight.shape}.")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise InvalidArgumentError(f"dense: bias {bias.shape} does not match weight {weight.shape}.")
        out = out + bias.data
    x_data, w_data = x.data, weight.data

    def _backward(g):
        grads = (g @ w_data.T if x.requires_grad else None,
                 x_data.T @ g if weight.requires_grad else None)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, _backward, 'dense')


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> Tuple[np.ndarray, int, int]:
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, out_h, out_w, channels = windows.shape[:4]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * out_h * out_w, kh * kw * channels)
    return cols, out_h, out_w


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (im2col + matrix product)."""
    _check_ndim('conv2d', x, 4)
    _check_ndim('conv2d weight', weight, 4)
    kh, kw, in_channels, out_channels = weight.shape
    if x.shape[3] != in_channels:
        raise InvalidArgumentError(f"conv2d: input {x.shape} does not match weight {weight.shape}.")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"conv2d: invalid stride {stride} or padding {padding}.")
    n, height, width, _ = x.shape
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise InvalidArgumentError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}.")

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols, out_h, out_w = _im2col(padded, kh, kw, stride)
    w_mat = weight.data.reshape(kh * kw * in_channels, out_channels)
    out = cols @ w_mat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, out_h, out_w, out_channels)

    def _backward(g):
        g_mat = g.reshape(-1, out_channels)
        grad_w = (cols.T @ g_mat).reshape(weight.shape) if weight.requires_grad else None
        grad_x = None
        if x.requires_grad:
            dcols = (g_mat @ w_mat.T).reshape(n, out_h, out_w, kh, kw, in_channels)
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    grad_padded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += dcols[:, :, :, i, j, :]
            grad_x = grad_padded[:, padding:padding + height, padding:padding + width, :]
        grads = (grad_x, grad_w)
        return grads + ((g_mat.sum(axis=0),) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, _backward, 'conv2d')


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """
    Per-channel batch normalisation over N, H, W (or N for 2-D input).

    In training mode the running statistics are updated in place; in eval
    mode they are used as-is, which makes the op a fixed affine map.
    """
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise InvalidArgumentError(f"batch_norm: parameters {gamma.shape} do not match input {x.shape}.")
    axes = tuple(range(x.data.ndim - 1))
    count = x.data.size // channels

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((x.data - mean) * inv_std).astype(x.dtype)
    out = gamma.data * x_hat + beta.data
    gamma_data = gamma.data

    def _backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        g_hat = g * gamma_data
        if training:
            grad_x = inv_std / count * (count * g_hat - g_hat.sum(axis=axes)
                                        - x_hat * (g_hat * x_hat).sum(axis=axes))
        else:
            grad_x = g_hat * inv_std
        return grad_x.astype(g.dtype), grad_gamma, grad_beta

    return _make(out.astype(x.dtype), (x, gamma, beta), _backward, 'batch_norm')


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over H and W: (N, H, W, C) -> (N, C)."""
    _check_ndim('global_avg_pool', x, 4)
    n, height, width, channels = x.shape
    area = height * width

    def _backward(g):
        return (np.broadcast_to(g[:, None, None, :] / area, (n, height, width, channels)).copy(),)

    return _make(x.data.mean(axis=(1, 2)), (x,), _backward, 'global_avg_pool')


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = 'mean') -> Tensor:
    """
    Softmax cross-entropy against integer labels.

    Args:
        logits: (N, K) tensor
        labels: N integer class indices
        reduction: 'mean', 'sum' or 'none'

    Returns:
        Tensor: scalar loss, or per-sample losses for 'none'
    """
    _check_ndim('softmax_cross_entropy', logits, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, classes = logits.shape
    if labels.shape[0] != n:
        raise InvalidArgumentError(f"softmax_cross_entropy: {labels.shape[0]} labels for logits {logits.shape}.")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise InvalidArgumentError("softmax_cross_entropy: label out of range.")
    if reduction not in ('mean', 'sum', 'none'):
        raise InvalidArgumentError(f"Unknown reduction '{reduction}'.")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[np.arange(n), labels]
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(n), labels] -= 1.0

    if reduction == 'none':
        out = losses

        def _backward(g):
            return (probs * g[:, None],)
    else:
        scale = 1.0 / n if reduction == 'mean' else 1.0
        out = np.asarray(losses.sum() * scale)

        def _backward(g):
            return (probs * (g * scale),)

    return _make(out.astype(logits.dtype), (logits,), _backward, 'softmax_cross_entropy')


def permute_elements(x: Tensor, index: np.ndarray) -> Tensor:
    """
    Rearrange each sample's flattened elements: out[b, i] = x[b, index[i]].

    ``index`` must be a permutation of the per-sample element count; the
    backward pass applies the inverse permutation to the gradient.
    """
    index = np.asarray(index)
    per_sample = x.data[0].size if x.data.ndim > 0 and x.shape[0] else 0
    if index.shape != (per_sample,):
        raise InvalidArgumentError(f"permute_elements: index of length {index.size} for input {x.shape}.")
    inverse = np.argsort(index)
    flat = x.data.reshape(x.shape[0], -1)
    shape = x.shape
    out = flat[:, index].reshape(shape)

    def _backward(g):
        return (g.reshape(shape[0], -1)[:, inverse].reshape(shape),)

    return _make(out, (x,), _backward, 'permute_elements')


def gather_elements(x: Tensor, index: np.ndarray, sample_shape: Optional[Tuple[int, ...]] = None) -> Tensor:
    """
    Pick each sample's flattened elements by index: out[b, i] = x[b, index[i]].

    Indices may repeat or skip elements; the backward pass scatter-adds.
    The result has shape (N,) + sample_shape, (N, len(index)) by default.
    """
    index = np.asarray(index)
    per_sample = x.data[0].size if x.data.ndim > 0 and x.shape[0] else 0
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= per_sample)):
        raise InvalidArgumentError(f"gather_elements: index out of range for input {x.shape}.")
    shape = x.shape
    flat = x.data.reshape(shape[0], -1)
    sample_shape = tuple(sample_shape) if sample_shape is not None else (index.size,)
    if int(np.prod(sample_shape)) != index.size:
        raise InvalidArgumentError(f"gather_elements: {index.size} indices do not fill shape {sample_shape}.")
    out = flat[:, index].reshape((shape[0],) + sample_shape)

    def _backward(g):
        grad = np.zeros_like(flat)
        np.add.at(grad, (slice(None), index), g.reshape(shape[0], -1))
        return (grad.reshape(shape),)

    return _make(out, (x,), _backward, 'gather_elements')


# Optimizer

@dataclass
class OptimizerState:
    """Momentum SGD hyperparameters, buffers and the step scheduler's position."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step_epochs: int = 40
    gamma: float = 0.1
    epoch: int = 0
    initial_lr: Optional[float] = None
    momentum_buffers: List[Optional[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.initial_lr is None:
            self.initial_lr = self.lr
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise InvalidArgumentError("Optimizer hyperparameters must be non-negative.")
        if self.step_epochs < 1:
            raise InvalidArgumentError("step_epochs must be a positive integer.")


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimizerState):
    """
    Apply one momentum SGD update in place.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
    """
    if len(params) != len(grads):
        raise InvalidArgumentError(f"sgd_step: {len(params)} parameters but {len(grads)} gradients.")
    if not state.momentum_buffers:
        state.momentum_buffers = [None] * len(params)
    if len(state.momentum_buffers) != len(params):
        raise InvalidStateError("sgd_step: momentum buffers do not match the parameter list.")

    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            raise InvalidStateError(f"sgd_step: parameter {i} {param.shape} has no gradient.")
        if grad.shape != param.shape:
            raise InvalidArgumentError(f"sgd_step: gradient {grad.shape} for parameter {param.shape}.")
        update = grad + state.weight_decay * param.data
        buffer = state.momentum_buffers[i]
        buffer = update.copy() if buffer is None else state.momentum * buffer + update
        state.momentum_buffers[i] = buffer
        param.data = (param.data - state.lr * buffer).astype(param.dtype)


def scheduler_step(state: OptimizerState) -> float:
    """Advance one epoch; lr = initial_lr * gamma ** (epoch // step_epochs)."""
    state.epoch += 1
    state.lr = state.initial_lr * state.gamma ** (state.epoch // state.step_epochs)
    return state.lr


class SGD:
    """Convenience wrapper binding a parameter list to an OptimizerState."""

    def __init__(self, params: Sequence[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        sgd_step(self.params, [param.grad for param in self.params], self.state)

    def end_epoch(self) -> float:
        return scheduler_step(self.state)
