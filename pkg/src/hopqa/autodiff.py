"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Just enough ops for a transformer encoder and its classification heads:
broadcasting add/mul, batched matmul, reshape/transpose, embedding gather,
masked softmax, layer norm, erf-GeLU, concatenation, and a fused softmax
cross-entropy. Backward formulas are exact, so finite-difference checks hold
to float64 precision.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the closure that routes its gradient backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar tensor."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; constants are wrapped as non-grad leaves.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(grad):
        a._accumulate(_unbroadcast(grad, a.data.shape))
        b._accumulate(_unbroadcast(grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward(grad):
        a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
        b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b))

    def backward(grad):
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        a._accumulate(_unbroadcast(grad_a, a.data.shape))
        b._accumulate(_unbroadcast(grad_b, b.data.shape))

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    out._backward = lambda grad: a._accumulate(grad.reshape(a.data.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), _parents=(a,))
    out._backward = lambda grad: a._accumulate(grad.transpose(inverse))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        for t, piece in zip(tensors, np.split(grad, splits, axis=axis)):
            t._accumulate(piece)

    out._backward = backward
    return out


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Index the first axis of `table` with an integer array."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids], _parents=(table,))

    def backward(grad):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, grad)
        table._accumulate(acc)

    out._backward = backward
    return out


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis`, removing that axis."""
    out = Tensor(np.take(a.data, index, axis=axis), _parents=(a,))

    def backward(grad):
        acc = np.zeros_like(a.data)
        slicer = [slice(None)] * a.data.ndim
        slicer[axis] = index
        acc[tuple(slicer)] = grad
        a._accumulate(acc)

    out._backward = backward
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf, _parents=(a,))
    local = cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    out._backward = lambda grad: a._accumulate(grad * local)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data, _parents=(a, gain, bias))
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(grad):
        dxhat = grad * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        a._accumulate(dx)
        gain._accumulate((grad * xhat).sum(axis=reduce_axes))
        bias._accumulate(grad.sum(axis=reduce_axes))

    out._backward = backward
    return out


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; positions where mask is False get weight 0.

    Every row must keep at least one unmasked position.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: some row is fully masked")
    scores = np.where(mask, a.data, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    probs = weights / weights.sum(axis=-1, keepdims=True)
    out = Tensor(probs, _parents=(a,))

    def backward(grad):
        inner = (grad * probs).sum(axis=-1, keepdims=True)
        a._accumulate(probs * (grad - inner))

    out._backward = backward
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy between rows of logits and integer targets."""
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    logp = x - lse
    rows = np.arange(x.shape[0])
    losses = -logp[rows, targets]
    total = losses.mean() if reduction == "mean" else losses.sum()
    out = Tensor(total, _parents=(logits,))

    def backward(grad):
        probs = np.exp(logp)
        probs[rows, targets] -= 1.0
        scale = grad / x.shape[0] if reduction == "mean" else grad
        logits._accumulate(probs * scale)

    out._backward = backward
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), _parents=(a,))
    out._backward = lambda grad: a._accumulate(np.full_like(a.data, grad))
    return out


def tmean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), _parents=(a,))
    out._backward = lambda grad: a._accumulate(np.full_like(a.data, grad / a.data.size))
    return out
