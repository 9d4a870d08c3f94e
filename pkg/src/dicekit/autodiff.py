"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every tensor with ``requires_grad``.  Arrays keep
whatever float dtype they were given, so the same graph code runs in float32
for training and float64 for gradient checking.

The op set is intentionally small: the dense algebra the encoder and heads
need, plus fused losses whose numerics matter (stable log-sum-exp, exact-zero
subgradient for L1 at ties).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class NonScalarLossError(Exception):
    """Raised when backward() starts from a tensor that is not a scalar."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording; forward passes inside run graph-free."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """Array plus tape node; leaves carry ``requires_grad``."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise NonScalarLossError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            _accum(a, np.expand_dims(g, -1) * b.data)
            _accum(b, (np.expand_dims(g, -1) * a.data).reshape(-1, b.data.shape[0]).sum(0))
            return
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """x @ w + b in one node."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    data = x.data @ w.data + b.data

    def backward(g):
        _accum(x, g @ np.swapaxes(w.data, -1, -2))
        _accum(w, np.swapaxes(x.data, -1, -2) @ g)
        _accum(b, g)

    return _node(data, (x, w, b), backward)


def tabs(x) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is exactly 0."""
    x = _as_tensor(x)
    data = np.abs(x.data)

    def backward(g):
        _accum(x, g * np.sign(x.data))

    return _node(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-form gaussian error linear unit."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * d_inner))

    return _node(data, (x,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inverse))

    return _node(data, (x,), backward)


def getitem(x, idx) -> Tensor:
    x = _as_tensor(x)
    data = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        _accum(x, full)

    return _node(data, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(data, tuple(tensors), backward)


# -- reductions ---------------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _node(data, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size / data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / n)

    return _node(data, (x,), backward)


def mean_pool(x, axis: int, weights: np.ndarray | None = None, eps: float = 1e-8) -> Tensor:
    """Mean over one axis; with ``weights`` (constant, broadcastable to x)
    the result is sum(x * w) / max(sum(w), eps) along that axis."""
    x = _as_tensor(x)
    if weights is None:
        return tmean(x, axis=axis)
    w = np.broadcast_to(np.asarray(weights, dtype=x.data.dtype), x.data.shape)
    denom = np.maximum(w.sum(axis=axis, keepdims=True), eps)
    data = (x.data * w).sum(axis=axis) / np.squeeze(denom, axis=axis)

    def backward(g):
        _accum(x, np.expand_dims(g, axis) * w / denom)

    return _node(data, (x,), backward)


def max_pool(x, axis: int) -> Tensor:
    """Max over one axis; ties route the gradient to the first maximizer."""
    x = _as_tensor(x)
    data = x.data.max(axis=axis)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis)
        _accum(x, full)

    return _node(data, (x,), backward)


# -- normalization and attention ------------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        _accum(gain, g * xhat)
        _accum(bias, g)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(data, (x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _node(s, (x,), backward)


def softmax_attention(q, k, v, scale: float, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T * scale + mask) v, fused.

    q [..., Tq, d], k [..., Tk, d], v [..., Tk, dv]; ``mask`` is an optional
    constant additive bias broadcastable to the logits.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        logits = logits + mask
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    att = e / e.sum(axis=-1, keepdims=True)
    data = att @ v.data

    def backward(g):
        _accum(v, np.swapaxes(att, -1, -2) @ g)
        datt = g @ np.swapaxes(v.data, -1, -2)
        dot = (datt * att).sum(axis=-1, keepdims=True)
        dlogit = att * (datt - dot)
        _accum(q, (dlogit @ k.data) * scale)
        _accum(k, (np.swapaxes(dlogit, -1, -2) @ q.data) * scale)

    return _node(data, (q, k, v), backward)


# -- fused losses ---------------------------------------------------------------


def masked_l1(pred, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted L1 sum: sum(w * |pred - target|); targets and weights are constants."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    w = np.broadcast_to(np.asarray(weights, dtype=pred.data.dtype), pred.data.shape)
    diff = pred.data - target
    data = np.asarray((w * np.abs(diff)).sum())

    def backward(g):
        _accum(pred, g * w * np.sign(diff))

    return _node(data, (pred,), backward)


def cross_entropy_logits(logits, target_onehot: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of -log softmax(logits) at the target class.

    ``weights`` broadcasts over the leading axes (one weight per row); the
    class axis is the last one.
    """
    logits = _as_tensor(logits)
    t = np.asarray(target_onehot, dtype=logits.data.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    w = np.broadcast_to(
        np.asarray(weights, dtype=logits.data.dtype), logits.data.shape[:-1]
    )
    data = np.asarray(-(w * (t * logp).sum(axis=-1)).sum())

    def backward(g):
        p = np.exp(logp)
        _accum(logits, g * w[..., None] * (p * t.sum(axis=-1, keepdims=True) - t))

    return _node(data, (logits,), backward)


def masked_bce(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of stable binary cross-entropy terms."""
    logits = _as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    w = np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray((w * elem).sum())

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-z))
        _accum(logits, g * w * (s - y))

    return _node(data, (logits,), backward)


def bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all elements, numerically stable."""
    logits = _as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    data = np.asarray((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    n = z.size

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-z))
        _accum(logits, g * (s - y) / n)

    return _node(data, (logits,), backward)
