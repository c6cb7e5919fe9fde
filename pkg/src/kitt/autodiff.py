"""A small reverse-mode autodiff engine over numpy arrays.

Each op returns a :class:`Tensor` holding its parents and a closure mapping
the output gradient to parent gradients.  ``Tensor.backward`` walks the tape
in reverse topological order, accumulates into ``Parameter.grad`` and then
releases the tape; calling it twice on the same graph is an error.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_grad_enabled = True
_check_finite = False


class TapeError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise on NaN/Inf produced by any forward op."""
    global _check_finite
    prev, _check_finite = _check_finite, enabled
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        if self._consumed:
            raise TapeError("backward through a consumed tape")
        if grad is None:
            if self.data.size != 1:
                raise TapeError("backward needs a scalar loss or an explicit gradient")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


class Parameter(Tensor):
    """A named trainable leaf with Adam moment buffers."""

    __slots__ = ("name", "trainable", "m", "v")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.m = None
        self.v = None

    def zero_grad(self):
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# forward ops


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics.

    A 2-D right operand is applied along the last axis of ``a`` as one GEMM.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over leading axes (e.g. a bias)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}") from None
    if out.shape != a.shape:
        raise ValueError(f"add only broadcasts the right operand, got {a.shape} + {b.shape}")

    def backward(g):
        return g, _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then ``* gain + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def mean(x, axis: int) -> Tensor:
    """Mean pooling over ``axis`` (removed from the shape)."""
    x = as_tensor(x)
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis) / x.dtype.type(n)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def embed(ids, table) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    table = as_tensor(table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("token id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def mask_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (mask broadcasts)."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over all leading positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError("targets must match logits without the class axis")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs positive total weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum() / total

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1, -1)
        return ((g * p * (w / total)[..., None]).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# optimization


def adam_step(params, lr: float, step: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every trainable parameter with a gradient.

    ``step`` counts from 1.
    """
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        g = p.grad
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        update = lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.data -= update.astype(p.data.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(float(np_sum_sq(grads)))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


def np_sum_sq(arrays) -> float:
    return float(np.sum([np.vdot(a, a) for a in arrays])) if arrays else 0.0
