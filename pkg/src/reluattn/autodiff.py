"""Minimal reverse-mode tape over numpy arrays.

Every op here accepts either plain ndarrays or Var nodes. With plain arrays
it just runs the forward math (no graph, no overhead), so the same network
code serves inference, the float64 finite-difference oracle, and training.
With Var inputs it records a vector-Jacobian callback and backward() replays
the tape in reverse topological order.

This is deliberately not a general autodiff engine: the op set is exactly
what the attention kernels and the miniature ViT need.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError

Array = np.ndarray


class Var:
    """One tape node: a value, its accumulated cotangent, and a vjp closure."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


def value(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _node(out: Array, inputs, vjp) -> Var:
    parents = tuple(x for x in inputs if isinstance(x, Var))
    index = [i for i, x in enumerate(inputs) if isinstance(x, Var)]

    def vjp_parents(g):
        grads = vjp(g)
        return tuple(grads[i] for i in index)

    return Var(out, parents, vjp_parents)


def backward(root: Var, seed: Array | None = None) -> None:
    """Accumulate cotangents into .grad for every Var reachable from root."""
    if seed is None:
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.data.dtype)
        if seed.shape != root.data.shape:
            raise ShapeError(f"backward seed shape {seed.shape} != root shape {root.data.shape}")

    # iterative topological sort; graphs are small but recursion limits are not
    order: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = seed
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a gradient down to the shape of the broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _any_var(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _any_var(a, b):
        return out
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(x, c: float):
    xv = value(x)
    out = xv * c
    if not _any_var(x):
        return out
    return _node(out, (x,), lambda g: (g * c,))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = T.matmul(av, bv)
    if not _any_var(a, b):
        return out

    def vjp(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def activation(h, x):
    """Element-wise activation; the derivative from tensor.apply_activation."""
    xv = value(x)
    if not _any_var(x):
        return T.apply_activation(h, xv)
    y, dy = T.apply_activation(h, xv, compute_grad=True)
    return _node(y, (x,), lambda g: (g * dy,))


def softmax_rows(x):
    xv = value(x)
    y = T.softmax_rows(xv)
    if not _any_var(x):
        return y

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (x,), vjp)


def layernorm(x, gain, eps: float = 1e-6):
    xv, gv = value(x), value(gain)
    out = T.layernorm(xv, gv, eps)
    if not _any_var(x, gain):
        return out

    d = xv.shape[-1]
    x64 = xv.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = (centered * inv_std).astype(xv.dtype, copy=False)
    inv_std = inv_std.astype(xv.dtype, copy=False)

    def vjp(g):
        gg = g * gv
        mean_gg = gg.mean(axis=-1, keepdims=True)
        mean_gg_xhat = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (gg - mean_gg - xhat * mean_gg_xhat)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0).astype(gv.dtype, copy=False)
        return gx, ggain

    return _node(out, (x, gain), vjp)


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    if not _any_var(x):
        return out
    return _node(out, (x,), lambda g: (g.reshape(xv.shape),))


def swapaxes(x, a: int, b: int):
    xv = value(x)
    out = xv.swapaxes(a, b)
    if not _any_var(x):
        return out
    return _node(out, (x,), lambda g: (g.swapaxes(a, b),))


def mean(x, axis: int):
    """Mean along one axis, accumulated in float64 then cast back."""
    xv = value(x)
    out = xv.mean(axis=axis, dtype=np.float64).astype(xv.dtype, copy=False)
    if not _any_var(x):
        return out
    n = xv.shape[axis]

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _node(out, (x,), vjp)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    Returns a python float for plain inputs, a scalar Var on the tape.
    """
    lv = value(logits)
    labels = np.asarray(labels)
    if lv.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {lv.shape}")
    if labels.shape != (lv.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {lv.shape[0]}")
    n, k = lv.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label out of range [0, {k})")
    x64 = lv.astype(np.float64, copy=False)
    m = x64.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x64 - m).sum(axis=-1))
    picked = x64[np.arange(n), labels]
    loss = float((lse - picked).mean())
    if not _any_var(logits):
        return loss

    probs = T.softmax_rows(lv)

    def vjp(g):
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), labels] = 1.0
        gscale = np.asarray(g, dtype=probs.dtype) / n
        return ((probs - onehot) * gscale,)

    return _node(np.asarray(loss, dtype=lv.dtype), (logits,), vjp)
