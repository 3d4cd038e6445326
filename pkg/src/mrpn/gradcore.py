"""Minimal reverse-mode autodiff over dense numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. ``backward``
walks the graph once in reverse topological order and sums contributions, so
a parameter reached by several loss terms receives the sum of their
gradients.
"""
from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ConfigError, DimensionError

DTYPE = np.float64
DEBUG = bool(os.environ.get("MRPN_DEBUG"))

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CE_CLAMP = 1e-12

_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch the precision used for new tensors (float64 or float32)."""
    global DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ConfigError(f"unsupported dtype {dtype}")
    DTYPE = dtype.type


def op_count() -> int:
    """Number of graph ops created so far on this thread."""
    return getattr(_local, "ops", 0)


def _bump():
    _local.ops = getattr(_local, "ops", 0) + 1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward, op):
    _bump()
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward if needs else None, op=op)
    if DEBUG and not np.all(np.isfinite(out.data)):
        finite_in = all(np.all(np.isfinite(p.data)) for p in parents)
        if finite_in:
            raise FloatingPointError(f"op {op} produced non-finite values from finite inputs")
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {list(a.shape)} with {list(b.shape)}") from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {list(a.shape)} with {list(b.shape)}") from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {list(a.shape)} with {list(b.shape)}") from None
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {list(a.shape)} @ {list(b.shape)}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with ``b`` broadcast over rows; ``b=None`` drops the bias."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: input {list(x.shape)} does not match weight {list(W.shape)}")
    if b is None:
        return _make(x.data @ W.data, (x, W), lambda g: (g @ W.data.T, x.data.T @ g), "affine")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias {list(b.shape)} does not match weight {list(W.shape)}")
    return _make(
        x.data @ W.data + b.data,
        (x, W, b),
        lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)),
        "affine",
    )


def concat(xs, axis=1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat: no inputs")
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise DimensionError(f"concat: batch extents differ {[list(x.shape) for x in xs]}")
    if len(xs) == 1:
        return xs[0]
    widths = [x.shape[axis] for x in xs]
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back, "concat")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]``; entries of ``idx`` equal to -1 yield zero rows."""
    idx = np.asarray(idx)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    data = x.data[safe] * valid[:, None]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, safe[valid], g[valid])
        return (gx,)

    return _make(data, (x,), back, "gather")


def segment_mean(x: Tensor, lengths) -> Tensor:
    """Mean over consecutive row segments of the given lengths."""
    lengths = np.asarray(lengths, dtype=int)
    if lengths.sum() != x.shape[0] or np.any(lengths < 1):
        raise DimensionError(f"segment_mean: lengths {lengths.tolist()} do not tile {x.shape[0]} rows")
    seg = np.repeat(np.arange(len(lengths)), lengths)
    out = np.zeros((len(lengths), x.shape[1]), dtype=x.data.dtype)
    np.add.at(out, seg, x.data)
    inv = (1.0 / lengths)[:, None]
    out *= inv
    return _make(out, (x,), lambda g: ((g * inv)[seg],), "segment_mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


# ---------------------------------------------------------------- probability

def _softmax(s):
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(s: Tensor) -> Tensor:
    p = _softmax(s.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (s,), back, "softmax")


def _check_target(p_target):
    sums = p_target.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6, rtol=0):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"target row {bad} sums to {sums[bad]!r}, not 1")


def cross_entropy(p_target, p_pred: Tensor) -> Tensor:
    """Batch mean of ``-sum p_target * log p_pred`` on probability inputs."""
    t = as_tensor(p_target).data
    if t.shape != p_pred.shape:
        raise DimensionError(f"cross_entropy: target {list(t.shape)} vs prediction {list(p_pred.shape)}")
    _check_target(t)
    B = t.shape[0]
    q = np.maximum(p_pred.data, CE_CLAMP)
    loss = -(t * np.log(q)).sum() / B
    clamped = p_pred.data < CE_CLAMP
    return _make(np.asarray(loss), (p_pred,), lambda g: (np.where(clamped, 0.0, -g * t / q / B),), "cross_entropy")


def softmax_cross_entropy(scores: Tensor, p_target) -> Tensor:
    """Fused softmax + cross entropy; the gradient wrt scores is ``(p - target)/B``."""
    t = as_tensor(p_target).data
    if t.shape != scores.shape:
        raise DimensionError(f"cross_entropy: target {list(t.shape)} vs scores {list(scores.shape)}")
    _check_target(t)
    B = t.shape[0]
    p = _softmax(scores.data)
    loss = -(t * np.log(np.maximum(p, CE_CLAMP))).sum() / B
    return _make(np.asarray(loss), (scores,), lambda g: (g * (p - t) / B,), "softmax_ce")


# ---------------------------------------------------------------- stateful units

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    updates: int = 0
    used_uninitialized: bool = False

    @classmethod
    def fresh(cls, dim):
        return cls(np.zeros(dim, dtype=DTYPE), np.ones(dim, dtype=DTYPE))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, mode="train", update=True) -> Tensor:
    """Per-feature batch normalization.

    Train mode normalizes with the biased batch variance and, when ``update``
    is set, folds the batch statistics into ``state`` with momentum 0.1.
    Test mode normalizes with the running statistics.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {list(x.shape)}, gamma {list(gamma.shape)}, beta {list(beta.shape)}")
    if mode == "train":
        B = x.shape[0]
        if B < 2:
            raise ContractError(f"batchnorm in train mode needs at least 2 rows, got {B}")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        if update:
            state.mean = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mu
            state.var = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * var
            state.updates += 1

        def back(g):
            dxhat = g * gamma.data
            dx = inv / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    elif mode == "test":
        if state.updates == 0:
            state.used_uninitialized = True
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        xhat = (x.data - state.mean) * inv

        def back(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), back, "batchnorm")


class CountingRNG:
    """Wraps a numpy Generator and counts draws (used to audit test mode)."""

    def __init__(self, seed_or_gen):
        self.gen = seed_or_gen if isinstance(seed_or_gen, np.random.Generator) else np.random.default_rng(seed_or_gen)
        self.calls = 0

    def random(self, size=None):
        self.calls += 1
        return self.gen.random(size)

    def __getattr__(self, name):
        attr = getattr(self.gen, name)
        if callable(attr):
            def counted(*a, **k):
                self.calls += 1
                return attr(*a, **k)
            return counted
        return attr


def dropout(x: Tensor, rate: float, mode="train", rng=None) -> Tensor:
    """Inverted dropout; identity in test mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "test" or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- backward

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns ``{leaf: gradient}`` for this pass alone.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return {}
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def grad_check(f, theta: Tensor, eps=1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` wrt ``theta``.

    ``f`` maps no arguments to a scalar Tensor and must read ``theta`` in place.
    """
    theta.grad = None
    backward(f())
    analytic = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()
    theta.grad = None
    numeric = np.zeros_like(theta.data)
    flat = theta.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f().data)
        flat[i] = old - eps
        lo = float(f().data)
        flat[i] = old
        num_flat[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
