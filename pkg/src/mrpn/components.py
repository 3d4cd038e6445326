"""Composite units: DenseUnit, FeatureNorm, Scoring, FusionComponent, ResPerceptron.

Each unit registers its tensors in a shared :class:`ParamStore` under a dotted
path (``"video.rp.dense.W"``) and is called with the network's mode.
"""
from __future__ import annotations

import math

import numpy as np

from . import gradcore as gc
from .errors import BuildError, DimensionError


class ParamStore:
    """Flat, ordered map of parameter path -> Tensor plus batch-norm running stats."""

    def __init__(self):
        self.params: dict[str, gc.Tensor] = {}
        self.stats: dict[str, gc.RunningStats] = {}

    def new(self, path, data):
        if path in self.params:
            raise BuildError(f"duplicate parameter path {path!r}")
        t = gc.parameter(data, name=path)
        self.params[path] = t
        return t

    def new_stats(self, path, dim):
        if path in self.stats:
            raise BuildError(f"duplicate running-stats path {path!r}")
        s = gc.RunningStats.fresh(dim)
        self.stats[path] = s
        return s

    def count(self, prefix=""):
        return sum(t.size for p, t in self.params.items() if p.startswith(prefix))

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseUnit:
    def __init__(self, store, path, d_in, d_out, rng, bias=True):
        self.path, self.d_in, self.d_out = path, d_in, d_out
        self.W = store.new(f"{path}.W", uniform_init(rng, d_in, (d_in, d_out)))
        self.b = store.new(f"{path}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.path}: expected width {self.d_in}, got input {list(x.shape)}")
        return gc.affine(x, self.W, self.b)


class FeatureNorm:
    """Batch normalization with learnable scale/shift.

    A frozen unit always normalizes with its running statistics and never
    updates them, so freezing leaves every stored value untouched.
    """

    def __init__(self, store, path, dim):
        self.path, self.dim = path, dim
        self.gamma = store.new(f"{path}.gamma", np.ones(dim))
        self.beta = store.new(f"{path}.beta", np.zeros(dim))
        self.stats = store.new_stats(path, dim)
        self.frozen = False

    def __call__(self, x, mode):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"{self.path}: expected width {self.dim}, got input {list(x.shape)}")
        if self.frozen:
            return gc.batchnorm(x, self.gamma, self.beta, self.stats, "test")
        return gc.batchnorm(x, self.gamma, self.beta, self.stats, mode)


def feature_norm(f, unit: FeatureNorm, mode):
    return unit(f, mode)


class Scoring:
    """Dense -> ReLU -> Dropout -> FeatureNorm -> Dense, features to class scores."""

    def __init__(self, store, path, d_in, n_classes, rng, hidden=None, dropout=0.3):
        self.path, self.d_in = path, d_in
        hidden = hidden or max(n_classes, d_in // 2)
        self.hidden = DenseUnit(store, f"{path}.hidden", d_in, hidden, rng)
        self.norm = FeatureNorm(store, f"{path}.norm", hidden)
        self.out = DenseUnit(store, f"{path}.out", hidden, n_classes, rng)
        self.dropout = dropout

    def __call__(self, f, mode, rng=None):
        h = gc.relu(self.hidden(f))
        h = gc.dropout(h, self.dropout, mode, rng)
        return self.out(self.norm(h, mode))


def scoring(f, unit: Scoring, mode, rng=None):
    return unit(f, mode, rng)


class FusionComponent:
    """Concatenate modality features, normalize, and score jointly."""

    def __init__(self, store, path, dims, n_classes, rng, hidden=None, dropout=0.3):
        self.dims = list(dims)
        width = sum(self.dims)
        self.norm = FeatureNorm(store, f"{path}.norm", width)
        self.scoring = Scoring(store, f"{path}.scoring", width, n_classes, rng, hidden, dropout)

    def __call__(self, gs, mode, rng=None):
        if len(gs) != len(self.dims):
            raise DimensionError(f"fusion expects {len(self.dims)} inputs, got {len(gs)}")
        for g, d in zip(gs, self.dims):
            if g.shape[-1] != d:
                raise DimensionError(f"fusion input {list(g.shape)} does not match width {d}")
        return self.scoring(self.norm(gc.concat(gs), mode), mode, rng)


def fusion_component(gs, unit: FusionComponent, mode, rng=None):
    return unit(gs, mode, rng)


class ResPerceptron:
    """``x + FeatureNorm(Sigmoid(Dense(x)))`` on already-normalized features."""

    def __init__(self, store, path, dim, rng, d_out=None):
        if d_out is not None and d_out != dim:
            raise BuildError(f"{path}: residual dense unit must be square, got {dim}->{d_out}")
        self.dense = DenseUnit(store, f"{path}.dense", dim, dim, rng)
        self.norm = FeatureNorm(store, f"{path}.norm", dim)

    def residual(self, x, mode):
        return self.norm(gc.sigmoid(self.dense(x)), mode)

    def __call__(self, x, mode):
        return gc.add(x, self.residual(x, mode))


def res_perceptron(f_hat, unit: ResPerceptron, mode):
    return unit(f_hat, mode)
