"""Finite-difference gradient checks for every op and every network variant."""
from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .fusion_nets import ModelConfig, NetworkVariant, build
from .temporal import FrameBatch

KINK_MARGIN = 1e-3  # keep ReLU inputs this far from 0 so +-eps never crosses the kink


def _ops():
    def fixed_dropout(x, r):
        return gc.dropout(x, 0.4, "train", gc.CountingRNG(7))

    def batchnorm(x, r):
        return gc.batchnorm(x, gc.Tensor(r[1][0]), gc.Tensor(r[0][0]), gc.RunningStats.fresh(x.shape[1]), "train")

    return {
        "add": lambda x, r: gc.add(x, gc.Tensor(r[1])),
        "sub": lambda x, r: gc.sub(gc.Tensor(r[1]), x),
        "mul": lambda x, r: gc.mul(x, gc.Tensor(r[1])),
        "matmul": lambda x, r: gc.matmul(x, gc.Tensor(r[0])),
        "affine": lambda x, r: gc.affine(x, gc.Tensor(r[0]), gc.Tensor(r[1][0])),
        "relu": lambda x, r: gc.relu(x),
        "sigmoid": lambda x, r: gc.sigmoid(x),
        "tanh": lambda x, r: gc.tanh(x),
        "concat": lambda x, r: gc.concat([x, gc.mul(x, x)]),
        "reshape": lambda x, r: gc.reshape(x, (4, 5)),
        "softmax": lambda x, r: gc.softmax_rows(x),
        "segment_mean": lambda x, r: gc.segment_mean(x, [2, 1, 2]),
        "gather": lambda x, r: gc.gather_rows(x, [4, -1, 0, 0]),
        "dropout": fixed_dropout,
        "batchnorm": batchnorm,
    }


OPS = _ops()


def op_gradcheck(name, seed, eps=1e-5):
    """Relative error of one op, contracted with a random weight to a scalar."""
    rng = np.random.default_rng(seed)
    x = gc.parameter(rng.normal(size=(5, 4)))
    if name == "relu":
        x.data = np.where(np.abs(x.data) < KINK_MARGIN, KINK_MARGIN, x.data)
    aux = (rng.normal(size=(4, 4)), rng.normal(size=(1, 4)))
    op = OPS[name]
    w = gc.Tensor(rng.normal(size=op(x, aux).shape))
    return gc.grad_check(lambda: gc.sum_all(gc.mul(op(x, aux), w)), x, eps)


def loss_gradchecks(seed, eps=1e-5):
    rng = np.random.default_rng(100 + seed)
    s = gc.parameter(rng.normal(size=(5, 4)))
    t = rng.dirichlet(np.ones(4), size=5)
    return {
        "softmax_cross_entropy": gc.grad_check(lambda: gc.softmax_cross_entropy(s, t), s, eps),
        "cross_entropy": gc.grad_check(lambda: gc.cross_entropy(t, gc.softmax_rows(s)), s, eps),
    }


def relu_margin(loss: gc.Tensor) -> float:
    """Smallest |input| over every ReLU node in the graph of ``loss``."""
    best, seen, stack = np.inf, set(), [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.op == "relu":
            best = min(best, float(np.min(np.abs(t._parents[0].data))))
        stack.extend(t._parents)
    return best


def network_case(tag, aggregator, seed, B=5, d_raw=3, d_feat=4, C=3):
    """A small dropout-free network plus a scalar training-loss closure, drawn away from ReLU kinks."""
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        mods = ("video",) if tag == "uni" else ("video", "audio")
        variant = NetworkVariant(tag, (d_feat,) * len(mods), C, mods)
        model = ModelConfig(feat_dim=d_feat, aggregator=aggregator, dropout=0.0)
        net = build(variant, rng, model, raw_dims=(d_raw,) * len(mods))
        lens = rng.integers(1, 4, B)
        inputs = {m: FrameBatch(rng.normal(size=(lens.sum(), d_raw)), lens) for m in mods}
        target = np.eye(C)[rng.integers(0, C, B)]

        def loss():
            return net.forward_train(inputs, target).total

        if relu_margin(loss()) > KINK_MARGIN:
            return net, loss
    raise RuntimeError(f"no kink-free draw for {tag}/{aggregator} seed {seed}")


def network_gradcheck(tag, aggregator, seed, eps=1e-5):
    """Relative error per parameter path for one randomly drawn network."""
    net, loss = network_case(tag, aggregator, seed)
    return {p: gc.grad_check(loss, t, eps) for p, t in net.parameters().items()}


def network_gradients(tag, aggregator, seed, eps=1e-5):
    """Per-parameter (max |analytic|, max |numeric|, rel err) for diagnosing flat directions."""
    net, loss = network_case(tag, aggregator, seed)
    for t in net.parameters().values():
        t.grad = None
    grads = gc.backward(loss())
    out = {}
    for p, t in net.parameters().items():
        a = grads.get(t, np.zeros_like(t.data))
        n = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = float(loss().data)
            flat[i] = old - eps
            lo = float(loss().data)
            flat[i] = old
            n.reshape(-1)[i] = (hi - lo) / (2 * eps)
        err = float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))
        out[p] = (float(np.max(np.abs(a))), float(np.max(np.abs(n))), err)
    return out
