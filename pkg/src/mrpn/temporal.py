"""Per-modality trunks: a frame-wise extractor followed by a sequence aggregator.

Batches of variable-length sequences are carried as one stacked frame matrix
plus a length vector (:class:`FrameBatch`), so the extractor runs as a single
matrix product per layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .components import DenseUnit
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class FrameSequence:
    frames: np.ndarray  # [T, D_raw]
    modality: str = ""
    rate: float = 25.0  # frames per second

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"frame sequence needs shape [T>=1, D], got {self.frames.shape}")

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def duration(self):
        return self.T / self.rate


@dataclass
class FrameBatch:
    frames: np.ndarray  # [sum(lengths), D_raw]
    lengths: np.ndarray  # [B]

    @classmethod
    def from_sequences(cls, seqs):
        mats = [s.frames if isinstance(s, FrameSequence) else np.asarray(s, dtype=float) for s in seqs]
        return cls(np.concatenate(mats, axis=0), np.array([m.shape[0] for m in mats]))

    @property
    def B(self):
        return len(self.lengths)


class FrameExtractor:
    """Dense -> ReLU -> Dense applied to every frame with shared weights."""

    def __init__(self, store, path, d_raw, d_out, rng, hidden=None):
        self.d_raw = d_raw
        hidden = hidden or d_out
        self.l1 = DenseUnit(store, f"{path}.l1", d_raw, hidden, rng)
        # bias-free: the modality FeatureNorm downstream absorbs any shift
        self.l2 = DenseUnit(store, f"{path}.l2", hidden, d_out, rng, bias=False)

    def __call__(self, frames: gc.Tensor) -> gc.Tensor:
        if frames.shape[-1] != self.d_raw:
            raise DimensionError(f"extractor expects raw width {self.d_raw}, got {list(frames.shape)}")
        return self.l2(gc.relu(self.l1(frames)))


class MeanPool:
    kind = "mean_pool"

    def __call__(self, feats: gc.Tensor, lengths) -> gc.Tensor:
        return gc.segment_mean(feats, lengths)


class SimpleRecurrent:
    """``h_t = tanh(W_h h_{t-1} + W_x z_t + b)``, ``h_0 = 0``; output ``h_T`` projected."""

    kind = "simple_recurrent"

    def __init__(self, store, path, d_in, d_out, rng, hidden=None):
        hidden = hidden or d_out
        self.inp = DenseUnit(store, f"{path}.inp", d_in, hidden, rng)
        self.rec = DenseUnit(store, f"{path}.rec", hidden, hidden, rng, bias=False)
        self.proj = DenseUnit(store, f"{path}.proj", hidden, d_out, rng, bias=False)
        self.hidden = hidden

    def __call__(self, feats: gc.Tensor, lengths) -> gc.Tensor:
        lengths = np.asarray(lengths, dtype=int)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        B = len(lengths)
        xs = self.inp(feats)  # input projection for every frame at once
        h = None
        for t in range(int(lengths.max())):
            alive = t < lengths
            idx = np.where(alive, starts + t, -1)
            x_t = gc.gather_rows(xs, idx)
            pre = x_t if h is None else gc.add(x_t, self.rec(h))
            h_new = gc.tanh(pre)
            if h is None:
                h = h_new
            elif alive.all():
                h = h_new
            else:
                m = alive[:, None].astype(float)
                h = gc.add(gc.mul(h_new, m), gc.mul(h, 1.0 - m))
        assert h is not None and h.shape == (B, self.hidden)
        return self.proj(h)


def make_aggregator(kind, store, path, d_in, d_out, rng, hidden=None):
    if kind == "mean_pool":
        return MeanPool()
    if kind == "simple_recurrent":
        return SimpleRecurrent(store, path, d_in, d_out, rng, hidden)
    raise ConfigError(f"unknown aggregator {kind!r}")


class Trunk:
    """Extractor + aggregator producing one temporal feature vector per sequence."""

    def __init__(self, store, path, d_raw, d_feat, rng, aggregator="mean_pool", hidden=None):
        self.path = path
        self.extractor = FrameExtractor(store, f"{path}.extractor", d_raw, d_feat, rng, hidden)
        self.aggregator = make_aggregator(aggregator, store, f"{path}.aggregator", d_feat, d_feat, rng, hidden)

    def __call__(self, batch: FrameBatch) -> gc.Tensor:
        return self.aggregator(self.extractor(gc.Tensor(batch.frames)), batch.lengths)


def frame_extract(x: FrameSequence, extractor: FrameExtractor) -> gc.Tensor:
    return extractor(gc.Tensor(x.frames))


def aggregate(feats, agg) -> gc.Tensor:
    """Aggregate one ``[T, D]`` feature sequence to ``[D]``."""
    feats = gc.as_tensor(feats)
    if feats.shape[0] < 1:
        raise ContractError("cannot aggregate an empty sequence")
    out = agg(feats, [feats.shape[0]])
    return gc.reshape(out, (out.shape[1],))
