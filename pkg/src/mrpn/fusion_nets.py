"""Fusion networks N0, N1, N2, the uni-modal baseline and the k-modality MRPN.

Wiring per modality ``m`` (training mode)::

    f_m  = Trunk_m(x_m)                     (optional, see ``raw_dims``)
    f^_m = FeatureNorm_m(f_m)
    s_m  = Dense_m(f^_m)                    side branch, N1/N2 only
    g_m  = ResPerceptron_m(f^_m)  (N2)  or  f^_m  (N0/N1)
    s_va = FusionComponent(g_1, ..., g_k)
    L    = sum_m CE(p, softmax(s_m)) + CE(p, softmax(s_va))

In test mode only the central branch (``s_va``) is evaluated.
"""
from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .components import DenseUnit, FeatureNorm, FusionComponent, ParamStore, ResPerceptron, Scoring
from .errors import BuildError, ConfigError, ContractError
from .temporal import FrameBatch, Trunk

VARIANTS = ("N0", "N1", "N2", "uni")
DEFAULT_MODALITIES = ("video", "audio")


@dataclass(frozen=True)
class NetworkVariant:
    tag: str
    dims: tuple
    n_classes: int
    modalities: tuple = DEFAULT_MODALITIES

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ConfigError(f"unknown variant {self.tag!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if len(self.dims) < 1:
            raise ConfigError("need at least one modality (k >= 1)")
        if len(self.dims) != len(self.modalities):
            raise ConfigError(f"{len(self.dims)} widths for modalities {self.modalities}")
        if self.tag == "uni" and len(self.dims) != 1:
            raise ConfigError("a uni-modal variant has exactly one modality")
        if any(d < 1 for d in self.dims) or self.n_classes < 1:
            raise ConfigError(f"dimensions must be positive: dims={self.dims}, C={self.n_classes}")

    @property
    def k(self):
        return len(self.dims)

    @classmethod
    def unimodal(cls, modality, dim, n_classes):
        return cls("uni", (dim,), n_classes, (modality,))


@dataclass
class ModelConfig:
    feat_dim: int = 32
    extractor_hidden: int | None = None
    aggregator: str = "mean_pool"
    agg_hidden: int | None = None
    scoring_hidden: int | None = None
    dropout: float = 0.3


@dataclass
class LossBundle:
    side: dict = field(default_factory=dict)  # modality -> scalar Tensor
    fusion: gc.Tensor | None = None
    total: gc.Tensor | None = None

    def terms(self):
        out = dict(self.side)
        if self.fusion is not None:
            out["fusion"] = self.fusion
        return out

    def values(self):
        out = {k: float(v.data) for k, v in self.terms().items()}
        out["total"] = float(self.total.data)
        return out


class Network:
    def __init__(self, variant: NetworkVariant, rng, model: ModelConfig | None = None, raw_dims=None):
        self.variant = variant
        self.model = model or ModelConfig()
        self.raw_dims = None if raw_dims is None else tuple(int(d) for d in raw_dims)
        self.store = ParamStore()
        self.mode = "train"
        self.dropout_rng = gc.CountingRNG(0)
        self.loss_weights = {}
        mods, dims, C = variant.modalities, variant.dims, variant.n_classes
        m = self.model
        if self.raw_dims is not None and len(self.raw_dims) != len(mods):
            raise BuildError(f"{len(self.raw_dims)} raw widths for modalities {mods}")
        s = self.store
        self.trunks, self.norms, self.side, self.rps = {}, {}, {}, {}
        self.fusion = None
        self.scoring = None
        for i, name in enumerate(mods):
            if self.raw_dims is not None:
                self.trunks[name] = Trunk(
                    s, f"{name}.trunk", self.raw_dims[i], dims[i], rng, m.aggregator, m.extractor_hidden
                )
            self.norms[name] = FeatureNorm(s, f"{name}.norm", dims[i])
        if variant.tag == "uni":
            self.scoring = Scoring(s, f"{mods[0]}.scoring", dims[0], C, rng, m.scoring_hidden, m.dropout)
            return
        self.fusion = FusionComponent(s, "fusion", dims, C, rng, m.scoring_hidden, m.dropout)
        if variant.tag in ("N1", "N2"):
            for i, name in enumerate(mods):
                self.side[name] = DenseUnit(s, f"{name}.side", dims[i], C, rng)
        if variant.tag == "N2":
            for i, name in enumerate(mods):
                self.rps[name] = ResPerceptron(s, f"{name}.rp", dims[i], rng)

    # ------------------------------------------------------------ bookkeeping
    @property
    def tag(self):
        return self.variant.tag

    @property
    def modalities(self):
        return self.variant.modalities

    def parameters(self):
        return self.store.params

    def parameter_count(self):
        return self.store.count()

    def set_mode(self, mode):
        if mode not in ("train", "test"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode

    def seed_dropout(self, seed_or_gen):
        self.dropout_rng = gc.CountingRNG(seed_or_gen)

    @contextlib.contextmanager
    def no_dropout(self):
        units = [self.scoring] if self.scoring else [self.fusion.scoring]
        saved = [u.dropout for u in units]
        for u in units:
            u.dropout = 0.0
        try:
            yield self
        finally:
            for u, r in zip(units, saved):
                u.dropout = r

    def trunk_prefixes(self):
        """Parameter path prefixes owned by the per-modality trunks (extractor, aggregator, FeatureNorm)."""
        return tuple(f"{m}.trunk." for m in self.modalities) + tuple(f"{m}.norm." for m in self.modalities)

    def freeze_trunks(self, frozen=True):
        for p, t in self.store.params.items():
            if p.startswith(self.trunk_prefixes()):
                t.requires_grad = not frozen
        for n in self.norms.values():
            n.frozen = frozen

    # ------------------------------------------------------------ forward
    def encode(self, inputs) -> dict:
        """Map per-modality inputs to temporal feature vectors ``f_m``.

        FrameBatch inputs run through the trunk; arrays/Tensors are taken as
        ``f_m`` directly.
        """
        missing = [m for m in self.modalities if m not in inputs]
        if missing:
            raise ContractError(f"missing modality input(s) {missing}")
        out = {}
        for m in self.modalities:
            x = inputs[m]
            if isinstance(x, FrameBatch):
                if m not in self.trunks:
                    raise ContractError(f"network has no trunk for {m!r}; pass feature vectors")
                out[m] = self.trunks[m](x)
            else:
                out[m] = gc.as_tensor(x)
        return out

    def _central(self, f_hat, mode):
        if self.scoring is not None:
            return self.scoring(f_hat[self.modalities[0]], mode, self.dropout_rng)
        gs = [self.rps[m](f_hat[m], mode) if m in self.rps else f_hat[m] for m in self.modalities]
        return self.fusion(gs, mode, self.dropout_rng)

    def forward_train(self, features, p) -> LossBundle:
        if self.mode != "train":
            raise ContractError("forward_train needs the network in train mode")
        f = self.encode(features)
        f_hat = {m: self.norms[m](f[m], "train") for m in self.modalities}
        bundle = LossBundle()
        for m, dense in self.side.items():
            bundle.side[m] = gc.softmax_cross_entropy(dense(f_hat[m]), p)
        central = gc.softmax_cross_entropy(self._central(f_hat, "train"), p)
        if self.scoring is not None:
            bundle.side[self.modalities[0]] = central
        else:
            bundle.fusion = central
        total = None
        for name, term in bundle.terms().items():
            w = self.loss_weights.get(name, 1.0)
            term = term if w == 1.0 else gc.mul(term, w)
            total = term if total is None else gc.add(total, term)
        bundle.total = total
        return bundle

    def scores_test(self, features) -> gc.Tensor:
        if self.mode != "test":
            raise ContractError("forward_test needs the network in test mode")
        f = self.encode(features)
        f_hat = {m: self.norms[m](f[m], "test") for m in self.modalities}
        return self._central(f_hat, "test")

    def forward_test(self, features) -> np.ndarray:
        return gc.softmax_rows(self.scores_test(features)).data

    def side_scores(self, features, mode=None):
        """Side-branch scores ``s_m`` (N1/N2), for inspection only."""
        mode = mode or self.mode
        f = self.encode(features)
        return {m: dense(self.norms[m](f[m], mode)) for m, dense in self.side.items()}


def build(variant: NetworkVariant, rng, model: ModelConfig | None = None, raw_dims=None) -> Network:
    return Network(variant, rng, model, raw_dims)


def build_k_modal(dims, n_classes, rng, names=None, model=None, raw_dims=None) -> Network:
    """MRPN over ``k = len(dims)`` modalities: k residual perceptrons and k side losses."""
    dims = list(dims)
    if len(dims) < 1:
        raise ConfigError("k-modal MRPN needs k >= 1")
    if names is None:
        names = DEFAULT_MODALITIES if len(dims) == 2 else tuple(f"m{i}" for i in range(len(dims)))
    return Network(NetworkVariant("N2", tuple(dims), n_classes, tuple(names)), rng, model, raw_dims)


def forward_train(net: Network, features, p) -> LossBundle:
    return net.forward_train(features, p)


def forward_test(net: Network, features) -> np.ndarray:
    return net.forward_test(features)


def expected_parameter_count(variant: NetworkVariant, model: ModelConfig | None = None, raw_dims=None) -> int:
    """Closed-form parameter count, independent of the builder."""
    model = model or ModelConfig()
    C = variant.n_classes

    def dense(i, o, bias=True):
        return i * o + (o if bias else 0)

    def scoring(d):
        h = model.scoring_hidden or max(C, d // 2)
        return dense(d, h) + 2 * h + dense(h, C)

    total = 0
    for i, d in enumerate(variant.dims):
        if raw_dims is not None:
            he = model.extractor_hidden or d
            total += dense(raw_dims[i], he) + dense(he, d, bias=False)
            if model.aggregator == "simple_recurrent":
                ha = model.agg_hidden or d
                total += dense(d, ha) + dense(ha, ha, bias=False) + dense(ha, d, bias=False)
        total += 2 * d
    if variant.tag == "uni":
        return total + scoring(variant.dims[0])
    width = sum(variant.dims)
    total += 2 * width + scoring(width)
    if variant.tag in ("N1", "N2"):
        total += sum(dense(d, C) for d in variant.dims)
    if variant.tag == "N2":
        total += sum(d * d + d + 2 * d for d in variant.dims)
    return total


# ------------------------------------------------------------ gradient blending

@dataclass
class DecompositionReport:
    max_deviation: float
    per_param: dict  # path -> max abs deviation
    term_grads: dict  # term -> {path: grad array}


def _grads_of(loss, params):
    for t in params.values():
        t.grad = None
    gc.backward(loss)
    out = {p: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for p, t in params.items()}
    for t in params.values():
        t.grad = None
    return out


def trunk_gradient_decomposition(net: Network, features, p) -> DecompositionReport:
    """Check grad(L) == sum of per-term grads, using separate backward passes."""
    if net.tag not in ("N1", "N2"):
        raise ContractError("decomposition needs a multi-term network (N1 or N2)")
    params = {k: v for k, v in net.parameters().items() if v.requires_grad}
    with net.no_dropout():
        bundle = net.forward_train(features, p)
    total = _grads_of(bundle.total, params)
    terms = {k: _grads_of(v, params) for k, v in bundle.terms().items()}
    per_param = {}
    for path, g in total.items():
        s = None
        for tg in terms.values():
            s = tg[path] if s is None else s + tg[path]
        per_param[path] = float(np.max(np.abs(g - s))) if g.size else 0.0
    return DecompositionReport(max(per_param.values()), per_param, terms)


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"MRPNCKPT"
CKPT_VERSION = 1


def save_checkpoint(net: Network, path, extra=None):
    """Write ``net`` as: magic, u32 version, u32 header length, JSON header, raw float64 LE blob.

    The header lists every entry (parameters, then running stats ``<path>.running_mean`` /
    ``<path>.running_var``) with its shape in blob order.
    """
    entries = [(p, t.data) for p, t in net.store.params.items()]
    for p, s in net.store.stats.items():
        entries.append((f"{p}.running_mean", s.mean))
        entries.append((f"{p}.running_var", s.var))
    header = {
        "variant": net.variant.tag,
        "modalities": list(net.variant.modalities),
        "dims": list(net.variant.dims),
        "n_classes": net.variant.n_classes,
        "raw_dims": None if net.raw_dims is None else list(net.raw_dims),
        "model": asdict(net.model),
        "stats_updates": {p: s.updates for p, s in net.store.stats.items()},
        "entries": [{"path": p, "shape": list(a.shape)} for p, a in entries],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(network, header)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not an MRPN checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen])
    variant = NetworkVariant(header["variant"], tuple(header["dims"]), header["n_classes"], tuple(header["modalities"]))
    net = Network(variant, np.random.default_rng(0), ModelConfig(**header["model"]), header["raw_dims"])
    off = 16 + hlen
    values = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        values[e["path"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(e["shape"]).astype(float)
        off += 8 * n
    for p, t in net.store.params.items():
        t.data = values[p].copy()
    for p, s in net.store.stats.items():
        s.mean = values[f"{p}.running_mean"].copy()
        s.var = values[f"{p}.running_var"].copy()
        s.updates = header["stats_updates"].get(p, 0)
    return net, header
