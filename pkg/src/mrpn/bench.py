"""Training strategies, AdamW, plateau schedule, evaluation and the experiment grid."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ContractError, NonFiniteGradient
from .fusion_nets import ModelConfig, Network, NetworkVariant, build
from .preproc import time_slice_augment, write_pgm
from .synthlab import SynthConfig, actor_split, generate
from .temporal import FrameBatch

log = logging.getLogger(__name__)

STRATEGIES = ("e2e", "late")


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState):
    """One decoupled-weight-decay Adam update of ``params`` (path -> Tensor) in place."""
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(path)
        if g.shape != params[path].shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {path!r} {params[path].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for path, g in grads.items():
        theta = params[path]
        m = state.m.get(path)
        if m is None:
            m = np.zeros_like(g)
            state.v[path] = np.zeros_like(g)
        v = state.v[path]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[path], state.v[path] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * theta.data
        theta.data = theta.data - state.lr * step
    return params


# ---------------------------------------------------------------- schedule

@dataclass
class ScheduleState:
    lr: float
    patience: int = 10
    factor: float = 0.5
    max_decays: int | None = None
    min_delta: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0
    epoch: int = -1
    decays: list = field(default_factory=list)  # epochs at which lr was cut
    plateaus_since_best: int = 0


def plateau_schedule(state: ScheduleState, val_loss: float) -> float:
    """Halve lr after ``patience`` epochs without improvement; the first call sets the reference."""
    state.epoch += 1
    if val_loss < state.best - state.min_delta:
        state.best = val_loss
        state.bad_epochs = 0
        state.plateaus_since_best = 0
        return state.lr
    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        state.bad_epochs = 0
        state.plateaus_since_best += 1
        if state.max_decays is None or len(state.decays) < state.max_decays:
            state.lr *= state.factor
            state.decays.append(state.epoch)
    return state.lr


# ---------------------------------------------------------------- configuration

@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    factor: float = 0.5
    max_decays: int | None = None
    stop_after: int = 2  # plateaus without improvement before stopping
    time_augment: bool = False


@dataclass
class TrainPlan:
    strategy: str = "e2e"
    train: TrainConfig = field(default_factory=TrainConfig)
    fold: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)


def streams(seed, fold, name):
    """Independent generators (init, dropout, order, augment) for one run."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(fold), zlib.crc32(name.encode())))
    return dict(zip(("init", "dropout", "order", "augment"), (np.random.default_rng(s) for s in ss.spawn(4))))


# ---------------------------------------------------------------- data

class Dataset:
    """Samples arranged for batching; optionally holds pre-encoded features instead of frames."""

    def __init__(self, samples, modalities, features=None):
        if not samples:
            raise ConfigError("empty split")
        self.samples = samples
        self.modalities = tuple(modalities)
        self.targets = np.stack([s.target for s in samples])
        self.labels = np.array([s.label for s in samples])
        self.features = features  # modality -> [N, D]

    def __len__(self):
        return len(self.samples)

    def batches(self, batch_size, rng=None):
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        cuts = list(range(0, n, batch_size))
        chunks = [order[c : c + batch_size] for c in cuts]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            last = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], last])
        return chunks

    def inputs(self, idx, augment_rng=None):
        if self.features is not None:
            return {m: gc.Tensor(self.features[m][idx]) for m in self.modalities}
        out = {}
        for m in self.modalities:
            seqs = [self.samples[i].seqs[m] for i in idx]
            if augment_rng is not None:
                seqs = [time_slice_augment(s, augment_rng) for s in seqs]
            out[m] = FrameBatch.from_sequences(seqs)
        return out

    def encoded(self, net: Network, batch_size=256):
        feats = {m: [] for m in self.modalities}
        for idx in self.batches(batch_size):
            f = net.encode(self.inputs(idx))
            for m in self.modalities:
                feats[m].append(f[m].data)
        return Dataset(self.samples, self.modalities, {m: np.concatenate(v) for m, v in feats.items()})


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    fold: int
    accuracy: float
    confusion: np.ndarray  # rows true, cols predicted
    traces: dict = field(default_factory=dict)  # term -> per-epoch mean train loss
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per-step {term: value}
    epochs: int = 0
    phase1: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["phase1"] = {k: v.to_dict() for k, v in self.phase1.items()}
        d.pop("steps")
        return d


def predict(net: Network, data: Dataset, batch_size=512):
    prev = net.mode
    net.set_mode("test")
    try:
        probs = [net.forward_test(data.inputs(idx)) for idx in data.batches(batch_size)]
    finally:
        net.set_mode(prev)
    return np.concatenate(probs)


def confusion_matrix(true, pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def evaluate(net: Network, val: Dataset, fold=0) -> EvalReport:
    """Accuracy and confusion of argmax(p_va); ties go to the lower class index."""
    p = predict(net, val)
    pred = np.argmax(p, axis=1)  # first maximum wins
    cm = confusion_matrix(val.labels, pred, net.variant.n_classes)
    return EvalReport(fold, float(np.trace(cm) / cm.sum()), cm)


def validation_loss(net: Network, val: Dataset) -> float:
    p = predict(net, val)
    return float(-(val.targets * np.log(np.maximum(p, gc.CE_CLAMP))).sum() / len(val))


# ---------------------------------------------------------------- training

def _fit(net: Network, train: Dataset, val: Dataset, cfg: TrainConfig, rngs, trainable: dict, report: EvalReport):
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = ScheduleState(cfg.lr, cfg.patience, cfg.factor, cfg.max_decays)
    net.set_mode("train")
    plateau_schedule(sched, validation_loss(net, val))
    aug = rngs["augment"] if cfg.time_augment and train.features is None else None
    for epoch in range(cfg.max_epochs):
        sums = {}
        nb = 0
        for idx in train.batches(cfg.batch_size, rngs["order"]):
            bundle = net.forward_train(train.inputs(idx, aug), train.targets[idx])
            for t in trainable.values():
                t.grad = None
            gc.backward(bundle.total)
            grads = {p: (t.grad if t.grad is not None else np.zeros_like(t.data)) for p, t in trainable.items()}
            adamw_step(trainable, grads, opt)
            vals = bundle.values()
            report.steps.append(vals)
            for k, v in vals.items():
                if k != "total":
                    sums[k] = sums.get(k, 0.0) + v
            nb += 1
        total = 0.0
        for k, s in sums.items():
            report.traces.setdefault(k, []).append(s / nb)
            total += s / nb
        report.traces.setdefault("total", []).append(total)
        vl = validation_loss(net, val)
        report.val_loss.append(vl)
        opt.lr = plateau_schedule(sched, vl)
        report.lr.append(opt.lr)
        report.epochs = epoch + 1
        if sched.plateaus_since_best >= cfg.stop_after:
            break
    net.set_mode("test")
    return net


def _uni_variant(net: Network, modality):
    i = net.modalities.index(modality)
    return NetworkVariant.unimodal(modality, net.variant.dims[i], net.variant.n_classes)


def train_unimodal(modality, like: Network, train_samples, val_samples, plan: TrainPlan):
    """Train the uni-modal baseline for ``modality`` with the same trunk shape as ``like``."""
    i = like.modalities.index(modality)
    rngs = streams(plan.seed, plan.fold, f"uni-{modality}")
    uni = build(_uni_variant(like, modality), rngs["init"], like.model, (like.raw_dims[i],))
    uni.seed_dropout(rngs["dropout"])
    tr, va = Dataset(train_samples, (modality,)), Dataset(val_samples, (modality,))
    report = EvalReport(plan.fold, 0.0, np.zeros((1, 1)))
    _fit(uni, tr, va, plan.train, rngs, dict(uni.parameters()), report)
    ev = evaluate(uni, va, plan.fold)
    report.accuracy, report.confusion = ev.accuracy, ev.confusion
    return uni, report


def transplant_trunk(src: Network, dst: Network, modality):
    """Copy trunk + modality FeatureNorm values (and running stats) from ``src`` into ``dst``."""
    prefixes = (f"{modality}.trunk.", f"{modality}.norm.")
    for p, t in src.store.params.items():
        if p.startswith(prefixes):
            dst.store.params[p].data = t.data.copy()
    for p, s in src.store.stats.items():
        if p == f"{modality}.norm":
            d = dst.store.stats[p]
            d.mean, d.var, d.updates = s.mean.copy(), s.var.copy(), s.updates


def train(net: Network, train_samples, val_samples, plan: TrainPlan, uni_cache=None):
    """Train ``net`` under ``plan.strategy``; returns ``(net, EvalReport)``.

    ``e2e`` optimizes every parameter jointly. ``late`` first trains a
    uni-modal network per modality, transplants and freezes their trunks,
    then optimizes only the fusion component (and residual perceptrons).
    ``uni_cache`` maps modality -> (uni_net, report) to reuse phase-1 runs.
    """
    if not train_samples or not val_samples:
        raise ConfigError("empty train or validation split")
    tr_actors = {s.actor for s in train_samples}
    if tr_actors & {s.actor for s in val_samples}:
        raise ContractError("train and validation splits share actors")
    cfg = plan.train
    name = f"{net.tag}-{plan.strategy}"
    rngs = streams(plan.seed, plan.fold, name)
    net.seed_dropout(rngs["dropout"])
    tr = Dataset(train_samples, net.modalities)
    va = Dataset(val_samples, net.modalities)
    report = EvalReport(plan.fold, 0.0, np.zeros((1, 1)))
    if plan.strategy == "late" and net.tag != "uni":
        if net.raw_dims is None:
            raise ConfigError("late fusion needs a network with trunks")
        for m in net.modalities:
            if uni_cache is not None and m in uni_cache:
                uni, rep = uni_cache[m]
            else:
                uni, rep = train_unimodal(m, net, train_samples, val_samples, plan)
                if uni_cache is not None:
                    uni_cache[m] = (uni, rep)
            transplant_trunk(uni, net, m)
            report.phase1[m] = rep
        net.freeze_trunks()
        for p, t in net.store.params.items():
            if p.startswith("fusion.") or ".rp." in p:
                continue
            t.requires_grad = False
        trainable = {p: t for p, t in net.parameters().items() if t.requires_grad}
        if not cfg.time_augment:
            # frozen trunks are deterministic: encode once
            tr, va = tr.encoded(net), va.encoded(net)
    else:
        trainable = dict(net.parameters())
    _fit(net, tr, va, cfg, rngs, trainable, report)
    ev = evaluate(net, va, plan.fold)
    report.accuracy, report.confusion = ev.accuracy, ev.confusion
    return net, report


# ---------------------------------------------------------------- grid

RUN_ALIASES = {"n0": "N0", "n1": "N1", "n2": "N2"}


@dataclass
class GridConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    runs: list = field(default_factory=lambda: [["n0", "e2e"], ["n1", "e2e"], ["n2", "e2e"]])
    folds: list = field(default_factory=lambda: list(range(6)))
    seeds: list = field(default_factory=lambda: list(range(5)))
    workers: int = 1
    vary_data_seed: bool = True

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = SynthConfig.from_dict(self.data)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.runs = [list(r) for r in self.runs]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "variants" in d:
            variants = d.pop("variants")
            strategies = d.pop("strategies", ["e2e"])
            d["runs"] = [[v, s] for v in variants for s in strategies if not (v.startswith("uni") and s == "late")]
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def uni_modality(run, modalities):
    """``uni-v`` / ``uni-a`` / ``uni-<name>`` -> modality name."""
    key = run.split("-", 1)[1]
    for m in modalities:
        if m == key or m[0] == key:
            return m
    raise ConfigError(f"no modality matches {run!r} in {modalities}")


def build_run(run, cfg: GridConfig, rng):
    mods = tuple(m.name for m in cfg.data.modalities)
    raw = {m.name: m.d_raw for m in cfg.data.modalities}
    D, C = cfg.model.feat_dim, cfg.data.n_classes
    if run.startswith("uni"):
        m = uni_modality(run, mods)
        return build(NetworkVariant.unimodal(m, D, C), rng, cfg.model, (raw[m],))
    if run not in RUN_ALIASES:
        raise ConfigError(f"unknown variant {run!r}")
    return build(NetworkVariant(RUN_ALIASES[run], (D,) * len(mods), C, mods), rng, cfg.model, tuple(raw[m] for m in mods))


def run_cell(cfg: GridConfig, fold: int, seed: int):
    """All configured runs for one (fold, seed); uni-modal trainings are shared with late fusion."""
    data_cfg = cfg.data
    if cfg.vary_data_seed:
        data_cfg = SynthConfig(**{**asdict(cfg.data), "seed": cfg.data.seed + seed})
    samples = generate(data_cfg)
    tr, va = actor_split(samples, fold, data_cfg.n_actors)
    plan = TrainPlan("e2e", cfg.train, fold, seed)
    mods = tuple(m.name for m in data_cfg.modalities)
    cache = {}
    rows = []
    for run, strategy in cfg.runs:
        if run.startswith("uni"):
            m = uni_modality(run, mods)
            if m not in cache:
                like = build_run("n0", cfg, np.random.default_rng(0))
                cache[m] = train_unimodal(m, like, tr, va, plan)
            net, rep = cache[m]
        else:
            rngs = streams(seed, fold, f"{RUN_ALIASES[run]}-{strategy}")
            net = build_run(run, cfg, rngs["init"])
            net, rep = train(net, tr, va, TrainPlan(strategy, cfg.train, fold, seed), uni_cache=cache)
        final = {k: v[-1] for k, v in rep.traces.items()}
        rows.append(
            {
                "variant": run,
                "strategy": strategy,
                "fold": fold,
                "seed": seed,
                "accuracy": rep.accuracy,
                "epochs": rep.epochs,
                "losses": final,
                "confusion": rep.confusion.tolist(),
            }
        )
        log.info("fold %d seed %d %s/%s acc %.4f (%d epochs)", fold, seed, run, strategy, rep.accuracy, rep.epochs)
    return rows


def _cell_job(args):
    cfg_dict, fold, seed = args
    return run_cell(GridConfig.from_dict(cfg_dict), fold, seed)


def _init_worker():
    os.environ.setdefault("OMP_NUM_THREADS", "1")


def experiment_grid(cfg: GridConfig):
    """Run every (run, fold, seed) cell; returns rows sorted by (run order, fold, seed)."""
    jobs = [(cfg.to_dict(), f, s) for f in cfg.folds for s in cfg.seeds]
    if cfg.workers > 1:
        import concurrent.futures as cf
        import multiprocessing as mp

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
        with cf.ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("spawn"), initializer=_init_worker) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        results = [run_cell(cfg, f, s) for _, f, s in jobs]
    order = {tuple(r): i for i, r in enumerate(cfg.runs)}
    rows = [r for cell in results for r in cell]
    rows.sort(key=lambda r: (order[(r["variant"], r["strategy"])], r["fold"], r["seed"]))
    return rows


def summarize(rows):
    """Mean/std accuracy and averaged row-normalized confusion per (variant, strategy)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["variant"], r["strategy"]), []).append(r)
    out = []
    for (v, s), rs in groups.items():
        acc = np.array([r["accuracy"] for r in rs])
        cms = np.array([r["confusion"] for r in rs], dtype=float)
        norm = cms / np.maximum(1, cms.sum(axis=2, keepdims=True))
        folds = sorted({r["fold"] for r in rs})
        per_fold = {f: float(np.mean([r["accuracy"] for r in rs if r["fold"] == f])) for f in folds}
        out.append(
            {
                "variant": v,
                "strategy": s,
                "n": len(rs),
                "mean_accuracy": float(acc.mean()),
                "std_accuracy": float(acc.std()),
                "per_fold": per_fold,
                "confusion": norm.mean(axis=0).tolist(),
            }
        )
    return out


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def rows_to_csv(rows) -> str:
    terms = sorted({k for r in rows for k in r["losses"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "strategy", "fold", "seed", "accuracy", "epochs"] + [f"loss_{t}" for t in terms])
    for r in rows:
        w.writerow(
            [r["variant"], r["strategy"], r["fold"], r["seed"], _fmt(r["accuracy"]), r["epochs"]]
            + [_fmt(r["losses"][t]) if t in r["losses"] else "" for t in terms]
        )
    return buf.getvalue()


def summary_to_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "strategy", "n", "mean_accuracy", "std_accuracy"])
    for s in summary:
        w.writerow([s["variant"], s["strategy"], s["n"], _fmt(s["mean_accuracy"]), _fmt(s["std_accuracy"])])
    return buf.getvalue()


def write_grid_outputs(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    summary = summarize(rows)
    with open(os.path.join(out_dir, "results.csv"), "w") as fh:
        fh.write(rows_to_csv(rows))
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write(summary_to_csv(summary))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    for s in summary:
        stem = os.path.join(out_dir, f"confusion_{s['variant']}_{s['strategy']}")
        cm = np.array(s["confusion"])
        with open(stem + ".csv", "w") as fh:
            csv.writer(fh, lineterminator="\n").writerows([[_fmt(x) for x in row] for row in cm])
        write_pgm(stem + ".pgm", cm, flip=False)
    return summary
