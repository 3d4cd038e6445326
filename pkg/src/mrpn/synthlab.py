"""Synthetic multi-modal emotion data with per-modality fuzzy and missing evidence.

Every class has a unit prototype in a shared latent space; each modality sees
the latent space through its own random rotation. A sample's frames are::

    prototype_m(y_m) + actor offset + shared latent noise + per-frame noise

where ``y_m`` equals the true label unless the sample is *fuzzy* in modality
``m`` (``y_m`` resampled from the other classes, probability ``fuzziness``).
A *missing* sample (probability ``missingness``) has its prototype pulled 90%
of the way toward class 0 (neutral).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .temporal import FrameSequence

NEUTRAL = 0
COLLAPSE = 0.9


@dataclass
class ModalityConfig:
    name: str
    d_raw: int = 16
    t_min: int = 10
    t_max: int = 50
    fuzziness: float = 0.0
    missingness: float = 0.0
    rate: float = 10.0  # frames per second
    sigma_sample: float = 0.0  # per-sample noise, constant over frames

    def validate(self):
        for k in ("fuzziness", "missingness"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{self.name}.{k} must lie in [0, 1], got {v}")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"{self.name}: need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if self.d_raw < 1 or self.rate <= 0:
            raise ConfigError(f"{self.name}: d_raw and rate must be positive")


def _default_modalities():
    return [ModalityConfig("video"), ModalityConfig("audio")]


@dataclass
class SynthConfig:
    n_classes: int = 8
    n_actors: int = 24
    per_cell: int = 5  # samples per (actor, class)
    modalities: list = field(default_factory=_default_modalities)
    sigma_shared: float = 0.0
    sigma_obs: float = 0.5
    actor_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalityConfig) else ModalityConfig(**m) for m in self.modalities]

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_actors < 4 or self.n_actors % 2:
            raise ConfigError(f"need an even actor count >= 4, got {self.n_actors}")
        if self.per_cell < 1:
            raise ConfigError("per_cell must be positive")
        if not self.modalities:
            raise ConfigError("need at least one modality")
        for m in self.modalities:
            m.validate()
        return self

    def modality(self, name):
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigError(f"no modality {name!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_fuzziness(self, **rho):
        mods = [ModalityConfig(**{**asdict(m), "fuzziness": rho.get(m.name, m.fuzziness)}) for m in self.modalities]
        return SynthConfig(**{**asdict(self), "modalities": mods})


@dataclass
class SynthSample:
    seqs: dict  # modality -> FrameSequence
    label: int
    eff_labels: dict  # modality -> label whose prototype generated the frames
    actor: int  # 1-based
    fuzzy: dict
    missing: dict
    n_classes: int

    @property
    def target(self):
        p = np.zeros(self.n_classes)
        p[self.label] = 1.0
        return p


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.normal(size=(max(rows, cols), max(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols]


def generate(config: SynthConfig) -> list:
    config.validate()
    C, A = config.n_classes, config.n_actors
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    d0 = min(m.d_raw for m in config.modalities)
    if d0 >= C:
        protos = _orthonormal(rng, C, d0)
    else:
        protos = rng.normal(size=(C, d0))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    rot = {m.name: _orthonormal(rng, m.d_raw, d0) for m in config.modalities}  # d_raw x d0, orthonormal columns
    mproto = {m.name: protos @ rot[m.name].T for m in config.modalities}
    actors = {
        m.name: config.actor_scale * rng.normal(size=(A, m.d_raw)) / np.sqrt(m.d_raw) for m in config.modalities
    }
    samples = []
    for a in range(A):
        for y in range(C):
            for _ in range(config.per_cell):
                shared = config.sigma_shared * rng.normal(size=d0) / np.sqrt(d0)
                seqs, eff, fz, ms = {}, {}, {}, {}
                for m in config.modalities:
                    fuzzy = bool(rng.random() < m.fuzziness)
                    y_m = int((y + 1 + rng.integers(0, C - 1)) % C) if fuzzy else y
                    missing = bool(rng.random() < m.missingness)
                    proto = mproto[m.name][y_m]
                    if missing:
                        proto = (1 - COLLAPSE) * proto + COLLAPSE * mproto[m.name][NEUTRAL]
                    T = int(rng.integers(m.t_min, m.t_max + 1))
                    base = proto + actors[m.name][a] + rot[m.name] @ shared
                    if m.sigma_sample:
                        base = base + m.sigma_sample * rng.normal(size=m.d_raw) / np.sqrt(m.d_raw)
                    frames = base + config.sigma_obs * rng.normal(size=(T, m.d_raw))
                    seqs[m.name] = FrameSequence(frames, m.name, m.rate)
                    eff[m.name], fz[m.name], ms[m.name] = y_m, fuzzy, missing
                samples.append(SynthSample(seqs, y, eff, a + 1, fz, ms, C))
    return samples


def n_folds(n_actors):
    return n_actors // 2


def fold_actors(fold, n_actors):
    if not 0 <= fold < n_folds(n_actors):
        raise ConfigError(f"fold {fold} out of range for {n_actors} actors (0..{n_folds(n_actors) - 1})")
    return {2 * fold + 1, 2 * fold + 2}


def actor_split(samples, fold: int, n_actors=None):
    """Hold out actors ``2*fold+1`` (odd: male) and ``2*fold+2`` (even: female)."""
    if n_actors is None:
        n_actors = max(s.actor for s in samples)
    val_actors = fold_actors(fold, n_actors)
    train = [s for s in samples if s.actor not in val_actors]
    val = [s for s in samples if s.actor in val_actors]
    return train, val


def write_dataset(samples, out_dir, config: SynthConfig | None = None):
    """One raw-matrix file per (sample, modality) plus ``manifest.jsonl``."""
    from .preproc import write_raw_matrix

    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        for m, seq in s.seqs.items():
            rel = os.path.join("samples", f"{i:05d}_{m}.raw")
            write_raw_matrix(os.path.join(out_dir, rel), seq.frames)
            lines.append(
                {
                    "path": rel,
                    "index": i,
                    "label": s.label,
                    "actor": s.actor,
                    "modality": m,
                    "effective_label": s.eff_labels[m],
                    "fuzzy": s.fuzzy[m],
                    "missing": s.missing[m],
                    "rate": seq.rate,
                }
            )
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if config is not None:
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    return os.path.join(out_dir, "manifest.jsonl")


def read_dataset(out_dir, n_classes):
    from .preproc import read_raw_matrix

    by_index = {}
    with open(os.path.join(out_dir, "manifest.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            by_index.setdefault(rec["index"], []).append(rec)
    samples = []
    for i in sorted(by_index):
        recs = by_index[i]
        seqs = {
            r["modality"]: FrameSequence(read_raw_matrix(os.path.join(out_dir, r["path"])), r["modality"], r["rate"])
            for r in recs
        }
        r0 = recs[0]
        samples.append(
            SynthSample(
                seqs,
                r0["label"],
                {r["modality"]: r["effective_label"] for r in recs},
                r0["actor"],
                {r["modality"]: r["fuzzy"] for r in recs},
                {r["modality"]: r["missing"] for r in recs},
                n_classes,
            )
        )
    return samples
