"""One verdict line per headline criterion; run with ``pytest tests/test_acceptance.py -s``."""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from mrpn import bench, checks
from mrpn import gradcore as gc
from mrpn.components import ParamStore, ResPerceptron
from mrpn.fusion_nets import ModelConfig, NetworkVariant, build, forward_test, trunk_gradient_decomposition
from mrpn.preproc import AudioClip, segment_hop, spectrogram_1s
from mrpn.temporal import FrameBatch

CONFIGS = Path(__file__).resolve().parent.parent / "scripts" / "configs"
SEEDS = range(20)
NETWORKS = [(t, a) for t in ("N0", "N1", "N2") for a in ("mean_pool", "simple_recurrent")]


def load_grid(name, **override):
    cfg = bench.GridConfig.from_dict(json.loads((CONFIGS / name).read_text()))
    for k, v in override.items():
        setattr(cfg, k, v)
    return cfg


def workers():
    return max(1, min(4, len(os.sched_getaffinity(0))))


# ---------------------------------------------------------------- gradients

def test_gradient_oracle(verdict):
    t0 = time.time()
    worst_op = 0.0
    for seed in SEEDS:
        for name in checks.OPS:
            worst_op = max(worst_op, checks.op_gradcheck(name, seed))
        worst_op = max(worst_op, *checks.loss_gradchecks(seed).values())
    worst, failing = {}, {}
    for seed in SEEDS:
        for tag, agg in NETWORKS:
            for path, err in checks.network_gradcheck(tag, agg, seed).items():
                worst[(tag, agg)] = max(worst.get((tag, agg), 0.0), err)
                if err >= 1e-4:
                    failing.setdefault(tag, set()).add(path)
    elapsed = time.time() - t0
    ok = worst_op < 1e-4 and max(worst.values()) < 1e-4 and elapsed < 60
    detail = f"ops max {worst_op:.1e}; " + ", ".join(f"{t}/{a[:4]} {e:.1e}" for (t, a), e in worst.items())
    detail += f"; {elapsed:.1f} s"
    if failing:
        detail += "; over tolerance: " + "; ".join(f"{t}: {sorted(p)}" for t, p in failing.items())
    verdict("gradient oracle: ops and N0/N1/N2 x 2 aggregators, 20 seeds, rel err < 1e-4, < 60 s", ok, detail)
    assert worst_op < 1e-4
    assert elapsed < 60
    assert max(worst.values()) < 1e-4, failing


# ---------------------------------------------------------------- N0 == N1 in test mode

def _random_weights(net, rng):
    for _, t in net.store:
        t.data = rng.normal(size=t.data.shape)
    for s in net.store.stats.values():
        s.mean = rng.normal(size=s.mean.shape)
        s.var = rng.uniform(0.1, 3.0, size=s.var.shape)
        s.updates = 1


def test_n0_n1_test_mode_equivalence(verdict):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        agg = ("mean_pool", "simple_recurrent")[trial % 2]
        model = ModelConfig(feat_dim=5, aggregator=agg)
        n0 = build(NetworkVariant("N0", (5, 5), 4), rng, model, raw_dims=(3, 4))
        n1 = build(NetworkVariant("N1", (5, 5), 4), rng, model, raw_dims=(3, 4))
        _random_weights(n0, rng)
        _random_weights(n1, rng)
        for p, t in n0.store:
            n1.store.params[p].data = t.data.copy()
        for p, s in n0.store.stats.items():
            n1.store.stats[p].mean, n1.store.stats[p].var = s.mean.copy(), s.var.copy()
        n0.set_mode("test")
        n1.set_mode("test")
        lens = rng.integers(1, 8, 6)
        x = {m: FrameBatch(rng.normal(size=(lens.sum(), d)), lens) for m, d in (("video", 3), ("audio", 4))}
        worst = max(worst, float(np.max(np.abs(forward_test(n0, x) - forward_test(n1, x)))))
    verdict("N0 and N1 identical in test mode, 100 weight draws", worst == 0.0, f"max abs diff {worst!r}")
    assert worst == 0.0


# ---------------------------------------------------------------- residual identity

def test_residual_perceptron_identity(verdict):
    worst = 0.0
    for trial in range(50):
        rng = np.random.default_rng(1000 + trial)
        dim = int(rng.integers(1, 33))
        unit = ResPerceptron(ParamStore(), "rp", dim, rng)
        unit.dense.W.data[:] = 0.0
        unit.dense.b.data[:] = 0.0
        unit.norm.gamma.data = rng.normal(size=dim)
        x = gc.Tensor(rng.normal(scale=rng.uniform(0.1, 10), size=(int(rng.integers(2, 64)), dim)))
        worst = max(worst, float(np.max(np.abs(unit(x, "train").data - x.data))))
    verdict("residual perceptron with zero dense weights is the identity, 50 trials, < 1e-10", worst < 1e-10, f"max {worst:.1e}")
    assert worst < 1e-10


# ---------------------------------------------------------------- gradient blending

def test_gradient_blending(verdict):
    worst = {}
    for tag in ("N1", "N2"):
        for agg in ("mean_pool", "simple_recurrent"):
            for seed in range(5):
                rng = np.random.default_rng(seed)
                net = build(NetworkVariant(tag, (6, 6), 4), rng, ModelConfig(feat_dim=6, aggregator=agg), raw_dims=(3, 5))
                net.seed_dropout(seed)
                lens = rng.integers(1, 10, 8)
                x = {m: FrameBatch(rng.normal(size=(lens.sum(), d)), lens) for m, d in (("video", 3), ("audio", 5))}
                p = np.eye(4)[rng.integers(0, 4, 8)]
                rep = trunk_gradient_decomposition(net, x, p)
                worst[tag] = max(worst.get(tag, 0.0), rep.max_deviation)
    ok = max(worst.values()) < 1e-12
    verdict("trunk gradient of L equals the sum of per-term gradients, < 1e-12", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- spectrogram

def test_spectrogram_contract(verdict):
    t = np.arange(16000) / 16000
    shape = spectrogram_1s(np.random.default_rng(0).normal(size=16000)).shape
    peak = np.argmax(spectrogram_1s(np.sin(2 * np.pi * 1000 * t))[:, 4:-4], axis=0)
    n_seg = len(segment_hop(AudioClip(np.zeros(28800), 16000)))
    ok = shape == (256, 250) and bool(np.all(peak == 32)) and n_seg == 5
    verdict("spectrogram 256x250, 1 kHz peak at bin 32, 1.8 s -> 5 segments", ok, f"shape {shape}, peak bins {sorted(set(peak.tolist()))}, {n_seg} segments")
    assert ok


# ---------------------------------------------------------------- headline grid

@pytest.fixture(scope="module")
def headline():
    cfg = load_grid("headline.json", workers=workers())
    t0 = time.time()
    rows = bench.experiment_grid(cfg)
    return cfg, rows, time.time() - t0


def _mean(summary, run):
    return next(s for s in summary if (s["variant"], s["strategy"]) == run)


def test_directional_reproduction(headline, verdict, tmp_path):
    cfg, rows, elapsed = headline
    summary = bench.summarize(rows)
    bench.write_grid_outputs(rows, tmp_path)
    acc = {(s["variant"], s["strategy"]): s for s in summary}
    n0, n0l, n1, n2 = (acc[k] for k in (("n0", "e2e"), ("n0", "late"), ("n1", "e2e"), ("n2", "e2e")))
    uv, ua = acc[("uni-v", "e2e")], acc[("uni-a", "e2e")]
    wins = sum(n0["per_fold"][f] > max(uv["per_fold"][f], ua["per_fold"][f]) for f in cfg.folds)
    m = {k: 100 * v["mean_accuracy"] for k, v in acc.items()}
    d21 = m[("n2", "e2e")] - m[("n1", "e2e")]
    d10 = m[("n1", "e2e")] - m[("n0", "late")]
    d20 = m[("n2", "e2e")] - m[("n0", "e2e")]
    a_ok = wins >= 4
    b_ok = d21 >= -0.5 and d10 >= -0.5 and d20 >= 1.0
    t_ok = elapsed < 30 * 60
    means = ", ".join(f"{v}/{s} {x:.2f}" for (v, s), x in m.items())
    verdict(
        f"(a) N0 e2e beats both uni-modal baselines on >= 4 of {len(cfg.folds)} folds",
        a_ok,
        f"{wins} folds; {means}",
    )
    verdict(
        "(b) N2 >= N1 >= N0 late (-0.5 pt) and N2 - N0 e2e >= +1 pt",
        b_ok,
        f"N2-N1 {d21:+.2f}, N1-N0late {d10:+.2f}, N2-N0e2e {d20:+.2f}",
    )
    verdict(
        f"grid runtime < 30 min ({workers()} worker core(s) available)",
        t_ok,
        f"{elapsed / 60:.1f} min for {len(rows)} trainings",
    )
    assert a_ok and b_ok and t_ok


# ---------------------------------------------------------------- time augmentation

def test_time_augmentation_effect(verdict):
    base = load_grid("timeaug.json", workers=workers())
    aug = load_grid("timeaug.json", workers=workers())
    aug.train.time_augment = True
    off = bench.summarize(bench.experiment_grid(base))
    on = bench.summarize(bench.experiment_grid(aug))
    gains = {}
    for s_off, s_on in zip(off, on):
        gains[f"{s_off['variant']}/{s_off['strategy']}"] = 100 * (s_on["mean_accuracy"] - s_off["mean_accuracy"])
    mean_gain = float(np.mean(list(gains.values())))
    ok = mean_gain >= 0.0
    verdict(
        "time-slice augmentation does not lower mean uni-modal + N0 accuracy (5 seeds)",
        ok,
        f"mean gain {mean_gain:+.2f} pt; " + ", ".join(f"{k} {v:+.2f}" for k, v in gains.items()),
    )
    assert ok


# ---------------------------------------------------------------- reproducibility

def test_csv_reproducibility(headline, verdict, tmp_path):
    cfg, rows, _ = headline
    small = load_grid("headline.json", folds=[cfg.folds[0]], seeds=[cfg.seeds[0]], workers=1)
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        bench.write_grid_outputs(bench.experiment_grid(small), out)
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0] == outs[1]
    subset = [r for r in rows if r["fold"] == cfg.folds[0] and r["seed"] == cfg.seeds[0]]
    matches_grid = bench.rows_to_csv(subset).encode() == outs[0]["results.csv"]
    ok = same and matches_grid
    verdict(
        "identical (config, seed) gives byte-identical CSV outputs",
        ok,
        f"{len(outs[0])} files identical: {same}; serial rerun matches the parallel grid: {matches_grid}",
    )
    assert ok
