"""Command-line entry point: ``mrpn <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import bench, preproc, synthlab
from .errors import MRPNError
from .fusion_nets import load_checkpoint, save_checkpoint

VARIANTS = ("n0", "n1", "n2", "uni-v", "uni-a")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _seed_override(value):
    env = os.environ.get("MRPN_SEED")
    return int(env) if env not in (None, "") else value


def _data_config(d) -> synthlab.SynthConfig:
    d = dict(d.get("data", d))
    d["seed"] = _seed_override(d.get("seed", 0))
    return synthlab.SynthConfig.from_dict(d)


def cmd_gen_data(args):
    cfg = _data_config(_read_json(args.config))
    samples = synthlab.generate(cfg)
    manifest = synthlab.write_dataset(samples, args.out, cfg)
    print(f"wrote {len(samples)} samples to {manifest}")


def cmd_train(args):
    raw = _read_json(args.config)
    grid = bench.GridConfig.from_dict({k: v for k, v in raw.items() if k in ("data", "model", "train")})
    grid.data = _data_config(raw)
    seed = _seed_override(raw.get("seed", 0))
    fold = args.fold if args.fold is not None else raw.get("fold", 0)
    samples = synthlab.generate(grid.data)
    tr, va = synthlab.actor_split(samples, fold, grid.data.n_actors)
    plan = bench.TrainPlan(args.strategy, grid.train, fold, seed)
    t0 = time.time()
    if args.variant.startswith("uni"):
        if args.strategy == "late":
            raise MRPNError("late fusion does not apply to uni-modal networks")
        like = bench.build_run("n0", grid, np.random.default_rng(0))
        net, rep = bench.train_unimodal(bench.uni_modality(args.variant, like.modalities), like, tr, va, plan)
    else:
        net = bench.build_run(args.variant, grid, bench.streams(seed, fold, f"{bench.RUN_ALIASES[args.variant]}-{args.strategy}")["init"])
        net, rep = bench.train(net, tr, va, plan)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"{args.variant}_{args.strategy}_fold{fold}_seed{seed}.ckpt")
    save_checkpoint(net, ckpt, extra={"data": grid.data.to_dict(), "fold": fold, "seed": seed, "strategy": args.strategy})
    report = {**rep.to_dict(), "variant": args.variant, "strategy": args.strategy, "seconds": time.time() - t0}
    with open(os.path.splitext(ckpt)[0] + ".json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"{args.variant}/{args.strategy} fold {fold} seed {seed}: accuracy {rep.accuracy:.4f} after {rep.epochs} epochs")
    print(f"checkpoint {ckpt}")


def cmd_eval(args):
    net, header = load_checkpoint(args.checkpoint)
    extra = header.get("extra", {})
    if "data" not in extra:
        raise MRPNError("checkpoint carries no data config; pass one with --config")
    data = synthlab.SynthConfig.from_dict(extra["data"]) if args.config is None else _data_config(_read_json(args.config))
    fold = args.fold if args.fold is not None else extra.get("fold", 0)
    _, va = synthlab.actor_split(synthlab.generate(data), fold, data.n_actors)
    rep = bench.evaluate(net, bench.Dataset(va, net.modalities), fold)
    print(f"accuracy {rep.accuracy:.4f} on {len(va)} samples (fold {fold})")
    for row in rep.confusion:
        print(" ".join(f"{x:4d}" for x in row))


def cmd_grid(args):
    raw = _read_json(args.config)
    cfg = bench.GridConfig.from_dict(raw)
    cfg.data.seed = _seed_override(cfg.data.seed)
    if args.workers is not None:
        cfg.workers = args.workers
    t0 = time.time()
    rows = bench.experiment_grid(cfg)
    summary = bench.write_grid_outputs(rows, args.out)
    for s in summary:
        print(f"{s['variant']:>6}/{s['strategy']:<4} n={s['n']:3d}  acc {100 * s['mean_accuracy']:6.2f} ± {100 * s['std_accuracy']:5.2f}")
    print(f"{len(rows)} runs in {time.time() - t0:.1f} s -> {args.out}")


def cmd_gradcheck(args):
    from .checks import OPS, loss_gradchecks, network_gradcheck, op_gradcheck

    t0 = time.time()
    worst_op = max(max(op_gradcheck(n, s) for n in OPS) for s in range(args.seeds))
    worst_op = max(worst_op, *(e for s in range(args.seeds) for e in loss_gradchecks(s).values()))
    print(f"ops: max relative error {worst_op:.2e}")
    worst = worst_op
    for tag in ("N0", "N1", "N2"):
        for agg in ("mean_pool", "simple_recurrent"):
            errs, over = 0.0, set()
            for seed in range(args.seeds):
                for path, e in network_gradcheck(tag, agg, seed).items():
                    errs = max(errs, e)
                    if e >= args.tol:
                        over.add(path)
            worst = max(worst, errs)
            flag = f"  over {args.tol:g}: {', '.join(sorted(over))}" if over else ""
            print(f"{tag} {agg}: max relative error {errs:.2e}{flag}")
    print(f"{args.seeds} seeds in {time.time() - t0:.1f} s")
    return 0 if worst < args.tol else 1


def cmd_spectrogram(args):
    clip = preproc.load_wav(args.input)
    specs = preproc.clip_spectrograms(clip, log_mel=args.log_mel)
    m = specs[args.segment]
    preproc.write_raw_matrix(args.out, m)
    if args.pgm:
        preproc.write_pgm(args.pgm, np.log1p(m) if not args.log_mel else m)
    print(f"{len(specs)} segments; wrote segment {args.segment} {m.shape[0]}x{m.shape[1]} to {args.out}")


def make_parser():
    p = argparse.ArgumentParser(prog="mrpn", description="Multi-modal residual perceptron networks on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one network on one fold")
    t.add_argument("--variant", choices=VARIANTS, required=True)
    t.add_argument("--strategy", choices=bench.STRATEGIES, default="e2e")
    t.add_argument("--config", required=True)
    t.add_argument("--fold", type=int)
    t.add_argument("--out", default="runs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its validation fold")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--fold", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("grid", help="run a variants x strategies x folds x seeds sweep")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default="grid_out")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_grid)

    c = sub.add_parser("gradcheck", help="finite-difference check of every network variant")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("spectrogram", help="WAV -> 256x250 magnitude spectrogram (raw matrix)")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--pgm")
    s.add_argument("--log-mel", action="store_true")
    s.add_argument("--segment", type=int, default=0)
    s.set_defaults(func=cmd_spectrogram)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except (MRPNError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
