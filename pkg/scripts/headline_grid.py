"""Headline experiment: uni-modal baselines, N0 end-to-end / late fusion, N1 and N2 on audio-fuzzy data.

    python scripts/headline_grid.py --out results/headline [--config scripts/configs/headline.json]
"""
import argparse
import json
import os
import time
from pathlib import Path

from mrpn import bench

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "headline.json"))
    ap.add_argument("--out", default="results/headline")
    ap.add_argument("--workers", type=int, default=len(os.sched_getaffinity(0)))
    args = ap.parse_args()

    cfg = bench.GridConfig.from_dict(json.loads(Path(args.config).read_text()))
    cfg.workers = args.workers
    t0 = time.time()
    rows = bench.experiment_grid(cfg)
    summary = bench.write_grid_outputs(rows, args.out)
    elapsed = time.time() - t0

    acc = {(s["variant"], s["strategy"]): s for s in summary}
    print(f"{len(rows)} trainings in {elapsed / 60:.1f} min on {cfg.workers} worker(s)")
    header = "fold " + " ".join(f"{v + '/' + s:>10}" for v, s in acc)
    print(header)
    for f in cfg.folds:
        print(f"{f:4d} " + " ".join(f"{100 * a['per_fold'][f]:10.2f}" for a in acc.values()))
    print("mean " + " ".join(f"{100 * a['mean_accuracy']:10.2f}" for a in acc.values()))

    n0, n0l, n1, n2 = (100 * acc[k]["mean_accuracy"] for k in (("n0", "e2e"), ("n0", "late"), ("n1", "e2e"), ("n2", "e2e")))
    uv, ua, e2e = acc[("uni-v", "e2e")], acc[("uni-a", "e2e")], acc[("n0", "e2e")]
    wins = sum(e2e["per_fold"][f] > max(uv["per_fold"][f], ua["per_fold"][f]) for f in cfg.folds)
    print(f"N0 e2e beats both uni-modal baselines on {wins}/{len(cfg.folds)} folds")
    print(f"N2-N1 {n2 - n1:+.2f}  N1-N0late {n1 - n0l:+.2f}  N2-N0e2e {n2 - n0:+.2f}")


if __name__ == "__main__":
    main()
