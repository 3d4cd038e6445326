"""Accuracy of N0/N1/N2 and the uni-modal baselines as audio fuzziness grows.

    python scripts/fuzziness_sweep.py --rho 0 0.2 0.4 0.6 0.8 --seeds 0 1
"""
import argparse
import json
import os
from pathlib import Path

from mrpn import bench

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "headline.json"))
    ap.add_argument("--rho", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.6, 0.8])
    ap.add_argument("--folds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="results/fuzziness")
    ap.add_argument("--workers", type=int, default=len(os.sched_getaffinity(0)))
    args = ap.parse_args()

    table = []
    for rho in args.rho:
        cfg = bench.GridConfig.from_dict(json.loads(Path(args.config).read_text()))
        cfg.data = cfg.data.with_fuzziness(audio=rho)
        cfg.folds, cfg.seeds, cfg.workers = args.folds, args.seeds, args.workers
        summary = bench.write_grid_outputs(bench.experiment_grid(cfg), os.path.join(args.out, f"rho{rho:g}"))
        row = {f"{s['variant']}/{s['strategy']}": round(100 * s["mean_accuracy"], 2) for s in summary}
        table.append({"rho_audio": rho, **row})
        print(json.dumps(table[-1]))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.json").write_text(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
