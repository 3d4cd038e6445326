"""Effect of random time slicing on uni-modal and N0 accuracy (variable-length sequences).

    python scripts/time_augmentation.py --out results/timeaug
"""
import argparse
import json
import os
from pathlib import Path

from mrpn import bench

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "timeaug.json"))
    ap.add_argument("--out", default="results/timeaug")
    ap.add_argument("--workers", type=int, default=len(os.sched_getaffinity(0)))
    args = ap.parse_args()

    results = {}
    for flag in (False, True):
        cfg = bench.GridConfig.from_dict(json.loads(Path(args.config).read_text()))
        cfg.workers = args.workers
        cfg.train.time_augment = flag
        rows = bench.experiment_grid(cfg)
        results[flag] = bench.write_grid_outputs(rows, os.path.join(args.out, "augment" if flag else "plain"))

    gains = []
    for off, on in zip(results[False], results[True]):
        g = 100 * (on["mean_accuracy"] - off["mean_accuracy"])
        gains.append(g)
        print(f"{off['variant']:>6}/{off['strategy']:<4} plain {100 * off['mean_accuracy']:6.2f}  sliced {100 * on['mean_accuracy']:6.2f}  gain {g:+.2f}")
    print(f"mean gain {sum(gains) / len(gains):+.2f} pt")


if __name__ == "__main__":
    main()
