"""Case 1 at desk scale: flow filter vs Kalman, flow smoother vs RTS.

    python3 scripts/case1_desk.py [--seed 0] [--epochs 50] [--out kl.csv]
"""
import argparse
from dataclasses import replace

import numpy as np

from fluid.config import preset
from fluid.experiments import case1_desk
from fluid.io import write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--kl-samples", type=int, default=200)
    ap.add_argument("--out", default=None, help="optional CSV for the per-step KL series")
    args = ap.parse_args()
    cfg = preset("case1", "desk")
    cfg.seed = args.seed
    cfg.train = replace(cfg.train, seed=args.seed, epochs=args.epochs or cfg.train.epochs)
    r = case1_desk(cfg, kl_samples=args.kl_samples, verbose=True)
    print(f"KL(Kalman || flow), mean over steps: {r['kl']:.4f}")
    print(f"filter RMSE  flow {r['filter_rmse']:.4f}  Kalman {r['kalman_rmse']:.4f}")
    print(f"smooth RMSE  flow {r['smooth_rmse']:.4f}  RTS    {r['rts_rmse']:.4f}")
    print(f"training time {r['train_time']:.0f}s")
    if args.out:
        series = r["kl_series"]
        write_csv(args.out, "kl_series", ["step", "kl"], np.column_stack([np.arange(1, len(series) + 1), series]))


if __name__ == "__main__":
    main()
