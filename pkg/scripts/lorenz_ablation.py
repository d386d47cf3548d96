"""Shared vs independent summary networks on single-scale Lorenz-96 (desk scale).

    python3 scripts/lorenz_ablation.py [--seed 0] [--epochs 50]
"""
import argparse
from dataclasses import replace

from fluid.config import preset
from fluid.experiments import shared_summary_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()
    cfg = preset("lorenz", "desk")
    cfg.seed = args.seed
    cfg.train = replace(cfg.train, seed=args.seed, epochs=args.epochs or cfg.train.epochs)
    r = shared_summary_ablation(cfg, verbose=True)
    for name, v in r.items():
        print(f"{name:12s} filter RMSE {v['filter_rmse']:.4f}  smooth RMSE {v['smooth_rmse']:.4f}")


if __name__ == "__main__":
    main()
