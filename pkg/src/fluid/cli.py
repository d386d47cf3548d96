"""Command-line entry point: ``python3 -m fluid <verb> ...``."""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import load_config
from .grad import ConfigurationError


def _common(p):
    p.add_argument("--config", help="key = value config file (supports include = other.cfg)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry, e.g. --set train.epochs=10 (repeatable)")
    p.add_argument("--benchmark", help="shorthand for --set benchmark=...")
    p.add_argument("--scale", choices=["desk", "paper"], help="preset scale")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="fluid", description="Amortized filtering and smoothing experiments.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="simulate a train/test dataset")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--T-test", type=int, help="test horizon; longer than T evaluates extrapolation")

    p = sub.add_parser("train", help="train the filtering/smoothing model, or the particle-filter flows")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--what", choices=["fluid", "pf"], default="fluid")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--shared-summary", choices=["true", "false"])

    p = sub.add_parser("infer", help="draw filtering or smoothing samples")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--obs", help="observation CSV (header of dimension names, one row per step)")
    p.add_argument("--mode", choices=["filter", "smooth"])
    p.add_argument("--method", choices=["fluid", "kalman"])
    p.add_argument("--t", type=int, help="use the first t observations")
    p.add_argument("--n-sample", type=int)
    p.add_argument("--n-traj", type=int)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("pf", help="run the flow-based particle filter")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pf-model")
    p.add_argument("--exact", action="store_true", help="use the closed-form model factors")
    p.add_argument("--bootstrap", action="store_true")
    p.add_argument("--n-particles", type=int)
    p.add_argument("--resampler", choices=["multinomial", "systematic"])
    p.add_argument("--n-traj", type=int)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("evaluate", help="RMSE/MMD/CRPS (and KL against the Kalman filter)")
    _common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--reference", choices=["none", "kalman"], default="none")
    p.add_argument("--model", help="model for KL densities (defaults to the one recorded in the results)")
    p.add_argument("--kl-samples", type=int)

    p = sub.add_parser("ess", help="ESS/RESS of the learned particle-filter factors")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pf-model")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--split", choices=["train", "test"], default="test")
    return ap


FLAG_KEYS = {
    "benchmark": "benchmark", "scale": "scale", "seed": "seed", "n_train": "data.n_train", "n_test": "data.n_test",
    "T": "data.T", "T_test": "data.T_test", "epochs": "train.epochs", "shared_summary": "train.shared_summary",
    "mode": "infer.mode", "method": "infer.method", "n_sample": "infer.n_sample", "n_traj": "infer.n_traj",
    "n_particles": "pf.n_particles", "resampler": "pf.resampler", "kl_samples": "infer.kl_samples",
    "n_samples": "pf.ess_samples",
}


def config_from_args(args):
    overrides = list(args.set)
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if getattr(args, "what", None) == "pf" and getattr(args, "epochs", None) is not None:
        overrides.append(f"pf_train.epochs={args.epochs}")
    return load_config(args.config, overrides)


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    v = args.verb
    if v == "generate":
        return harness.cmd_generate(cfg, args.out)
    if v == "train":
        if args.what == "pf":
            return harness.cmd_train_pf(cfg, args.data, args.out)
        return harness.cmd_train(cfg, args.data, args.out, args.resume)
    if v == "infer":
        if args.data is None and args.obs is None:
            raise ConfigurationError("infer needs --data or --obs")
        return harness.cmd_infer(cfg, args.out, args.model, args.data, args.obs, args.split, args.t)
    if v == "pf":
        return harness.cmd_pf(cfg, args.out, args.data, args.pf_model, args.exact, args.bootstrap, args.split)
    if v == "evaluate":
        return harness.cmd_evaluate(cfg, args.out, args.results, args.data, args.reference, args.model)
    if v == "ess":
        return harness.cmd_ess(cfg, args.out, args.data, args.pf_model, args.split)
    raise AssertionError(v)


def main(argv=None):
    try:
        manifest = run(argv)
    except (ConfigurationError, ValueError, FileNotFoundError) as err:
        print(f"fluid: error: {err}", file=sys.stderr)
        return 2
    print(json.dumps(manifest["summary"], indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
