"""Experiment commands behind the CLI: generate, train, infer, pf, evaluate, ess.

Every command writes its artifacts plus a ``manifest.json`` into an output directory.
In deterministic mode the manifest carries no wall-clock data, so repeated runs are
byte-identical.
"""
from __future__ import annotations

import json
import platform
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .config import ExperimentConfig, dump_config
from .gaussian import kalman_filter, kl_gaussian_vs_flow, rts_kernel_sampler, rts_smoother
from .grad import ConfigurationError
from .inference import backward_paths, filter_log_density, smooth_paths, summaries, write_summary_csv, _draw_forward
from .io import load_container, load_dataset, read_observation_csv, save_container, save_dataset, write_csv
from .metrics import average_reports, evaluate_samples
from .particle import (
    GaussianFactors, PFModel, ess_diagnostic, run_pf, train_pf_flows, transition_triples, write_ress_csv,
)
from .ssm import AdvDiffSpec, BurgersSpec, LorenzSpec, SVSpec, Trajectories, build_advdiff, make_dataset
from .trainer import load_model, resume, save_model, train

RESULTS_FORMAT = "fluid-results"


# ---------------------------------------------------------------- manifest
def versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "fluid": own}


class Run:
    """Collects artifacts and timings for one command and writes the manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig, out_dir, inputs=None):
        self.command, self.cfg = command, cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {k: str(v) for k, v in (inputs or {}).items() if v is not None}
        self.artifacts = {}
        self.t0 = time.perf_counter()

    def path(self, name):
        self.artifacts[name] = name
        return self.out / name

    def finish(self, summary=None):
        (self.out / "config.txt").write_text(dump_config(self.cfg))
        self.artifacts.setdefault("config.txt", "config.txt")
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "seeds": {"seed": self.cfg.seed},
            "inputs": self.inputs,
            "artifacts": dict(sorted(self.artifacts.items())),
            "timings": {} if self.cfg.deterministic else {"wall_time": time.perf_counter() - self.t0},
            "versions": versions(),
            "summary": summary or {},
        }
        text = json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable)
        (self.out / "manifest.json").write_text(text + "\n")
        return manifest


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _rng(cfg: ExperimentConfig, stream: int):
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(stream,)))


def _split(ds, split: str) -> Trajectories:
    data = ds.test if split == "test" else ds.train
    if data is None:
        raise ConfigurationError(f"dataset has no {split} split")
    return data


def linear_model(spec):
    if not isinstance(spec, AdvDiffSpec):
        raise ConfigurationError(f"{type(spec).__name__} has no linear-Gaussian reference")
    return build_advdiff(spec)


def exact_factors(spec):
    """Explicit transition and likelihood densities where the benchmark has them."""
    if isinstance(spec, AdvDiffSpec):
        return GaussianFactors(build_advdiff(spec))
    if isinstance(spec, SVSpec):
        return spec
    raise ConfigurationError(f"{type(spec).__name__} has no explicit transition/likelihood densities")


def initial_sampler(spec):
    if isinstance(spec, AdvDiffSpec):
        return GaussianFactors(build_advdiff(spec)).initial_sample
    if isinstance(spec, SVSpec):
        return spec.initial_sample
    if isinstance(spec, LorenzSpec):
        return lambda n, rng: spec.initial_state(n, rng)[0]
    if isinstance(spec, BurgersSpec):
        return lambda n, rng: np.broadcast_to(spec.initial_state(), (n, spec.n_space)).copy()
    raise ConfigurationError(f"no initial distribution for {type(spec).__name__}")


# ---------------------------------------------------------------- generate
def cmd_generate(cfg: ExperimentConfig, out_dir):
    from .config import make_spec

    spec = make_spec(cfg)
    d = cfg.data
    ds = make_dataset(spec, d.n_train, d.n_test, d.T, cfg.seed, d.T_test)
    run = Run("generate", cfg, out_dir)
    save_dataset(run.path("dataset.npz"), ds)
    shapes = {"train_u": list(ds.train.u.shape), "train_y": list(ds.train.y.shape)}
    if ds.test is not None:
        shapes.update(test_u=list(ds.test.u.shape), test_y=list(ds.test.y.shape))
    return run.finish({"shapes": shapes})


# ---------------------------------------------------------------- train
def cmd_train(cfg: ExperimentConfig, data_path, out_dir, resume_from=None):
    ds = load_dataset(data_path)
    run = Run("train", cfg, out_dir, {"data": data_path, "resume": resume_from})
    tcfg = replace(cfg.train, out_dir=str(run.out))
    if resume_from:
        res = resume(resume_from, ds.train, tcfg)
    else:
        res = train(ds.train, tcfg, cfg.arch, ds.u_stats, ds.y_stats)
    save_model(run.path("model.npz"), res.model)
    run.path("train_log.csv")
    run.path("checkpoint.npz")
    last = res.history[-1] if res.history else {}
    first = res.history[0] if res.history else {}
    return run.finish({"epochs": len(res.history), "first_val_nll": first.get("val_nll"),
                       "final_val_nll": last.get("val_nll"), "shared_summary": res.model.shared_summary})


def cmd_train_pf(cfg: ExperimentConfig, data_path, out_dir):
    ds = load_dataset(data_path)
    run = Run("train-pf", cfg, out_dir, {"data": data_path})
    model = train_pf_flows(*transition_triples(ds.train), cfg.pf_train, cfg.arch)
    model.save(run.path("pf_model.npz"))
    rows = []
    hist = model.meta["history"]
    for e in range(len(hist["obs"])):
        rows.append([e + 1] + [hist[k][e] for k in ("obs", "prop")])
    write_csv(run.path("pf_train_log.csv"), "pf_train_log", ["epoch", "obs_nll", "prop_nll"], rows)
    return run.finish({"final_obs_nll": hist["obs"][-1], "final_prop_nll": hist["prop"][-1]})


# ---------------------------------------------------------------- infer
def _observations(ds, obs_path, split, n_traj):
    if obs_path is not None:
        _, y = read_observation_csv(obs_path)
        return y[None], None
    data = _split(ds, split)
    n = data.n if n_traj is None else min(n_traj, data.n)
    return np.asarray(data.y[:n], np.float64), np.asarray(data.u[:n], np.float64)


def _step_rng(cfg, i, t):
    """Independent stream per (trajectory, step) so filtering at T and the smoothing terminal coincide."""
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2, i, t)))


def _kalman_samples(y, ssm, mode, n, rngs):
    track = kalman_filter(y, ssm)
    T = len(y)
    if mode == "filter":
        return np.stack([b.sample(n, rngs(t)) for t, b in enumerate(track.filtered)])
    terminal = track.filtered[-1].sample(n, rngs(T - 1))
    return backward_paths(terminal, rts_kernel_sampler(track, ssm), T, rngs(-1)).transpose(1, 0, 2)


def _fluid_samples(y, model, mode, n, rngs):
    T = len(y)
    s = summaries(y, model)
    if mode == "filter":
        return np.stack([_draw_forward(s[t], model, n, rngs(t)) for t in range(T)])
    terminal = _draw_forward(s[-1], model, n, rngs(T - 1))
    return smooth_paths(y, model, n, rngs(-1), terminal=terminal).paths.transpose(1, 0, 2)


def cmd_infer(cfg: ExperimentConfig, out_dir, model_path=None, data_path=None, obs_path=None, split="test",
              t: int | None = None):
    ic = cfg.infer
    if ic.mode not in ("filter", "smooth"):
        raise ConfigurationError(f"mode must be filter or smooth, got {ic.mode!r}")
    ds = load_dataset(data_path) if data_path else None
    ys, us = _observations(ds, obs_path, split, ic.n_traj)
    if t is not None:
        if not 1 <= t <= ys.shape[1]:
            raise ConfigurationError(f"t={t} outside 1..{ys.shape[1]}")
        ys = ys[:, :t]
        us = None if us is None else us[:, :t]
    if ic.method == "fluid":
        if model_path is None:
            raise ConfigurationError("fluid inference needs --model")
        model = load_model(model_path)
        if ys.shape[-1] != model.d_y:
            raise ConfigurationError(f"observations have {ys.shape[-1]} dims, model expects {model.d_y}")
        draw = lambda y, rngs: _fluid_samples(y, model, ic.mode, ic.n_sample, rngs)  # noqa: E731
    elif ic.method == "kalman":
        if ds is None:
            raise ConfigurationError("kalman inference needs --data for the model specification")
        ssm = linear_model(ds.spec)
        draw = lambda y, rngs: _kalman_samples(y, ssm, ic.mode, ic.n_sample, rngs)  # noqa: E731
    else:
        raise ConfigurationError(f"unknown inference method {ic.method!r}")
    run = Run("infer", cfg, out_dir, {"model": model_path, "data": data_path, "obs": obs_path})
    samples = []
    for i, y in enumerate(ys):
        s = draw(y, lambda t, i=i: _step_rng(cfg, i, t if t >= 0 else 2**31))
        samples.append(s.astype(np.float32))
        write_summary_csv(run.path(f"{ic.mode}_summary_{i:03d}.csv"), s)
    header = {"format": RESULTS_FORMAT, "method": ic.method, "mode": ic.mode, "model": model_path,
              "split": split}
    arrays = {"samples": np.stack(samples)}
    if us is not None:
        arrays["truth"] = us
    save_container(run.path("results.npz"), header, arrays)
    return run.finish({"n_traj": len(ys), "T": int(ys.shape[1])})


# ---------------------------------------------------------------- particle filter
def cmd_pf(cfg: ExperimentConfig, out_dir, data_path, pf_model_path=None, exact=False, bootstrap=False,
           split="test"):
    ds = load_dataset(data_path)
    data = _split(ds, split)
    n_traj = data.n if cfg.infer.n_traj is None else min(cfg.infer.n_traj, data.n)
    factors = exact_factors(ds.spec) if (exact or pf_model_path is None) else None
    if factors is None:
        model = PFModel.load(pf_model_path)
        truth_factors = None
        try:
            truth_factors = exact_factors(ds.spec)
        except ConfigurationError:
            pass
    else:
        model, truth_factors = factors, factors
    init = initial_sampler(ds.spec)
    run = Run("pf", cfg, out_dir, {"data": data_path, "pf_model": pf_model_path})
    rng = _rng(cfg, 3)
    n_keep = min(cfg.infer.n_sample, cfg.pf.n_particles)
    samples, ress = [], []
    for i in range(n_traj):
        y = np.asarray(data.y[i], np.float64)
        ens = run_pf(y, init, model, cfg.pf.n_particles, rng, cfg.pf.resampler, exact=truth_factors,
                     bootstrap=bootstrap)
        write_ress_csv(run.path(f"pf_ress_{i:03d}.csv"), ens)
        samples.append(np.stack([e.particles[:n_keep] for e in ens]).astype(np.float32))
        ress.append([e.ress for e in ens])
    header = {"format": RESULTS_FORMAT, "method": "pf-exact" if factors is not None else "pf", "mode": "filter",
              "model": pf_model_path, "split": split}
    save_container(run.path("results.npz"), header,
                   {"samples": np.stack(samples), "truth": np.asarray(data.u[:n_traj], np.float64),
                    "ress": np.asarray(ress)})
    return run.finish({"n_traj": n_traj, "mean_ress": float(np.nanmean(ress)) if np.isfinite(ress).any() else None})


# ---------------------------------------------------------------- evaluate
def _kl_series(results_header, ds, ys, cfg, rng, model_path=None):
    ssm = linear_model(ds.spec)
    method = results_header["method"]
    K = ys.shape[1]
    kl = np.zeros((len(ys), K))
    se2 = np.zeros((len(ys), K))
    if method == "kalman":
        # the sampled density is the reference itself
        return kl.mean(0), np.sqrt(se2.sum(0)) / len(ys)
    if method != "fluid":
        raise ConfigurationError(f"KL needs a density; method {method!r} only provides samples")
    model = load_model(model_path or results_header["model"])
    for i, y in enumerate(ys):
        track = kalman_filter(y, ssm)
        s = summaries(y, model)
        for k in range(K):
            est, se = kl_gaussian_vs_flow(track.filtered[k], filter_log_density(model, s[k]), cfg.infer.kl_samples,
                                          rng)
            kl[i, k], se2[i, k] = est, se**2
    return kl.mean(0), np.sqrt(se2.sum(0)) / len(ys)


def cmd_evaluate(cfg: ExperimentConfig, out_dir, results_path, data_path, reference="none", model_path=None):
    header, arrays = load_container(results_path)
    if header.get("format") != RESULTS_FORMAT:
        raise ConfigurationError(f"{results_path} is not an inference results container")
    samples = np.asarray(arrays["samples"], np.float64)
    if samples.size == 0 or len(samples) == 0:
        raise ValueError("results contain no samples")
    truth = arrays.get("truth")
    if truth is None:
        raise ConfigurationError("results carry no ground truth; evaluate needs simulated data")
    if truth.shape != (samples.shape[0], samples.shape[1], samples.shape[3]):
        raise ValueError(f"truth shape {truth.shape} does not match samples {samples.shape}")
    ds = load_dataset(data_path)
    run = Run("evaluate", cfg, out_dir, {"results": results_path, "data": data_path, "model": model_path})
    reports = [evaluate_samples(s, u) for s, u in zip(samples, truth)]
    avg = average_reports(reports)
    write_csv(run.path("metrics.csv"), "metrics", ["step", "rmse", "mmd", "crps"], list(avg.rows()))
    write_csv(run.path("metrics_traj.csv"), "metrics_traj", ["traj", "rmse", "mmd", "crps"],
              [[i, r.rmse, r.mmd, r.crps] for i, r in enumerate(reports)])
    summary = {"rmse": avg.rmse, "mmd": avg.mmd, "crps": avg.crps, "method": header["method"],
               "mode": header["mode"]}
    if reference == "kalman":
        split = header.get("split", "test")
        ys = np.asarray(_split(ds, split).y[:len(samples), :samples.shape[1]], np.float64)
        ssm = linear_model(ds.spec)
        kal = []
        for y, u in zip(ys, truth):
            if header["mode"] == "filter":
                means = kalman_filter(y, ssm).means
            else:
                means = np.stack([b.mean for b in rts_smoother(kalman_filter(y, ssm), ssm)])
            kal.append(np.sqrt(np.mean((means - u) ** 2)))
        summary["kalman_rmse"] = float(np.mean(kal))
        if header["mode"] == "filter":
            kl, se = _kl_series(header, ds, ys, cfg, _rng(cfg, 4), model_path)
            write_csv(run.path("kl.csv"), "kl", ["step", "kl", "se"],
                      [[k + 1, kl[k], se[k]] for k in range(len(kl))])
            summary["kl"] = float(kl.mean())
            summary["kl_se"] = float(np.sqrt(np.sum(se**2)) / len(se))
    elif reference != "none":
        raise ConfigurationError(f"unknown reference {reference!r}")
    return run.finish(summary)


# ---------------------------------------------------------------- ESS diagnostic
def cmd_ess(cfg: ExperimentConfig, out_dir, data_path, pf_model_path=None, split="test"):
    ds = load_dataset(data_path)
    exact = exact_factors(ds.spec)
    model = PFModel.load(pf_model_path) if pf_model_path else exact
    data = _split(ds, split)
    pool = np.asarray(data.u[:, :-1], np.float64).reshape(-1, data.u.shape[-1])
    rng = _rng(cfg, 5)
    u_prev = pool[rng.integers(0, len(pool), cfg.pf.ess_samples)]
    res = ess_diagnostic(u_prev, exact, model, rng)
    run = Run("ess", cfg, out_dir, {"data": data_path, "pf_model": pf_model_path})
    write_csv(run.path("ess.csv"), "ess", ["n", "ess", "ress", "chi2"], [[res.n, res.ess, res.ress, res.chi2]])
    return run.finish({"ess": res.ess, "ress": res.ress, "chi2": res.chi2})

