"""Desk-scale reproduction runs shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig, make_spec, preset
from .gaussian import kalman_filter, kl_gaussian_vs_flow, rts_smoother
from .inference import filter_all, filter_log_density, smooth_paths, summaries
from .ssm import build_advdiff, make_dataset
from .trainer import train


def _rmse(est, truth):
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def posterior_rmse(model, test, n_sample, rng, smooth=True):
    """Mean over test trajectories of the filtering (and smoothing) posterior-mean RMSE."""
    rf, rs = [], []
    for y, u in zip(np.asarray(test.y, np.float64), np.asarray(test.u, np.float64)):
        rf.append(_rmse(filter_all(y, model, n_sample, rng).mean(1), u))
        if smooth:
            rs.append(_rmse(smooth_paths(y, model, n_sample, rng).paths.mean(0), u))
    return float(np.mean(rf)), (float(np.mean(rs)) if smooth else float("nan"))


def case1_desk(cfg: ExperimentConfig | None = None, kl_samples: int = 200, verbose=False) -> dict:
    """Train on Case 1 at desk scale and compare with the Kalman filter and RTS smoother."""
    cfg = cfg or preset("case1", "desk")
    spec = make_spec(cfg)
    ssm = build_advdiff(spec)
    d = cfg.data
    ds = make_dataset(spec, d.n_train, d.n_test, d.T, cfg.seed, d.T_test)
    t0 = time.perf_counter()
    res = train(ds.train, replace(cfg.train, verbose=verbose), cfg.arch, ds.u_stats, ds.y_stats)
    train_time = time.perf_counter() - t0
    model = res.model
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    kl, kal_f, kal_s = [], [], []
    for y, u in zip(np.asarray(ds.test.y, np.float64), np.asarray(ds.test.u, np.float64)):
        track = kalman_filter(y, ssm)
        s = summaries(y, model)
        kl.append([kl_gaussian_vs_flow(b, filter_log_density(model, s[t]), kl_samples, rng)[0]
                   for t, b in enumerate(track.filtered)])
        kal_f.append(_rmse(track.means, u))
        kal_s.append(_rmse(np.stack([b.mean for b in rts_smoother(track, ssm)]), u))
    f_rmse, s_rmse = posterior_rmse(model, ds.test, cfg.infer.n_sample, rng)
    kl = np.asarray(kl)
    return {"kl": float(kl.mean()), "kl_series": kl.mean(0), "filter_rmse": f_rmse, "smooth_rmse": s_rmse,
            "kalman_rmse": float(np.mean(kal_f)), "rts_rmse": float(np.mean(kal_s)), "train_time": train_time,
            "history": res.history, "model": model}


def shared_summary_ablation(cfg: ExperimentConfig | None = None, verbose=False) -> dict:
    """Filtering and smoothing RMSE with a shared summary network versus two independent ones."""
    cfg = cfg or preset("lorenz", "desk")
    spec = make_spec(cfg)
    d = cfg.data
    ds = make_dataset(spec, d.n_train, d.n_test, d.T, cfg.seed, d.T_test)
    out = {}
    for shared in (True, False):
        tcfg = replace(cfg.train, shared_summary=shared, verbose=verbose)
        model = train(ds.train, tcfg, cfg.arch, ds.u_stats, ds.y_stats).model
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(8,)))
        f, s = posterior_rmse(model, ds.test, cfg.infer.n_sample, rng)
        out["shared" if shared else "independent"] = {"filter_rmse": f, "smooth_rmse": s}
    return out
