"""Amortized filtering and backward-recursion smoothing with a trained model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .flows import log_prob, sample
from .io import write_csv
from .trainer import FluidModel


@dataclass
class FilterResult:
    t: int
    samples: np.ndarray  # (N, d_u), physical units
    summary: np.ndarray  # (d_s,)


@dataclass
class SmoothingPaths:
    paths: np.ndarray  # (N, t, d_u), physical units

    @property
    def T(self):
        return self.paths.shape[1]


def _obs(y, model: FluidModel):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None] if model.d_y == 1 else y[None]
    if y.ndim != 2 or y.shape[1] != model.d_y:
        raise ValueError(f"observations must be (t, {model.d_y}), got {y.shape}")
    return y


def summaries(y, model: FluidModel, backward: bool = False) -> np.ndarray:
    """All prefix summaries s_1..s_t in one encoder pass, shape (t, d_s)."""
    y = _obs(y, model)
    ys = model.y_stats.forward(y).astype(model.dtype)
    with G.no_grad():
        return model.summaries(ys[None], backward=backward).data[0]


def _to_physical(z, model):
    return model.u_stats.inverse(np.asarray(z, dtype=np.float64))


def _draw_forward(s, model, n, rng):
    return _to_physical(sample(s[None], model.forward, rng, n=n), model)


def filter_samples(y, model: FluidModel, n_sample: int, rng: np.random.Generator, s=None) -> FilterResult:
    y = _obs(y, model)
    if len(y) < 1:
        raise ValueError("filtering needs t >= 1 observations")
    s = summaries(y, model) if s is None else s
    return FilterResult(len(y), _draw_forward(s[-1], model, n_sample, rng), s[-1])


def filter_all(y, model: FluidModel, n_sample: int, rng: np.random.Generator) -> np.ndarray:
    """Filtering samples for every t = 1..T, shape (T, N, d_u)."""
    s = summaries(y, model)
    return np.stack([_draw_forward(s[t], model, n_sample, rng) for t in range(len(s))])


def backward_paths(terminal, draw, t: int, rng) -> np.ndarray:
    """Paths (N, t, d): slot t-1 holds ``terminal``; slot k is ``draw(k, path[:, k+1], rng)``."""
    N, d = terminal.shape
    paths = np.empty((N, t, d), dtype=np.float64)
    paths[:, -1] = terminal
    for k in range(t - 2, -1, -1):
        paths[:, k] = draw(k, paths[:, k + 1], rng)
    return paths


def smooth_paths(y, model: FluidModel, n_sample: int, rng: np.random.Generator, terminal=None) -> SmoothingPaths:
    """Backward recursion from terminal filtering samples (drawn here unless ``terminal`` is given)."""
    y = _obs(y, model)
    t = len(y)
    if t < 2:
        raise ValueError("smoothing needs t >= 2 observations")
    s = summaries(y, model)
    s_b = s if model.shared_summary else summaries(y, model, backward=True)
    if terminal is None:
        terminal = filter_samples(y, model, n_sample, rng, s=s).samples
    elif terminal.shape != (n_sample, model.d_u):
        raise ValueError(f"terminal samples must be ({n_sample}, {model.d_u})")
    dt = model.dtype

    def draw(k, u_next, rng):
        z_next = model.u_stats.forward(u_next).astype(dt)
        cond = np.concatenate([z_next, np.broadcast_to(s_b[k], (len(z_next), s_b.shape[1]))], axis=1)
        return _to_physical(sample(cond, model.backward, rng), model)

    return SmoothingPaths(backward_paths(terminal, draw, t, rng))


def smoothing_marginal(paths: SmoothingPaths, k: int) -> np.ndarray:
    """Samples of u_k given y_{1:t}; k is 1-based."""
    if not 1 <= k <= paths.T:
        raise IndexError(f"k={k} outside 1..{paths.T}")
    return paths.paths[:, k - 1]


def filter_log_density(model: FluidModel, s_t):
    """Callable mapping physical states (n, d_u) to log q(u | s_t)."""
    dt = model.dtype
    log_jac = model.u_stats.log_scale

    def f(x):
        z = model.u_stats.forward(np.atleast_2d(x)).astype(dt)
        with G.no_grad():
            return np.asarray(log_prob(z, s_t[None], model.forward).data, dtype=np.float64) - log_jac

    return f


# ---------------------------------------------------------------- summaries for export
def sample_summary(samples):
    """Per-step mean, std and 5%/95% quantiles for (K, N, d) samples."""
    samples = np.asarray(samples, dtype=np.float64)
    return (samples.mean(axis=1), samples.std(axis=1),
            np.quantile(samples, 0.05, axis=1), np.quantile(samples, 0.95, axis=1))


def summary_columns(d):
    cols = ["t"]
    for stat in ("mean", "std", "q05", "q95"):
        cols += [f"{stat}_{j}" for j in range(d)]
    return cols


def write_summary_csv(path, samples, schema="posterior_summary", t0: int = 1):
    mean, std, q05, q95 = sample_summary(samples)
    rows = [[t0 + k] + list(mean[k]) + list(std[k]) + list(q05[k]) + list(q95[k]) for k in range(len(mean))]
    return write_csv(path, schema, summary_columns(mean.shape[1]), rows)
