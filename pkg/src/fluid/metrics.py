"""Sample-based accuracy metrics: RMSE of the sample mean, Gaussian-kernel MMD and CRPS.

All functions take ``samples`` of shape (K, N, d) (K steps, N samples) and ``truth``
of shape (K, d), and return ``(aggregate, per_step_series)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check(samples, truth):
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if truth.ndim == 1:
        truth = truth[None]
    if samples.ndim != 3 or samples.shape[0] == 0 or samples.shape[1] == 0:
        raise ValueError("samples must be a non-empty (K, N, d) array")
    if truth.shape != (samples.shape[0], samples.shape[2]):
        raise ValueError(f"truth shape {truth.shape} does not match samples {samples.shape}")
    return samples, truth


def rmse(samples, truth):
    samples, truth = _check(samples, truth)
    sq = (samples.mean(axis=1) - truth) ** 2
    return float(np.sqrt(sq.mean())), np.sqrt(sq.mean(axis=1))


def gaussian_kernel(a, b, sigma=2.0):
    d2 = np.sum((a[..., :, None, :] - b[..., None, :, :]) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma**2))


def mmd(samples, truth, sigma: float = 2.0):
    """Squared MMD between the empirical sample measure and a point mass at the truth."""
    samples, truth = _check(samples, truth)
    n = samples.shape[1]
    series = np.empty(samples.shape[0])
    for k in range(samples.shape[0]):
        x = samples[k]
        kxx = gaussian_kernel(x, x, sigma).sum() / n**2
        kxy = gaussian_kernel(x, truth[k][None], sigma).sum() / n
        series[k] = max(kxx - 2.0 * kxy + 1.0, 0.0)
    return float(series.mean()), series


def crps_energy(x, y):
    """Energy-form CRPS of 1-D samples ``x`` against scalar ``y``."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    # sum_{i,j} |x_i - x_j| from sorted order statistics
    pair = 2.0 * np.sum((2 * np.arange(n) - n + 1) * x)
    return float(np.mean(np.abs(x - y)) - pair / (2.0 * n * n))


def crps(samples, truth):
    samples, truth = _check(samples, truth)
    K, n, d = samples.shape
    xs = np.sort(samples, axis=1)
    w = (2 * np.arange(n) - n + 1)[None, :, None]
    pair = 2.0 * np.sum(w * xs, axis=1)  # (K, d)
    per = np.mean(np.abs(samples - truth[:, None, :]), axis=1) - pair / (2.0 * n * n)
    series = per.mean(axis=1)
    return float(series.mean()), series


@dataclass
class MetricReport:
    rmse: float
    mmd: float
    crps: float
    rmse_series: np.ndarray
    mmd_series: np.ndarray
    crps_series: np.ndarray

    def rows(self):
        for k in range(len(self.rmse_series)):
            yield k + 1, self.rmse_series[k], self.mmd_series[k], self.crps_series[k]


def evaluate_samples(samples, truth, sigma: float = 2.0) -> MetricReport:
    r, rs = rmse(samples, truth)
    m, ms = mmd(samples, truth, sigma)
    c, cs = crps(samples, truth)
    return MetricReport(r, m, c, rs, ms, cs)


def average_reports(reports) -> MetricReport:
    """Mean over trajectories, both aggregates and per-step series."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))  # noqa: E731
    series = lambda name: np.mean([getattr(r, name) for r in reports], axis=0)  # noqa: E731
    return MetricReport(mean("rmse"), mean("mmd"), mean("crps"),
                        series("rmse_series"), series("mmd_series"), series("crps_series"))
