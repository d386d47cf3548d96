"""Closed-form linear-Gaussian references: Kalman filter, RTS backward kernel and
smoother, one-step posterior, predictive density, and KL helpers.

Time convention: the prior (mu, Sigma) describes u_0; observations start at t=1,
so the first filter step is a prediction followed by an update with y_1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass
class LinearSSM:
    M: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        for name in ("M", "H", "Q", "R", "Sigma"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        n, ny = self.M.shape[0], self.H.shape[0]
        shapes = {"M": (n, n), "H": (ny, n), "Q": (n, n), "R": (ny, ny), "Sigma": (n, n)}
        for name, shp in shapes.items():
            if getattr(self, name).shape != shp:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if self.mu.shape != (n,):
            raise ValueError("mu shape mismatch")
        for name in ("Q", "R", "Sigma"):
            A = getattr(self, name)
            if not np.allclose(A, A.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def n_y(self):
        return self.H.shape[0]


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = symmetrize(np.atleast_2d(np.asarray(self.cov, dtype=np.float64)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = psd_sqrt(self.cov)
        return self.mean + rng.standard_normal((n, len(self.mean))) @ L.T

    def logpdf(self, x) -> np.ndarray:
        return gaussian_logpdf(x, self.mean, self.cov)


def symmetrize(A):
    return 0.5 * (A + A.T)


def cholesky(A) -> np.ndarray:
    """Cholesky factor with jitter escalation (1e-10 up to 1e-6, relative to the diagonal scale)."""
    A = symmetrize(np.asarray(A, dtype=np.float64))
    scale = float(np.mean(np.abs(np.diag(A))))
    if not scale > 0:
        raise SingularMatrixError("matrix has an all-zero diagonal")
    for j in _JITTERS:
        try:
            return np.linalg.cholesky(A + j * scale * np.eye(len(A)))
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError("matrix not positive definite even after jitter 1e-6")


def psd_sqrt(A) -> np.ndarray:
    """A factor L with L L^T = A that tolerates singular PSD matrices."""
    w, V = np.linalg.eigh(symmetrize(A))
    return V * np.sqrt(np.clip(w, 0.0, None))


def chol_solve(A, B) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A."""
    L = cholesky(A)
    Z = np.linalg.solve(L, B)
    return np.linalg.solve(L.T, Z)


def gaussian_logpdf(x, mean, cov) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    L = cholesky(cov)
    z = np.linalg.solve(L, (x - mean).T)
    return -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * len(mean) * LOG_2PI


# ---------------------------------------------------------------- filter
def kalman_predict(belief: GaussianBelief, ssm: LinearSSM) -> GaussianBelief:
    M = ssm.M
    return GaussianBelief(M @ belief.mean, M @ belief.cov @ M.T + ssm.Q)


def kalman_update(predicted: GaussianBelief, y, ssm: LinearSSM) -> GaussianBelief:
    H, R = ssm.H, ssm.R
    P = predicted.cov
    S = H @ P @ H.T + R
    try:
        K = chol_solve(S, H @ P).T
    except SingularMatrixError as err:
        raise SingularMatrixError("innovation covariance is singular") from err
    mean = predicted.mean + K @ (np.asarray(y, dtype=np.float64) - H @ predicted.mean)
    A = np.eye(len(mean)) - K @ H
    cov = A @ P @ A.T + K @ R @ K.T
    return GaussianBelief(mean, cov)


@dataclass
class FilterTrack:
    filtered: list
    predicted: list

    @property
    def means(self):
        return np.stack([b.mean for b in self.filtered])

    @property
    def covs(self):
        return np.stack([b.cov for b in self.filtered])


def kalman_filter(ys, ssm: LinearSSM, prior: GaussianBelief | None = None) -> FilterTrack:
    """Filter y_1..y_T starting from the u_0 prior."""
    belief = prior or GaussianBelief(ssm.mu, ssm.Sigma)
    filtered, predicted = [], []
    for y in np.atleast_2d(ys):
        pred = kalman_predict(belief, ssm)
        belief = kalman_update(pred, y, ssm)
        predicted.append(pred)
        filtered.append(belief)
    return FilterTrack(filtered, predicted)


# ---------------------------------------------------------------- smoothing
def rts_backward_kernel(belief_t: GaussianBelief, ssm: LinearSSM):
    """Kernel p(u_t | u_{t+1}, y_{1:t}) = N(G u_{t+1} + offset, S)."""
    P, M = belief_t.cov, ssm.M
    P_next = M @ P @ M.T + ssm.Q
    try:
        G = chol_solve(P_next, M @ P).T
    except SingularMatrixError as err:
        raise SingularMatrixError("predicted covariance is singular") from err
    S = symmetrize((np.eye(len(P)) - G @ M) @ P)
    offset = belief_t.mean - G @ (M @ belief_t.mean)
    return G, S, offset


def rts_smoother(track: FilterTrack, ssm: LinearSSM) -> list:
    """Classic RTS recursion on means/covariances (independent of the kernel sampler)."""
    T = len(track.filtered)
    out = [None] * T
    out[-1] = track.filtered[-1]
    for t in range(T - 2, -1, -1):
        f = track.filtered[t]
        pred = track.predicted[t + 1]
        C = f.cov @ ssm.M.T @ np.linalg.inv(pred.cov)
        mean = f.mean + C @ (out[t + 1].mean - pred.mean)
        cov = f.cov + C @ (out[t + 1].cov - pred.cov) @ C.T
        out[t] = GaussianBelief(mean, cov)
    return out


def rts_kernel_sampler(track: FilterTrack, ssm: LinearSSM):
    """Backward sampler (k, u_next, rng) -> u_k drawn from the exact RTS kernel; k is 0-based."""
    kernels = [rts_backward_kernel(b, ssm) for b in track.filtered]

    def draw(k, u_next, rng):
        G, S, offset = kernels[k]
        L = psd_sqrt(S)
        return u_next @ G.T + offset + rng.standard_normal(u_next.shape) @ L.T

    return draw


def one_step_posterior(u_prev, y, ssm: LinearSSM) -> GaussianBelief:
    """p(u_t | u_{t-1}, y_t)."""
    H, Q = ssm.H, ssm.Q
    pred = ssm.M @ np.asarray(u_prev, dtype=np.float64)
    if not np.any(Q):
        return GaussianBelief(pred, np.zeros_like(Q))
    S = H @ Q @ H.T + ssm.R
    K = chol_solve(S, H @ Q).T
    mean = pred + K @ (np.asarray(y, dtype=np.float64) - H @ pred)
    return GaussianBelief(mean, (np.eye(ssm.n) - K @ H) @ Q)


def one_step_gain(ssm: LinearSSM) -> np.ndarray:
    H, Q = ssm.H, ssm.Q
    return chol_solve(H @ Q @ H.T + ssm.R, H @ Q).T


def predictive_cov(ssm: LinearSSM) -> np.ndarray:
    return ssm.H @ ssm.Q @ ssm.H.T + ssm.R


def predictive_density(u_t, y_next, ssm: LinearSSM) -> np.ndarray:
    """log p(y_{t+1} | u_t); batched over rows of ``u_t``/``y_next``."""
    u_t = np.atleast_2d(u_t)
    mean = u_t @ (ssm.H @ ssm.M).T
    y_next = np.atleast_2d(y_next)
    L = cholesky(predictive_cov(ssm))
    z = np.linalg.solve(L, (y_next - mean).T)
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * ssm.n_y * LOG_2PI
    return out if out.size > 1 else out[0]


# ---------------------------------------------------------------- KL
def kl_gaussian(p: GaussianBelief, q: GaussianBelief) -> float:
    """KL(p || q) in closed form."""
    d = len(p.mean)
    Lq = cholesky(q.cov)
    Lp = cholesky(p.cov)
    A = np.linalg.solve(Lq, Lp)
    diff = np.linalg.solve(Lq, q.mean - p.mean)
    logdet = 2.0 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    return float(0.5 * (np.sum(A * A) + diff @ diff - d + logdet))


def kl_gaussian_vs_flow(belief: GaussianBelief, log_density, n_mc: int, rng: np.random.Generator):
    """Monte Carlo KL(N(mean, cov) || q); returns (estimate, standard error).

    ``log_density`` maps an (n, d) array of states to their (n,) log density under q.
    """
    x = belief.sample(n_mc, rng)
    lq = np.asarray(log_density(x), dtype=np.float64)
    if not np.all(np.isfinite(lq)):
        raise FloatingPointError("non-finite log density from the approximating model")
    diff = belief.logpdf(x) - lq
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_mc))
