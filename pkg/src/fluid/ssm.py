"""Trajectory generators for the benchmark state-space models.

Every simulator returns a :class:`Trajectories` with states ``u`` (N, T, d_u) and
observations ``y`` (N, T, d_y) for t = 1..T; the initial state u_0 is not part of
the returned path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg

from .gaussian import LinearSSM, psd_sqrt
from .grad import ConfigurationError


class SimulationError(RuntimeError):
    pass


@dataclass
class Trajectories:
    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.u.shape[:2] != self.y.shape[:2]:
            raise ValueError("state and observation paths disagree on (N, T)")

    @property
    def n(self):
        return self.u.shape[0]

    @property
    def T(self):
        return self.u.shape[1]

    def __getitem__(self, idx):
        return Trajectories(self.u[idx], self.y[idx])


class _Spec:
    kind = "base"

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
        return cls(**kw)


# ---------------------------------------------------------------- advection-diffusion
@dataclass
class AdvDiffSpec(_Spec):
    n: int = 10
    a: float = -1.0
    kappa: float = 0.0
    dt_obs: float = 0.05
    dt_fine: float | None = None
    q: float = 0.01
    process_noise: str = "coarse"  # "coarse": Q = qI; "fine": Q_dt = (dt/n) I per fine step
    r: float = 0.1
    sigma: float = 0.05
    scheme: str = "upwind"  # or "lax-wendroff"
    observation: str = "subsample-even"  # or "group-average"
    n_groups: int = 8
    kind = "advdiff"

    @classmethod
    def case1(cls, n=10, **kw):
        return cls(n=n, **kw)

    @classmethod
    def case2(cls, n=16, **kw):
        base = dict(a=1.0, kappa=0.01, dt_obs=0.01, process_noise="fine", r=0.01, sigma=0.05 / n,
                    scheme="lax-wendroff", observation="group-average", n_groups=8)
        base.update(kw)
        return cls(n=n, **base)

    def simulate(self, T, N, rng):
        return simulate_linear(build_advdiff(self), T, N, rng)


def _shift(n, k):
    """Matrix S with (S u)_j = u_{j+k} (periodic)."""
    return np.roll(np.eye(n), k, axis=1)


def fine_step_matrix(spec: AdvDiffSpec, dt: float) -> np.ndarray:
    n = spec.n
    dx = 1.0 / n
    nu = dt / dx
    I = np.eye(n)
    Sp, Sm = _shift(n, 1), _shift(n, -1)
    D2 = Sp - 2 * I + Sm
    diff = spec.kappa * dt / dx**2
    if spec.scheme == "upwind":
        if spec.a <= 0:
            A = I - Sm  # backward difference
            M = I + spec.a * nu * A
        else:
            M = I + spec.a * nu * (Sp - I)
    elif spec.scheme == "lax-wendroff":
        M = I + 0.5 * spec.a * nu * (Sp - Sm) + 0.5 * (spec.a * nu) ** 2 * D2
    else:
        raise ConfigurationError(f"unknown scheme {spec.scheme!r}")
    return M + diff * D2


def _stable(M):
    return np.abs(np.linalg.eigvals(M)).max() <= 1.0 + 1e-10


def stability_bound(spec: AdvDiffSpec) -> float:
    """Largest stable fine step, found by bisection on the spectral radius."""
    lo, hi = 0.0, spec.dt_obs
    if _stable(fine_step_matrix(spec, hi)):
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _stable(fine_step_matrix(spec, mid)):
            lo = mid
        else:
            hi = mid
    return lo


def choose_fine_step(spec: AdvDiffSpec) -> float:
    """Largest dt_obs / 2^j that is stable."""
    if spec.dt_fine is not None:
        m = spec.dt_obs / spec.dt_fine
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ConfigurationError("dt_obs / dt_fine must be a positive integer")
        if not _stable(fine_step_matrix(spec, spec.dt_fine)):
            raise ConfigurationError(
                f"fine step {spec.dt_fine} violates stability; largest stable step is {stability_bound(spec):.6g}"
            )
        return spec.dt_fine
    dt = spec.dt_obs
    for _ in range(40):
        if _stable(fine_step_matrix(spec, dt)):
            return dt
        dt /= 2
    raise ConfigurationError(f"no stable fine step found; bound {stability_bound(spec):.6g}")


def observation_matrix(spec: AdvDiffSpec) -> np.ndarray:
    n = spec.n
    if spec.observation == "subsample-even":
        idx = np.arange(0, n, 2)
        H = np.zeros((len(idx), n))
        H[np.arange(len(idx)), idx] = 1.0
        return H
    if spec.observation == "group-average":
        g = spec.n_groups
        if n % g:
            raise ConfigurationError("n must be divisible by n_groups")
        w = n // g
        H = np.zeros((g, n))
        for i in range(g):
            H[i, i * w:(i + 1) * w] = 1.0 / w
        return H
    raise ConfigurationError(f"unknown observation {spec.observation!r}")


def build_advdiff(spec: AdvDiffSpec) -> LinearSSM:
    dt = choose_fine_step(spec)
    m = int(round(spec.dt_obs / dt))
    Mf = fine_step_matrix(spec, dt)
    M = np.linalg.matrix_power(Mf, m)
    n = spec.n
    if spec.process_noise == "coarse":
        Q = spec.q * np.eye(n)
    elif spec.process_noise == "fine":
        Qf = (dt / n) * np.eye(n)
        Q = np.zeros((n, n))
        P = np.eye(n)
        for _ in range(m):
            Q += P @ Qf @ P.T
            P = Mf @ P
        Q = 0.5 * (Q + Q.T)
    else:
        raise ConfigurationError(f"unknown process_noise {spec.process_noise!r}")
    H = observation_matrix(spec)
    j = np.arange(n)
    return LinearSSM(M=M, H=H, Q=Q, R=spec.r * np.eye(H.shape[0]),
                     mu=np.sin(2 * np.pi * j / n), Sigma=spec.sigma**2 * np.eye(n))


def simulate_linear(ssm: LinearSSM, T: int, N: int, rng: np.random.Generator) -> Trajectories:
    n, ny = ssm.n, ssm.n_y
    LS, LQ, LR = psd_sqrt(ssm.Sigma), psd_sqrt(ssm.Q), psd_sqrt(ssm.R)
    u = ssm.mu + rng.standard_normal((N, n)) @ LS.T
    us = np.empty((N, T, n))
    ys = np.empty((N, T, ny))
    for t in range(T):
        u = u @ ssm.M.T + rng.standard_normal((N, n)) @ LQ.T
        us[:, t] = u
        ys[:, t] = u @ ssm.H.T + rng.standard_normal((N, ny)) @ LR.T
    return Trajectories(us, ys)


# ---------------------------------------------------------------- stochastic volatility
@dataclass
class SVSpec(_Spec):
    gamma: tuple = (0.97, 0.97)
    sigma: tuple = (0.3, 0.3)
    beta: float = 0.835
    alpha: tuple = (0.0, 0.0)
    kind = "sv"

    def __post_init__(self):
        if np.any(np.abs(np.asarray(self.gamma)) >= 1):
            raise ConfigurationError("|gamma| must be < 1 for a stationary volatility process")

    @property
    def tau2(self):
        g, s = np.asarray(self.gamma, float), np.asarray(self.sigma, float)
        return s**2 / (1.0 - g**2)

    def simulate(self, T, N, rng):
        return simulate_sv(self, T, N, rng)

    def initial_sample(self, N, rng):
        return rng.standard_normal((N, len(self.gamma))) * np.sqrt(self.tau2)

    def transition_mean(self, u_prev):
        a, g = np.asarray(self.alpha, float), np.asarray(self.gamma, float)
        return a + g * (u_prev - a)

    def transition_logpdf(self, u, u_prev):
        s = np.asarray(self.sigma, float)
        z = (u - self.transition_mean(u_prev)) / s
        return np.sum(-0.5 * z * z - np.log(s) - 0.5 * math.log(2 * math.pi), axis=-1)

    def likelihood_logpdf(self, y, u):
        var = self.beta**2 * np.exp(u)
        return np.sum(-0.5 * y * y / var - 0.5 * np.log(2 * math.pi * var), axis=-1)


def simulate_sv(spec: SVSpec, T: int, N: int, rng: np.random.Generator) -> Trajectories:
    d = len(spec.gamma)
    s = np.asarray(spec.sigma, float)
    u = spec.initial_sample(N, rng)
    us = np.empty((N, T, d))
    ys = np.empty((N, T, d))
    for t in range(T):
        u = spec.transition_mean(u) + s * rng.standard_normal((N, d))
        us[:, t] = u
        ys[:, t] = spec.beta * np.exp(0.5 * u) * rng.standard_normal((N, d))
    return Trajectories(us, ys)


# ---------------------------------------------------------------- Burgers
@dataclass
class BurgersSpec(_Spec):
    nu: float = 0.05
    sigma: float = 1.0
    n_space: int = 50  # interior points; the two Dirichlet boundary nodes are not state
    dt_obs: float = 0.005
    substeps: int = 1
    r2: float = 0.01
    blowup: float = 1e3
    kind = "burgers"

    @property
    def x(self):
        return np.linspace(-1.0, 1.0, self.n_space + 2)[1:-1]

    @property
    def dx(self):
        return 2.0 / (self.n_space + 1)

    @property
    def obs_index(self):
        return np.arange(0, self.n_space, 2)

    def initial_state(self):
        return -np.sin(np.pi * self.x)

    def simulate(self, T, N, rng):
        return simulate_burgers(self, T, N, rng)


class BurgersSolver:
    """Explicit advection + implicit diffusion on the interior nodes, zero Dirichlet boundaries."""

    def __init__(self, spec: BurgersSpec):
        self.spec = spec
        n = spec.n_space
        self.dt = spec.dt_obs / spec.substeps
        lam = spec.nu * self.dt / spec.dx**2
        ab = np.zeros((3, n))
        ab[0, 1:] = -lam
        ab[1, :] = 1 + 2 * lam
        ab[2, :-1] = -lam
        self._ab = ab

    def advection(self, u):
        pad = np.pad(u, [(0, 0)] * (u.ndim - 1) + [(1, 1)])
        f = 0.5 * pad * pad
        return (f[..., 2:] - f[..., :-2]) / (2.0 * self.spec.dx)

    def step(self, u, noise=None):
        rhs = u - self.dt * self.advection(u)
        if noise is not None:
            rhs = rhs + noise
        sol = scipy.linalg.solve_banded((1, 1), self._ab, rhs.T)
        return sol.T

    def full_field(self, u):
        """State with the two pinned boundary values appended."""
        return np.pad(u, [(0, 0)] * (u.ndim - 1) + [(1, 1)])


def simulate_burgers(spec: BurgersSpec, T: int, N: int, rng: np.random.Generator) -> Trajectories:
    solver = BurgersSolver(spec)
    n = spec.n_space
    u = np.tile(spec.initial_state(), (N, 1))
    us = np.empty((N, T, n))
    idx = spec.obs_index
    ys = np.empty((N, T, len(idx)))
    amp = spec.sigma * math.sqrt(solver.dt)
    for t in range(T):
        for _ in range(spec.substeps):
            noise = amp * rng.standard_normal((N, n)) if spec.sigma > 0 else None
            u = solver.step(u, noise)
        bad = np.abs(u).max(axis=1) > spec.blowup
        if bad.any():
            i = int(np.argmax(bad))
            raise SimulationError(f"Burgers blow-up in trajectory {i} at step {t + 1}: max|u|={np.abs(u[i]).max():.3g}")
        us[:, t] = u
        ys[:, t] = u[:, idx] + math.sqrt(spec.r2) * rng.standard_normal((N, len(idx)))
    return Trajectories(us, ys)


# ---------------------------------------------------------------- Lorenz-96
@dataclass
class LorenzSpec(_Spec):
    K: int = 10
    J: int = 32
    F: float = 8.0
    h: float = 1.0
    b: float = 10.0
    c: float = 0.0
    sigma_u: float = 1.0
    sigma_v: float = 0.01
    dt_obs: float = 0.05
    dt_int: float = 0.005
    two_scale: bool = False
    obs_noise: float = 1.0
    scheme: str = "heun"  # "heun" (stochastic Heun, additive noise) or "em" (Euler-Maruyama)
    blowup: float = 1e3
    kind = "lorenz"

    @classmethod
    def single_scale(cls, K=10, **kw):
        return cls(K=K, **kw)

    @classmethod
    def two_scale_default(cls, K=16, F=8.0, **kw):
        base = dict(c=4.0, sigma_u=0.1, sigma_v=0.01, two_scale=True, dt_int=0.001)
        base.update(kw)
        return cls(K=K, F=F, **base)

    @property
    def obs_index(self):
        return np.arange(0, self.K, 2) if self.two_scale else np.arange(self.K)

    def initial_state(self, N, rng):
        if self.two_scale:
            u = self.F + self.sigma_u * rng.standard_normal((N, self.K))
            v = self.sigma_v * rng.standard_normal((N, self.K * self.J))
            return u, v
        j = np.arange(self.K)
        return np.tile(np.sin(2 * np.pi * j / self.K), (N, 1)), None

    def simulate(self, T, N, rng):
        return simulate_lorenz(self, T, N, rng)


def lorenz_drift(u, v, spec: LorenzSpec):
    du = -np.roll(u, 1, -1) * (np.roll(u, 2, -1) - np.roll(u, -1, -1)) - u + spec.F
    if v is None:
        return du, None
    coup = spec.h * spec.c / spec.b
    vb = v.reshape(v.shape[:-1] + (spec.K, spec.J)).sum(-1)
    du = du - coup * vb
    ub = np.repeat(u, spec.J, axis=-1)
    dv = -spec.c * spec.b * np.roll(v, -1, -1) * (np.roll(v, -2, -1) - np.roll(v, 1, -1)) - spec.c * v + coup * ub
    return du, dv


def lorenz_step(u, v, spec: LorenzSpec, dt: float, rng=None):
    """One integrator step; ``rng=None`` gives the deterministic drift-only step."""
    du, dv = lorenz_drift(u, v, spec)
    if spec.scheme == "heun":
        up, vp = u + dt * du, (None if v is None else v + dt * dv)
        du2, dv2 = lorenz_drift(up, vp, spec)
        du = 0.5 * (du + du2)
        dv = None if v is None else 0.5 * (dv + dv2)
    elif spec.scheme != "em":
        raise ConfigurationError(f"unknown Lorenz scheme {spec.scheme!r}")
    u = u + dt * du
    if v is not None:
        v = v + dt * dv
    if rng is not None:
        sq = math.sqrt(dt)
        u = u + spec.sigma_u * sq * rng.standard_normal(u.shape)
        if v is not None:
            v = v + spec.sigma_v * sq * rng.standard_normal(v.shape)
    return u, v


def integrate_lorenz(u, v, spec: LorenzSpec, duration: float, dt: float, rng=None):
    steps = int(round(duration / dt))
    if abs(steps * dt - duration) > 1e-9 * max(1.0, duration):
        raise ConfigurationError("duration must be an integer multiple of the integration step")
    for _ in range(steps):
        u, v = lorenz_step(u, v, spec, dt, rng)
    return u, v


def simulate_lorenz(spec: LorenzSpec, T: int, N: int, rng: np.random.Generator, deterministic: bool = False) -> Trajectories:
    u, v = spec.initial_state(N, rng)
    idx = spec.obs_index
    us = np.empty((N, T, spec.K))
    ys = np.empty((N, T, len(idx)))
    step_rng = None if deterministic else rng
    for t in range(T):
        u, v = integrate_lorenz(u, v, spec, spec.dt_obs, spec.dt_int, step_rng)
        if not np.all(np.isfinite(u)) or np.abs(u).max() > spec.blowup:
            raise SimulationError(f"Lorenz blow-up at step {t + 1}")
        us[:, t] = u
        ys[:, t] = u[:, idx] ** 3 + math.sqrt(spec.obs_noise) * rng.standard_normal((N, len(idx)))
    return Trajectories(us, ys)


# ---------------------------------------------------------------- datasets
SPECS = {"advdiff": AdvDiffSpec, "sv": SVSpec, "burgers": BurgersSpec, "lorenz": LorenzSpec}


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return SPECS[kind].from_dict(d)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, floor: float = 1e-8):
        flat = x.reshape(-1, x.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def forward(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    @property
    def log_scale(self) -> float:
        return float(np.sum(np.log(self.std)))


@dataclass
class Dataset:
    spec: object
    train: Trajectories
    test: Trajectories | None
    u_stats: Standardizer
    y_stats: Standardizer
    seed: int = 0
    meta: dict = field(default_factory=dict)


def make_dataset(spec, n_train: int, n_test: int, T: int, seed: int, T_test: int | None = None) -> Dataset:
    """Simulate train/test splits from independent streams; statistics from train only."""
    ss_train, ss_test = np.random.SeedSequence(seed).spawn(2)
    train = spec.simulate(T, n_train, np.random.default_rng(ss_train))
    test = spec.simulate(T_test or T, n_test, np.random.default_rng(ss_test)) if n_test > 0 else None
    train = Trajectories(train.u.astype(np.float32), train.y.astype(np.float32))
    if test is not None:
        test = Trajectories(test.u.astype(np.float32), test.y.astype(np.float32))
    return Dataset(spec, train, test, Standardizer.fit(train.u.astype(np.float64)),
                   Standardizer.fit(train.y.astype(np.float64)), seed)
