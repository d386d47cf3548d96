"""Flow-based particle filter with a fully adapted proposal.

Factor objects expose, in physical units and batched over rows:

* ``obs_logpdf(y, u_prev)``      log p(y_k | u_{k-1})
* ``obs_sample(u_prev, rng)``    y_k ~ p(y_k | u_{k-1})
* ``propose(y, u_prev, rng)``    u_k ~ p(u_k | y_k, u_{k-1})
* ``proposal_logpdf(u, y, u_prev)``
* ``transition_sample(u_prev, rng)`` and ``likelihood_logpdf(y, u)`` for the bootstrap variant.

:class:`PFModel` implements them with learned flows, :class:`GaussianFactors` with
the closed-form linear-Gaussian densities.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import grad as G
from .flows import FlowConfig, FlowModel, init_flow, log_prob, sample
from .gaussian import LinearSSM, gaussian_logpdf, one_step_gain, predictive_cov, psd_sqrt
from .grad import ConfigurationError
from .io import load_container, save_container, write_csv
from .ssm import Standardizer, Trajectories
from .trainer import ArchConfig


class DegeneracyError(RuntimeError):
    def __init__(self, max_log_weight):
        super().__init__(f"all auxiliary weights vanished (max log-weight {max_log_weight})")
        self.max_log_weight = max_log_weight


@dataclass
class ParticleEnsemble:
    particles: np.ndarray  # (N, d_u)
    weights: np.ndarray  # (N,), sums to one
    ancestors: np.ndarray | None = None
    aux_ress: float = float("nan")
    ress: float = float("nan")

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.particles),):
            raise ValueError("one weight per particle required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to one")
        self.weights = w

    @property
    def n(self):
        return len(self.particles)

    @classmethod
    def uniform(cls, particles):
        n = len(particles)
        return cls(np.asarray(particles, dtype=np.float64), np.full(n, 1.0 / n))

    def mean(self):
        return self.weights @ self.particles


# ---------------------------------------------------------------- weights and resampling
def normalize_log_weights(logw):
    logw = np.asarray(logw, dtype=np.float64)
    finite = np.isfinite(logw)
    if not finite.any():
        raise DegeneracyError(float(np.nanmax(np.where(np.isnan(logw), -np.inf, logw))) if logw.size else -np.inf)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    if np.any(logw == np.inf):
        raise DegeneracyError(float("inf"))
    w = np.exp(logw - logsumexp(logw))
    return w / w.sum()


def ess_from_weights(w):
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise FloatingPointError("weights must be finite and nonnegative")
    s2 = np.sum(w * w)
    if s2 == 0:
        return 0.0
    return float(w.sum() ** 2 / s2)


def ess_from_log_weights(logw):
    logw = np.asarray(logw, dtype=np.float64)
    if not np.all(np.isfinite(logw)):
        raise FloatingPointError("non-finite log weights")
    return float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw)))


def resample_multinomial(w, n, rng):
    c = np.cumsum(w)
    c[-1] = 1.0
    return np.minimum(np.searchsorted(c, rng.random(n), side="right"), len(w) - 1)


def resample_systematic(w, n, rng):
    c = np.cumsum(w)
    c[-1] = 1.0
    pos = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(c, pos, side="right"), len(w) - 1)


RESAMPLERS = {"multinomial": resample_multinomial, "systematic": resample_systematic}


def _resampler(name):
    try:
        return RESAMPLERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown resampler {name!r}") from None


# ---------------------------------------------------------------- exact factors
class GaussianFactors:
    """Closed-form factors of a linear-Gaussian model."""

    def __init__(self, ssm: LinearSSM):
        self.ssm = ssm
        self.K = one_step_gain(ssm)
        self.S_y = predictive_cov(ssm)
        self.P = (np.eye(ssm.n) - self.K @ ssm.H) @ ssm.Q
        self.P = 0.5 * (self.P + self.P.T)
        self._Lp = psd_sqrt(self.P)
        self._Ly = psd_sqrt(self.S_y)
        self._Lq = psd_sqrt(ssm.Q)
        self._Lr = psd_sqrt(ssm.R)

    @property
    def d_u(self):
        return self.ssm.n

    @property
    def d_y(self):
        return self.ssm.n_y

    def _pred(self, u_prev):
        return np.atleast_2d(u_prev) @ self.ssm.M.T

    def obs_logpdf(self, y, u_prev):
        m = self._pred(u_prev) @ self.ssm.H.T
        return gaussian_logpdf(np.broadcast_to(y, m.shape) - m, np.zeros(self.d_y), self.S_y)

    def obs_sample(self, u_prev, rng):
        m = self._pred(u_prev) @ self.ssm.H.T
        return m + rng.standard_normal(m.shape) @ self._Ly.T

    def _post_mean(self, y, u_prev):
        pred = self._pred(u_prev)
        return pred + (np.atleast_2d(y) - pred @ self.ssm.H.T) @ self.K.T

    def propose(self, y, u_prev, rng):
        m = self._post_mean(y, u_prev)
        return m + rng.standard_normal(m.shape) @ self._Lp.T

    def proposal_logpdf(self, u, y, u_prev):
        return gaussian_logpdf(np.atleast_2d(u) - self._post_mean(y, u_prev), np.zeros(self.d_u), self.P)

    def transition_sample(self, u_prev, rng):
        m = self._pred(u_prev)
        return m + rng.standard_normal(m.shape) @ self._Lq.T

    def transition_logpdf(self, u, u_prev):
        return gaussian_logpdf(np.atleast_2d(u) - self._pred(u_prev), np.zeros(self.d_u), self.ssm.Q)

    def likelihood_logpdf(self, y, u):
        m = np.atleast_2d(u) @ self.ssm.H.T
        return gaussian_logpdf(np.broadcast_to(y, m.shape) - m, np.zeros(self.d_y), self.ssm.R)

    def initial_sample(self, n, rng):
        L = psd_sqrt(self.ssm.Sigma)
        return self.ssm.mu + rng.standard_normal((n, self.d_u)) @ L.T


# ---------------------------------------------------------------- learned factors
@dataclass
class PFTrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    grad_clip: float | None = 10.0
    seed: int = 0
    bootstrap: bool = False
    verbose: bool = False


class PFModel:
    """Learned predictive-observation flow and adapted proposal (plus optional bootstrap pair)."""

    def __init__(self, obs: FlowModel, prop: FlowModel, u_stats: Standardizer, y_stats: Standardizer,
                 trans: FlowModel | None = None, lik: FlowModel | None = None, meta=None):
        if obs.config.cond_dim != prop.config.data_dim:
            raise ConfigurationError("observation flow must condition on the state")
        if prop.config.cond_dim != obs.config.data_dim + prop.config.data_dim:
            raise ConfigurationError("proposal flow must condition on [y, u_prev]")
        self.obs, self.prop, self.trans, self.lik = obs, prop, trans, lik
        self.u_stats, self.y_stats = u_stats, y_stats
        self.meta = meta or {}

    @property
    def d_u(self):
        return self.prop.config.data_dim

    @property
    def d_y(self):
        return self.obs.config.data_dim

    @property
    def dtype(self):
        return self.prop.dtype

    def _zu(self, u):
        return self.u_stats.forward(np.atleast_2d(u)).astype(self.dtype)

    def _zy(self, y, n):
        return np.broadcast_to(self.y_stats.forward(np.atleast_2d(y)), (n, self.d_y)).astype(self.dtype)

    @staticmethod
    def _lp(flow, x, c):
        with G.no_grad():
            return np.asarray(log_prob(x, c, flow).data, dtype=np.float64)

    def obs_logpdf(self, y, u_prev):
        zu = self._zu(u_prev)
        return self._lp(self.obs, self._zy(y, len(zu)), zu) - self.y_stats.log_scale

    def obs_sample(self, u_prev, rng):
        zu = self._zu(u_prev)
        return self.y_stats.inverse(sample(zu, self.obs, rng).astype(np.float64))

    def _prop_cond(self, y, u_prev):
        zu = self._zu(u_prev)
        return np.concatenate([self._zy(y, len(zu)), zu], axis=1)

    def propose(self, y, u_prev, rng):
        return self.u_stats.inverse(sample(self._prop_cond(y, u_prev), self.prop, rng).astype(np.float64))

    def proposal_logpdf(self, u, y, u_prev):
        return self._lp(self.prop, self._zu(u), self._prop_cond(y, u_prev)) - self.u_stats.log_scale

    def transition_sample(self, u_prev, rng):
        if self.trans is None:
            raise ConfigurationError("model has no bootstrap transition flow")
        return self.u_stats.inverse(sample(self._zu(u_prev), self.trans, rng).astype(np.float64))

    def likelihood_logpdf(self, y, u):
        if self.lik is None:
            raise ConfigurationError("model has no bootstrap likelihood flow")
        zu = self._zu(u)
        return self._lp(self.lik, self._zy(y, len(zu)), zu) - self.y_stats.log_scale

    # persistence
    def save(self, path):
        flows = {"obs": self.obs, "prop": self.prop, "trans": self.trans, "lik": self.lik}
        header = {"format": "fluid-pf", "u_mean": self.u_stats.mean, "u_std": self.u_stats.std,
                  "y_mean": self.y_stats.mean, "y_std": self.y_stats.std, "meta": self.meta,
                  "flows": {k: f.config.to_dict() for k, f in flows.items() if f is not None}}
        arrays = {f"{k}/{n}": t.data for k, f in flows.items() if f is not None for n, t in f.params.items()}
        return save_container(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = load_container(path)
        if header.get("format") != "fluid-pf":
            raise ValueError(f"{path} is not a particle-filter model container")
        flows = {}
        rng = np.random.default_rng(0)
        for k, cfg in header["flows"].items():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                f = init_flow(FlowConfig(**cfg), rng)
            for n, t in f.params.items():
                t.data = np.array(arrays[f"{k}/{n}"], dtype=t.data.dtype)
            flows[k] = f
        return cls(flows["obs"], flows["prop"],
                   Standardizer(np.array(header["u_mean"]), np.array(header["u_std"])),
                   Standardizer(np.array(header["y_mean"]), np.array(header["y_std"])),
                   flows.get("trans"), flows.get("lik"), header.get("meta"))


def transition_triples(data: Trajectories):
    """Pooled (u_{k-1}, u_k, y_k) for k = 2..T."""
    if data.T < 2:
        raise ValueError("need T >= 2 to form transition triples")
    d_u, d_y = data.u.shape[-1], data.y.shape[-1]
    return (data.u[:, :-1].reshape(-1, d_u).astype(np.float64), data.u[:, 1:].reshape(-1, d_u).astype(np.float64),
            data.y[:, 1:].reshape(-1, d_y).astype(np.float64))


def fit_flow(flow: FlowModel, x, c, config: PFTrainConfig, rng, label="flow"):
    """Maximum-likelihood fit of one conditional flow on standardized (x, c) pairs."""
    params = flow.params
    n = len(x)
    bs = min(config.batch_size, n)
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        tot = 0.0
        nb = n // bs
        for b in range(nb):
            idx = perm[b * bs:(b + 1) * bs]
            loss = -G.tmean(log_prob(x[idx], c[idx], flow))
            if not math.isfinite(float(loss.data)):
                raise G.NonFiniteError(f"{label} loss")
            G.backprop(loss, params)
            if config.grad_clip:
                G.clip_grad_norm(params, config.grad_clip)
            G.adam_step(params, config.lr)
            tot += float(loss.data)
        history.append(tot / max(nb, 1))
        if config.verbose:
            print(f"{label} epoch {epoch + 1}: nll {history[-1]:.4f}")
    return history


def train_pf_flows(u_prev, u, y, config: PFTrainConfig | None = None, arch: ArchConfig | None = None) -> PFModel:
    """Fit the observation flow on (y | u_prev) and the proposal on (u | y, u_prev), separately."""
    config = config or PFTrainConfig()
    arch = arch or ArchConfig()
    u_prev, u, y = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (u_prev, u, y))
    if len(u_prev) == 0 or not (len(u_prev) == len(u) == len(y)):
        raise ValueError("need a nonempty set of equally sized (u_prev, u, y) triples")
    d_u, d_y = u.shape[1], y.shape[1]
    u_stats = Standardizer.fit(np.concatenate([u_prev, u]))
    y_stats = Standardizer.fit(y)
    dt = np.dtype(arch.dtype)
    zp, zu, zy = u_stats.forward(u_prev).astype(dt), u_stats.forward(u).astype(dt), y_stats.forward(y).astype(dt)
    ss = np.random.SeedSequence(config.seed).spawn(8)
    kw = dict(num_coupling=arch.num_coupling, mlp_depth=arch.mlp_depth, mlp_width=arch.mlp_width,
              rff_features=arch.rff_features, sb_width=arch.sb_width, dtype=arch.dtype)

    def make(d, dc, s):
        with warnings.catch_warnings():
            if d == 1:
                warnings.simplefilter("ignore")
            return init_flow(FlowConfig(data_dim=d, cond_dim=dc, **kw), np.random.default_rng(s))

    obs = make(d_y, d_u, ss[0])
    prop = make(d_u, d_y + d_u, ss[1])
    meta = {"train": asdict(config), "history": {}}
    meta["history"]["obs"] = fit_flow(obs, zy, zp, config, np.random.default_rng(ss[2]), "obs")
    meta["history"]["prop"] = fit_flow(prop, zu, np.concatenate([zy, zp], 1), config, np.random.default_rng(ss[3]), "prop")
    trans = lik = None
    if config.bootstrap:
        trans = make(d_u, d_u, ss[4])
        lik = make(d_y, d_u, ss[5])
        meta["history"]["trans"] = fit_flow(trans, zu, zp, config, np.random.default_rng(ss[6]), "trans")
        meta["history"]["lik"] = fit_flow(lik, zy, zu, config, np.random.default_rng(ss[7]), "lik")
    return PFModel(obs, prop, u_stats, y_stats, trans, lik, meta)


# ---------------------------------------------------------------- filtering
def _importance_log_weights(model, exact, u, y, u_prev):
    """log[p(u|u_prev) p(y|u) / (q4(u|y,u_prev) q3(y|u_prev))]."""
    return (exact.transition_logpdf(u, u_prev) + exact.likelihood_logpdf(y, u)
            - model.proposal_logpdf(u, y, u_prev) - model.obs_logpdf(y, u_prev))


def pf_step(ens: ParticleEnsemble, y, model, rng, resampler: str = "multinomial", exact=None) -> ParticleEnsemble:
    """Predictive weighting, resampling and propagation with the adapted proposal."""
    y = np.asarray(y, dtype=np.float64)
    logw = np.log(ens.weights) + model.obs_logpdf(y, ens.particles)
    aux = normalize_log_weights(logw)
    anc = _resampler(resampler)(aux, ens.n, rng)
    parents = ens.particles[anc]
    new = np.asarray(model.propose(y, parents, rng), dtype=np.float64)
    out = ParticleEnsemble.uniform(new)
    out.ancestors = anc
    out.aux_ress = ess_from_weights(aux) / ens.n
    if exact is not None:
        out.ress = ess_from_log_weights(_importance_log_weights(model, exact, new, y, parents)) / ens.n
    return out


def bootstrap_pf_step(ens: ParticleEnsemble, y, model, rng, resampler: str = "multinomial") -> ParticleEnsemble:
    """Propagate with the transition, weight with the likelihood, resample."""
    y = np.asarray(y, dtype=np.float64)
    prop = np.asarray(model.transition_sample(ens.particles, rng), dtype=np.float64)
    logw = np.log(ens.weights) + model.likelihood_logpdf(y, prop)
    w = normalize_log_weights(logw)
    ress = ess_from_weights(w) / ens.n
    anc = _resampler(resampler)(w, ens.n, rng)
    out = ParticleEnsemble.uniform(prop[anc])
    out.ancestors = anc
    out.aux_ress = ress
    out.ress = ress
    return out


def run_pf(y, init_sampler, model, n: int, rng, resampler: str = "multinomial", exact=None,
           bootstrap: bool = False) -> list:
    """Filter y_1..y_T from a prior ensemble of u_0 draws; returns one ensemble per step."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    ens = ParticleEnsemble.uniform(np.asarray(init_sampler(n, rng), dtype=np.float64))
    out = []
    for t in range(len(y)):
        if bootstrap:
            ens = bootstrap_pf_step(ens, y[t], model, rng, resampler)
        else:
            ens = pf_step(ens, y[t], model, rng, resampler, exact)
        out.append(ens)
    return out


def pf_means(ensembles) -> np.ndarray:
    return np.stack([e.mean() for e in ensembles])


# ---------------------------------------------------------------- diagnostics
@dataclass
class ESSResult:
    ess: float
    ress: float
    chi2: float
    n: int = 0
    log_weights: np.ndarray = field(default=None, repr=False)


def ess_diagnostic(u_prev, exact, model, rng) -> ESSResult:
    """Importance weights of the learned joint q3(y|u_prev) q4(u|y,u_prev) against the exact model.

    ``u_prev`` are draws of the previous state; y and then u are drawn from the learned flows.
    """
    u_prev = np.atleast_2d(np.asarray(u_prev, dtype=np.float64))
    y = np.asarray(model.obs_sample(u_prev, rng), dtype=np.float64)
    u = np.asarray(model.propose(y, u_prev, rng), dtype=np.float64)
    logw = (exact.transition_logpdf(u, u_prev) + exact.likelihood_logpdf(y, u)
            - model.proposal_logpdf(u, y, u_prev) - model.obs_logpdf(y, u_prev))
    ess = ess_from_log_weights(logw)
    n = len(u_prev)
    return ESSResult(ess, ess / n, n / ess - 1.0, n, logw)


def write_ress_csv(path, ensembles, schema="pf_ress"):
    d = ensembles[0].particles.shape[1]
    cols = ["step", "ress", "aux_ress"] + [f"mean_{j}" for j in range(d)]
    rows = [[k + 1, e.ress, e.aux_ress] + list(e.mean()) for k, e in enumerate(ensembles)]
    return write_csv(path, schema, cols, rows)

