"""Conditional normalizing flow: a conditional scale-bias layer followed by a stack
of tanh-bounded affine coupling layers with random-Fourier-feature conditioners.

All maps are batch-first: ``u`` has shape (B, d_u) and ``c`` has shape (B, d_c).
Forward maps data to the Gaussian base, ``flow_inverse`` maps base draws to data.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import grad as G
from .grad import ParamStore, Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    data_dim: int
    cond_dim: int = 0
    num_coupling: int = 6
    alpha: float = 0.6
    rff_features: int = 64
    mlp_depth: int = 6
    mlp_width: int = 64
    rff_scale_init: float = 0.0
    sb_width: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.data_dim < 1:
            raise G.ConfigurationError("data_dim must be positive")
        if self.cond_dim < 0:
            raise G.ConfigurationError("cond_dim must be nonnegative")
        if not 0.0 < self.alpha < 1.0:
            raise G.ConfigurationError("alpha must lie in (0, 1)")
        if self.num_coupling < 0 or self.rff_features < 1 or self.mlp_depth < 0 or self.mlp_width < 1:
            raise G.ConfigurationError("invalid flow size parameters")

    @property
    def split(self) -> int:
        return self.data_dim // 2

    @property
    def n_coupling_effective(self) -> int:
        return 0 if self.data_dim < 2 else self.num_coupling

    def to_dict(self):
        return asdict(self)


class FlowEval(NamedTuple):
    output: Tensor
    log_det: Tensor


class FlowModel:
    def __init__(self, config: FlowConfig, params: ParamStore):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def __repr__(self):
        c = self.config
        return f"FlowModel(d_u={c.data_dim}, d_c={c.cond_dim}, K={c.n_coupling_effective})"


def _dense_init(rng, n_out, n_in):
    lim = 1.0 / math.sqrt(n_in)
    return rng.uniform(-lim, lim, size=(n_out, n_in))


def init_flow(config: FlowConfig, rng: np.random.Generator) -> FlowModel:
    """Identity-initialised flow: every final layer starts at zero."""
    if config.data_dim == 1 and config.num_coupling > 0:
        warnings.warn("data_dim=1: coupling layers undefined, using a scale-bias-only flow", stacklevel=2)
    dt = np.dtype(config.dtype)
    d, dc = config.data_dim, config.cond_dim
    ps = ParamStore()
    if dc > 0:
        ps.add("sb.W1", _dense_init(rng, config.sb_width, dc).astype(dt))
        ps.add("sb.b1", np.zeros(config.sb_width, dt))
        ps.add("sb.W2", np.zeros((2 * d, config.sb_width), dt))
    ps.add("sb.b2", np.zeros(2 * d, dt))
    k = config.split
    n_in = k + dc
    R = config.rff_features
    for layer in range(config.n_coupling_effective):
        p = f"c{layer}."
        ps.add(p + "F", rng.standard_normal((R, n_in)).astype(dt), frozen=True)
        ps.add(p + "b0", rng.uniform(0.0, 2.0 * math.pi, size=R).astype(dt), frozen=True)
        ps.add(p + "sigma", np.array(config.rff_scale_init, dt))
        width_in = 2 * R + n_in
        for i in range(config.mlp_depth):
            ps.add(p + f"mlp{i}.W", _dense_init(rng, config.mlp_width, width_in).astype(dt))
            ps.add(p + f"mlp{i}.b", np.zeros(config.mlp_width, dt))
            width_in = config.mlp_width
        ps.add(p + "Wout", np.zeros((2 * (d - k), width_in), dt))
        ps.add(p + "bout", np.zeros(2 * (d - k), dt))
        ps.add(p + "log_gamma", np.zeros(d - k, dt))
    return FlowModel(config, ps)


def _prep(x, model, width):
    if x is None:
        return None
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 1:
        arr = arr[None, :]
        x = Tensor(arr) if not isinstance(x, Tensor) else G.reshape(x, arr.shape)
    if arr.shape[-1] != width:
        raise ValueError(f"shape mismatch: expected last dimension {width}, got {arr.shape[-1]}")
    if isinstance(x, Tensor):
        return x
    return Tensor(arr.astype(model.dtype, copy=False))


def _cond(c, model, batch):
    dc = model.config.cond_dim
    if dc == 0:
        return None
    if c is None:
        raise ValueError("conditioning input required")
    c = _prep(c, model, dc)
    if c.shape[0] == 1 and batch > 1:
        c = Tensor(np.broadcast_to(c.data, (batch, dc)).copy()) if not c.requires_grad else G.add(c, Tensor(np.zeros((batch, dc), c.dtype)))
    return c


# ---------------------------------------------------------------- scale-bias layer
def scale_bias_params(c, model: FlowModel, batch: int):
    """Returns (eta, xi), each (B, d_u)."""
    P = model.params
    d = model.config.data_dim
    if model.config.cond_dim > 0:
        h = G.silu(G.linear(c, P["sb.W1"], P["sb.b1"]))
        out = G.linear(h, P["sb.W2"], P["sb.b2"])
    else:
        out = G.add(Tensor(np.zeros((batch, 2 * d), model.dtype)), P["sb.b2"])
    return out[:, :d], out[:, d:]


def scale_bias_forward(u, c, model: FlowModel) -> FlowEval:
    u = _prep(u, model, model.config.data_dim)
    c = _cond(c, model, u.shape[0])
    eta, xi = scale_bias_params(c, model, u.shape[0])
    return FlowEval(G.exp(eta) * u + xi, G.tsum(eta, axis=1))


def scale_bias_inverse(v, c, model: FlowModel) -> Tensor:
    v = _prep(v, model, model.config.data_dim)
    c = _cond(c, model, v.shape[0])
    eta, xi = scale_bias_params(c, model, v.shape[0])
    return (v - xi) * G.exp(-eta)


# ---------------------------------------------------------------- coupling layers
def rff_coupling_net(x, model: FlowModel, layer: int):
    """Conditioner of coupling ``layer`` on input x = [u1, c]; returns (s, t)."""
    P = model.params
    p = f"c{layer}."
    cfg = model.config
    proj = G.linear(x, P[p + "F"]) * G.exp(-P[p + "sigma"]) + P[p + "b0"]
    h = G.concat([G.sin(proj), G.cos(proj), x], axis=-1)
    for i in range(cfg.mlp_depth):
        h = G.silu(G.linear(h, P[p + f"mlp{i}.W"], P[p + f"mlp{i}.b"]))
    st = G.linear(h, P[p + "Wout"], P[p + "bout"])
    m = cfg.data_dim - cfg.split
    return st[:, :m], st[:, m:]


def _coupling_input(u1, c):
    return u1 if c is None else G.concat([u1, c], axis=-1)


def coupling_scale(s, alpha):
    return 1.0 + alpha * G.tanh(s)


def coupling_forward(u, c, model: FlowModel, layer: int) -> FlowEval:
    cfg = model.config
    u = _prep(u, model, cfg.data_dim)
    c = _cond(c, model, u.shape[0])
    k = cfg.split
    u1, u2 = u[:, :k], u[:, k:]
    s, t = rff_coupling_net(_coupling_input(u1, c), model, layer)
    scale = coupling_scale(s, cfg.alpha)
    gamma = G.exp(model.params[f"c{layer}.log_gamma"])
    v2 = scale * u2 + gamma * G.tanh(t)
    return FlowEval(G.concat([u1, v2], axis=-1), G.tsum(G.log(scale), axis=1))


def coupling_inverse(v, c, model: FlowModel, layer: int) -> Tensor:
    cfg = model.config
    v = _prep(v, model, cfg.data_dim)
    c = _cond(c, model, v.shape[0])
    k = cfg.split
    v1, v2 = v[:, :k], v[:, k:]
    s, t = rff_coupling_net(_coupling_input(v1, c), model, layer)
    gamma = G.exp(model.params[f"c{layer}.log_gamma"])
    u2 = (v2 - gamma * G.tanh(t)) / coupling_scale(s, cfg.alpha)
    return G.concat([v1, u2], axis=-1)


def permute(x, model: FlowModel):
    return G.roll(x, -model.config.split, axis=-1)


def unpermute(x, model: FlowModel):
    return G.roll(x, model.config.split, axis=-1)


# ---------------------------------------------------------------- full flow
def flow_forward(u, c, model: FlowModel, return_layers: bool = False):
    cfg = model.config
    u = _prep(u, model, cfg.data_dim)
    c = _cond(c, model, u.shape[0])
    ev = scale_bias_forward(u, c, model)
    x, logdet = ev.output, ev.log_det
    per_layer = [ev.log_det]
    for layer in range(cfg.n_coupling_effective):
        ev = coupling_forward(x, c, model, layer)
        x = permute(ev.output, model)
        logdet = logdet + ev.log_det
        per_layer.append(ev.log_det)
    out = FlowEval(x, logdet)
    return (out, per_layer) if return_layers else out


def flow_inverse(z, c, model: FlowModel) -> Tensor:
    cfg = model.config
    z = _prep(z, model, cfg.data_dim)
    c = _cond(c, model, z.shape[0])
    x = z
    for layer in reversed(range(cfg.n_coupling_effective)):
        x = coupling_inverse(unpermute(x, model), c, model, layer)
    return scale_bias_inverse(x, c, model)


def log_prob(u, c, model: FlowModel) -> Tensor:
    """Per-row log density, shape (B,)."""
    z, logdet = flow_forward(u, c, model)
    d = model.config.data_dim
    return -0.5 * G.tsum(G.square(z), axis=1) - 0.5 * d * LOG_2PI + logdet


def sample(c, model: FlowModel, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw from p(u | c). With ``n`` given and a single condition row, draws ``n`` samples."""
    d = model.config.data_dim
    if model.config.cond_dim > 0:
        c_arr = np.atleast_2d(c.data if isinstance(c, Tensor) else np.asarray(c))
        batch = c_arr.shape[0] if n is None else n
        if c_arr.shape[0] == 1 and batch > 1:
            c_arr = np.broadcast_to(c_arr, (batch, c_arr.shape[1]))
        elif c_arr.shape[0] != batch:
            raise ValueError("n must match the number of condition rows")
    else:
        c_arr = None
        batch = 1 if n is None else n
    z = rng.standard_normal((batch, d)).astype(model.dtype)
    with G.no_grad():
        return flow_inverse(z, c_arr, model).data
