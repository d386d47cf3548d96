"""Stacked LSTM summary network: y_{1:t} -> s_t = W_s h_t^(L) + b_s."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .grad import ParamStore, Tensor


@dataclass
class EncoderConfig:
    obs_dim: int
    hidden_dim: int = 128
    layers: int = 4
    summary_dim: int | None = None
    forget_bias: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.summary_dim is None:
            self.summary_dim = 3 * self.obs_dim
        if min(self.obs_dim, self.hidden_dim, self.layers, self.summary_dim) < 1:
            raise G.ConfigurationError("encoder dimensions must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderState:
    """Per-layer (h, c) carried between streaming steps."""

    h: list = field(default_factory=list)
    c: list = field(default_factory=list)

    @classmethod
    def zeros(cls, config: EncoderConfig, batch: int = 1):
        dt = np.dtype(config.dtype)
        z = lambda: np.zeros((batch, config.hidden_dim), dt)  # noqa: E731
        return cls([z() for _ in range(config.layers)], [z() for _ in range(config.layers)])


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: ParamStore):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def gate_weights(self, layer: int, gate: str):
        """(W_y, W_h, b) slices for one gate of one layer; gates stacked as i, f, o, g."""
        H = self.config.hidden_dim
        j = "ifog".index(gate)
        P = self.params
        sl = slice(j * H, (j + 1) * H)
        return P[f"l{layer}.Wy"].data[sl], P[f"l{layer}.Wh"].data[sl], P[f"l{layer}.b"].data[sl]


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderModel:
    dt = np.dtype(config.dtype)
    H = config.hidden_dim
    lim = 1.0 / math.sqrt(H)
    ps = ParamStore()
    d_in = config.obs_dim
    for layer in range(config.layers):
        ps.add(f"l{layer}.Wy", rng.uniform(-lim, lim, (4 * H, d_in)).astype(dt))
        ps.add(f"l{layer}.Wh", rng.uniform(-lim, lim, (4 * H, H)).astype(dt))
        b = np.zeros(4 * H, dt)
        b[H:2 * H] = config.forget_bias
        ps.add(f"l{layer}.b", b)
        d_in = H
    ps.add("head.W", rng.uniform(-lim, lim, (config.summary_dim, H)).astype(dt))
    ps.add("head.b", np.zeros(config.summary_dim, dt))
    return EncoderModel(config, ps)


def _check_obs(y, model):
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if arr.shape[-1] != model.config.obs_dim:
        raise ValueError(f"observation dim {arr.shape[-1]} != encoder obs_dim {model.config.obs_dim}")


def lstm_step(y, state: EncoderState, model: EncoderModel):
    """Advance every layer by one observation. ``y`` is (d_y,) or (B, d_y)."""
    _check_obs(y, model)
    x = np.atleast_2d(np.asarray(y, dtype=model.dtype))
    P = model.params
    new = EncoderState()
    for layer in range(model.config.layers):
        h, c, _ = G.lstm_cell(x, state.h[layer], state.c[layer], P[f"l{layer}.Wy"].data, P[f"l{layer}.Wh"].data, P[f"l{layer}.b"].data)
        new.h.append(h)
        new.c.append(c)
        x = h
    return new, x


def summary_head(h, model: EncoderModel):
    W, b = model.params["head.W"], model.params["head.b"]
    if G.grad_enabled():
        return G.linear(h, W, b)
    # row-wise reduction: result does not depend on how many rows are batched together
    hd = h.data if isinstance(h, Tensor) else h
    return Tensor((hd[..., None, :] * W.data).sum(axis=-1) + b.data)


def encode(y, model: EncoderModel, truncate: int | None = None) -> Tensor:
    """Differentiable batch encoding: y (B, T, d_y) -> summaries (B, T, d_s)."""
    _check_obs(y, model)
    x = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=model.dtype))
    if x.ndim == 2:
        x = G.reshape(x, (1,) + x.shape)
    if x.shape[1] < 1:
        raise ValueError("empty observation sequence")
    P = model.params
    for layer in range(model.config.layers):
        x, _ = G.lstm_layer(x, P[f"l{layer}.Wy"], P[f"l{layer}.Wh"], P[f"l{layer}.b"], truncate=truncate)
    return summary_head(x, model)


def encode_sequence(y, model: EncoderModel) -> np.ndarray:
    """Summaries s_1..s_T for one sequence y (T, d_y); returns (T, d_s)."""
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("expected a non-empty (T, d_y) sequence")
    with G.no_grad():
        return encode(y[None], model).data[0]


def encode_stream(y, model: EncoderModel, state: EncoderState | None = None):
    """Incremental encoding with a carried state; returns (summaries (T, d_s), final state)."""
    y = np.asarray(y)
    state = state or EncoderState.zeros(model.config)
    out = []
    with G.no_grad():
        for t in range(len(y)):
            state, top = lstm_step(y[t], state, model)
            out.append(summary_head(Tensor(top), model).data[0])
    return np.stack(out), state
