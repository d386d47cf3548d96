"""Joint training of the summary encoder, forward flow and backward flow."""
from __future__ import annotations

import copy
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .encoder import EncoderConfig, EncoderModel, encode, init_encoder
from .flows import FlowConfig, FlowModel, init_flow, log_prob
from .grad import ConfigurationError, ParamStore, Tensor
from .io import load_container, save_container, write_csv
from .ssm import Standardizer, Trajectories


class TrainingAborted(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class ArchConfig:
    hidden_dim: int = 128
    layers: int = 4
    summary_dim: int | None = None
    num_coupling: int = 6
    mlp_depth: int = 6
    mlp_width: int = 64
    rff_features: int = 64
    sb_width: int = 64
    dtype: str = "float32"


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lam: float | None = None  # None -> (T-1)/T
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine"
    lr_min_factor: float = 0.05
    grad_clip: float | None = 10.0
    shared_summary: bool = True
    seed: int = 0
    val_fraction: float = 0.1
    truncate: int | None = None
    checkpoint_every: int = 10
    out_dir: str | None = None
    deterministic: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise ConfigurationError("lambda must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass
class FluidModel:
    encoder: EncoderModel
    forward: FlowModel
    backward: FlowModel
    u_stats: Standardizer
    y_stats: Standardizer
    encoder_bwd: EncoderModel | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        stores = {"enc": self.encoder.params, "fwd": self.forward.params, "bwd": self.backward.params}
        if self.encoder_bwd is not None:
            stores["enc_bwd"] = self.encoder_bwd.params
        self.params = ParamStore.union(stores)

    @property
    def shared_summary(self):
        return self.encoder_bwd is None

    @property
    def d_u(self):
        return self.forward.config.data_dim

    @property
    def d_y(self):
        return self.encoder.config.obs_dim

    @property
    def dtype(self):
        return self.encoder.dtype

    def summaries(self, y_std, backward=False, truncate=None) -> Tensor:
        enc = self.encoder_bwd if (backward and self.encoder_bwd is not None) else self.encoder
        return encode(y_std, enc, truncate)


def init_fluid(d_u, d_y, arch: ArchConfig | None = None, shared_summary=True, u_stats=None, y_stats=None,
               rng=None) -> FluidModel:
    arch = arch or ArchConfig()
    rng = rng or np.random.default_rng(0)
    ecfg = EncoderConfig(obs_dim=d_y, hidden_dim=arch.hidden_dim, layers=arch.layers,
                         summary_dim=arch.summary_dim, dtype=arch.dtype)
    d_s = ecfg.summary_dim
    flow_kw = dict(num_coupling=arch.num_coupling, mlp_depth=arch.mlp_depth, mlp_width=arch.mlp_width,
                   rff_features=arch.rff_features, sb_width=arch.sb_width, dtype=arch.dtype)
    enc = init_encoder(ecfg, rng)
    with warnings.catch_warnings():
        if d_u == 1:
            warnings.simplefilter("ignore")
        fwd = init_flow(FlowConfig(data_dim=d_u, cond_dim=d_s, **flow_kw), rng)
        bwd = init_flow(FlowConfig(data_dim=d_u, cond_dim=d_u + d_s, **flow_kw), rng)
    enc_b = None if shared_summary else init_encoder(ecfg, rng)
    return FluidModel(enc, fwd, bwd, u_stats or Standardizer.identity(d_u), y_stats or Standardizer.identity(d_y),
                      enc_b, meta={"arch": asdict(arch)})


def default_lambda(T: int) -> float:
    return (T - 1) / T


def _standardize(model: FluidModel, u, y):
    dt = model.dtype
    u = np.asarray(u)
    y = np.asarray(y)
    if u.ndim == 2:
        u, y = u[None], y[None]
    if u.shape[:2] != y.shape[:2]:
        raise ValueError("state and observation batches disagree on (N, T)")
    if u.shape[-1] != model.d_u or y.shape[-1] != model.d_y:
        raise ValueError(f"data dims ({u.shape[-1]}, {y.shape[-1]}) do not match model ({model.d_u}, {model.d_y})")
    return model.u_stats.forward(u).astype(dt), model.y_stats.forward(y).astype(dt)


def loss_terms(u, y, model: FluidModel, truncate=None):
    """Per-(trajectory, step) log densities in standardized coordinates.

    Returns (lp_fwd (B, T), lp_bwd (B, T-1)) as tensors.
    """
    z, ys = _standardize(model, u, y)
    B, T, d = z.shape
    if T < 2:
        raise ValueError("trajectories need T >= 2 for the joint loss")
    s = model.summaries(ys, truncate=truncate)
    d_s = s.shape[-1]
    zt = Tensor(z)
    lp_f = log_prob(G.reshape(zt, (B * T, d)), G.reshape(s, (B * T, d_s)), model.forward)
    s_b = s if model.shared_summary else model.summaries(ys, backward=True, truncate=truncate)
    cond = G.concat([zt[:, 1:], s_b[:, :-1]], axis=-1)
    lp_b = log_prob(G.reshape(zt[:, :-1], (B * (T - 1), d)), G.reshape(cond, (B * (T - 1), d + d_s)), model.backward)
    return G.reshape(lp_f, (B, T)), G.reshape(lp_b, (B, T - 1))


def joint_loss(u, y, model: FluidModel, lam: float | None = None, truncate=None):
    """Weighted NLL: -mean(log p_fwd) - lam * mean(log p_bwd). Returns (loss, parts)."""
    lp_f, lp_b = loss_terms(u, y, model, truncate)
    T = lp_f.shape[1]
    lam = default_lambda(T) if lam is None else lam
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    fwd = -G.tmean(lp_f)
    bwd = -G.tmean(lp_b)
    loss = fwd + bwd * lam if lam else fwd
    return loss, {"fwd_nll": float(fwd.data), "bwd_nll": float(bwd.data), "lam": lam}


# ---------------------------------------------------------------- persistence
def model_arrays(model: FluidModel):
    return {f"param/{k}": t.data for k, t in model.params.items()}


def model_header(model: FluidModel):
    return {
        "format": "fluid-model",
        "encoder": model.encoder.config.to_dict(),
        "forward": model.forward.config.to_dict(),
        "backward": model.backward.config.to_dict(),
        "shared_summary": model.shared_summary,
        "u_mean": model.u_stats.mean, "u_std": model.u_stats.std,
        "y_mean": model.y_stats.mean, "y_std": model.y_stats.std,
        "meta": model.meta,
    }


def save_model(path, model: FluidModel, extra_header=None, extra_arrays=None):
    header = model_header(model)
    header.update(extra_header or {})
    arrays = model_arrays(model)
    arrays.update(extra_arrays or {})
    return save_container(path, header, arrays)


def model_from_header(header) -> FluidModel:
    ecfg = EncoderConfig(**header["encoder"])
    fcfg, bcfg = FlowConfig(**header["forward"]), FlowConfig(**header["backward"])
    rng = np.random.default_rng(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fwd, bwd = init_flow(fcfg, rng), init_flow(bcfg, rng)
    enc_b = None if header["shared_summary"] else init_encoder(ecfg, rng)
    return FluidModel(init_encoder(ecfg, rng), fwd, bwd,
                      Standardizer(np.array(header["u_mean"]), np.array(header["u_std"])),
                      Standardizer(np.array(header["y_mean"]), np.array(header["y_std"])),
                      enc_b, meta=header.get("meta", {}))


def load_model(path):
    header, arrays = load_container(path)
    if header.get("format") not in ("fluid-model", "fluid-checkpoint"):
        raise ValueError(f"{path} is not a FLUID model container")
    model = model_from_header(header)
    model.params.load_state_arrays(arrays)
    return model


def save_checkpoint(path, model: FluidModel, epoch: int, history, rng_state=None):
    header = model_header(model)
    header.update({"format": "fluid-checkpoint", "epoch": epoch, "history": history, "rng_state": rng_state})
    return save_container(path, header, model.params.state_arrays())


def load_checkpoint(path):
    header, arrays = load_container(path)
    model = model_from_header(header)
    model.params.load_state_arrays(arrays)
    return model, header


# ---------------------------------------------------------------- training loop
@dataclass
class TrainResult:
    model: FluidModel
    history: list
    checkpoint: str | None = None


def _split(n, frac, rng):
    perm = rng.permutation(n)
    n_val = int(round(frac * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if frac > 0 and n > 1 else 0), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _lr_at(cfg: TrainConfig, epoch: int):
    if cfg.lr_schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        frac = epoch / max(cfg.epochs - 1, 1)
        lo = cfg.lr * cfg.lr_min_factor
        return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * frac))
    raise ConfigurationError(f"unknown lr_schedule {cfg.lr_schedule!r}")


def evaluate_nll(model: FluidModel, data: Trajectories, lam=None, batch_size=256):
    """(joint loss, forward NLL, backward NLL) averaged over ``data``; no gradients."""
    tot = np.zeros(3)
    n = 0
    with G.no_grad():
        for i in range(0, data.n, batch_size):
            sl = slice(i, i + batch_size)
            loss, parts = joint_loss(data.u[sl], data.y[sl], model, lam)
            b = data.u[sl].shape[0]
            tot += b * np.array([float(loss.data), parts["fwd_nll"], parts["bwd_nll"]])
            n += b
    return tot / max(n, 1)


def _snapshot(params: ParamStore):
    return {k: v.copy() for k, v in params.state_arrays().items()}


def train(data: Trajectories, config: TrainConfig, arch: ArchConfig | None = None, u_stats=None, y_stats=None,
          model: FluidModel | None = None, history=None, start_epoch: int = 0, callback=None) -> TrainResult:
    """Mini-batch Adam on the joint loss; 90/10 trajectory split for validation."""
    if data.T < 2:
        raise ValueError("trajectories need T >= 2")
    ss = np.random.SeedSequence(config.seed)
    init_ss, split_ss, batch_ss = ss.spawn(3)
    split_rng = np.random.default_rng(split_ss)
    tr_idx, va_idx = _split(data.n, config.val_fraction, split_rng)
    train_set, val_set = data[tr_idx], (data[va_idx] if len(va_idx) else None)
    if config.batch_size > len(tr_idx):
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds training set size {len(tr_idx)}")
    if model is None:
        if u_stats is None:
            u_stats = Standardizer.fit(np.asarray(train_set.u, np.float64))
        if y_stats is None:
            y_stats = Standardizer.fit(np.asarray(train_set.y, np.float64))
        model = init_fluid(data.u.shape[-1], data.y.shape[-1], arch, config.shared_summary, u_stats, y_stats,
                           np.random.default_rng(init_ss))
    model.meta["train"] = asdict(config)
    params = model.params
    batch_rng = np.random.default_rng(batch_ss)
    # skip the shuffles of completed epochs so resumed runs see the same batches
    for _ in range(start_epoch):
        batch_rng.permutation(len(tr_idx))
    history = list(history or [])
    out = Path(config.out_dir) if config.out_dir else None
    ckpt = None
    lam = config.lam
    good = _snapshot(params)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        lr = _lr_at(config, epoch)
        perm = batch_rng.permutation(len(tr_idx))
        nb = len(perm) // config.batch_size
        run = 0.0
        for b in range(nb):
            idx = np.sort(perm[b * config.batch_size:(b + 1) * config.batch_size])
            try:
                loss, _ = joint_loss(train_set.u[idx], train_set.y[idx], model, lam, config.truncate)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise G.NonFiniteError("joint_loss")
                G.backprop(loss, params)
            except G.NonFiniteError as err:
                params.load_state_arrays(good)
                raise TrainingAborted(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}: {err}", ckpt) from err
            if config.grad_clip:
                G.clip_grad_norm(params, config.grad_clip)
            G.adam_step(params, lr)
            run += val
        good = _snapshot(params)
        train_nll = run / max(nb, 1)
        if val_set is not None:
            v_loss, v_fwd, v_bwd = evaluate_nll(model, val_set, lam)
        else:
            v_loss = v_fwd = v_bwd = float("nan")
        wall = 0.0 if config.deterministic else time.perf_counter() - t0
        rec = {"epoch": epoch + 1, "train_nll": train_nll, "val_nll": v_loss, "val_fwd_nll": v_fwd,
               "val_bwd_nll": v_bwd, "lr": lr, "wall_time": wall}
        history.append(rec)
        if config.verbose:
            print(f"epoch {epoch + 1:4d}  train {train_nll:.4f}  val {v_loss:.4f}  fwd {v_fwd:.4f}  bwd {v_bwd:.4f}")
        if out is not None:
            if (epoch + 1) % max(config.checkpoint_every, 1) == 0 or epoch + 1 == config.epochs:
                ckpt = str(save_checkpoint(out / "checkpoint.npz", model, epoch + 1, history))
            write_training_log(out / "train_log.csv", history)
        if callback is not None:
            callback(rec, model)
    return TrainResult(model, history, ckpt)


LOG_COLUMNS = ["epoch", "train_nll", "val_nll", "val_fwd_nll", "val_bwd_nll", "lr", "wall_time"]


def write_training_log(path, history):
    return write_csv(path, "train_log", LOG_COLUMNS, [[r[c] for c in LOG_COLUMNS] for r in history])


def resume(checkpoint_path, data: Trajectories, config: TrainConfig, callback=None) -> TrainResult:
    model, header = load_checkpoint(checkpoint_path)
    return train(data, config, model=model, history=header.get("history"), start_epoch=int(header["epoch"]),
                 callback=callback)


def clone_model(model: FluidModel) -> FluidModel:
    return copy.deepcopy(model)
