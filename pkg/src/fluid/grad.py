"""Small reverse-mode differentiation engine over numpy arrays.

Every op records a closure that maps the output gradient to input gradients.
The op set is fixed to what the flows, the LSTM encoder and the losses need;
the LSTM recurrence is a single fused node with a hand-written BPTT backward.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True
_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/inf; carries the op name."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value in {where} of op '{op}'")
        self.op = op
        self.where = where


class ConfigurationError(ValueError):
    pass


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    # -- basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward_fn, op):
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars follow the tensor dtype
    if a.op == "leaf" and not a.requires_grad and a.data.ndim == 0:
        a = Tensor(a.data.astype(b.dtype))
    if b.op == "leaf" and not b.requires_grad and b.data.ndim == 0:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise
def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x):
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def sin(x):
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x):
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# ---------------------------------------------------------------- reductions / shape
def tsum(x, axis=None):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def tmean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x):
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(xs), bw, "concat")


def roll(x, shift, axis=-1):
    x = as_tensor(x)
    return _make(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


# ---------------------------------------------------------------- linear algebra
def matmul(a, b):
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` a 2-D (k, m) matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError("matmul: right operand must be 2-D")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x, W, b=None):
    """``x @ W.T + b`` with W stored as (out, in)."""
    out = matmul(x, transpose(W))
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- fused LSTM layer
def lstm_cell(x_t, h, c, Wy, Wh, b):
    """One LSTM step on plain arrays. Gate rows are stacked in order (i, f, o, g)."""
    H = h.shape[-1]
    z = x_t @ Wy.T + h @ Wh.T + b
    i = _sigmoid_np(z[..., :H])
    f = _sigmoid_np(z[..., H:2 * H])
    o = _sigmoid_np(z[..., 2 * H:3 * H])
    gg = np.tanh(z[..., 3 * H:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (i, f, o, gg, tc)


def lstm_layer(x, Wy, Wh, b, h0=None, c0=None, truncate=None):
    """Run one LSTM layer over a whole sequence.

    x: (B, T, d_in) tensor. Returns (hidden sequence tensor (B, T, H), (h_T, c_T)).
    ``truncate`` stops gradient flow through the recurrent state every that many steps.
    """
    x, Wy, Wh, b = as_tensor(x), as_tensor(Wy), as_tensor(Wh), as_tensor(b)
    B, T, _ = x.shape
    H = Wh.shape[1]
    h = np.zeros((B, H), dtype=Wh.dtype) if h0 is None else h0
    c = np.zeros((B, H), dtype=Wh.dtype) if c0 is None else c0
    hs = np.empty((B, T, H), dtype=np.result_type(x.dtype, Wh.dtype))
    cache = []
    for t in range(T):
        h_prev, c_prev = h, c
        h, c, gates = lstm_cell(x.data[:, t], h_prev, c_prev, Wy.data, Wh.data, b.data)
        hs[:, t] = h
        cache.append((h_prev, c_prev, gates))

    def bw(gH):
        dWy = np.zeros_like(Wy.data)
        dWh = np.zeros_like(Wh.data)
        db = np.zeros_like(b.data)
        dx = np.zeros_like(x.data)
        dh_next = np.zeros((B, H), dtype=gH.dtype)
        dc_next = np.zeros((B, H), dtype=gH.dtype)
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, (i, f, o, gg, tc) = cache[t]
            dh = gH[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate(
                [dc * gg * i * (1.0 - i), dc * c_prev * f * (1.0 - f), do * o * (1.0 - o), dc * i * (1.0 - gg * gg)],
                axis=-1,
            )
            dWy += dz.T @ x.data[:, t]
            dWh += dz.T @ h_prev
            db += dz.sum(axis=0)
            dx[:, t] = dz @ Wy.data
            if truncate and t % truncate == 0:
                dh_next = np.zeros_like(dh_next)
                dc_next = np.zeros_like(dc_next)
            else:
                dh_next = dz @ Wh.data
                dc_next = dc * f
        return dx, dWy, dWh, db

    return _make(hs, (x, Wy, Wh, b), bw, "lstm"), (h, c)


# ---------------------------------------------------------------- backprop
def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad_of(loss: Tensor, leaves):
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``leaves`` (zeros if unused)."""
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            # keep leaf grads around; intermediate grads are freed after use
            for p, gp in zip(node.parents, node.backward_fn(g)):
                if not p.requires_grad:
                    continue
                if _CHECK_FINITE and not np.all(np.isfinite(gp)):
                    raise NonFiniteError(node.op, where="backward")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + gp
                else:
                    grads[id(p)] = gp
    return [grads.get(id(t), np.zeros_like(t.data)) for t in leaves]


# ---------------------------------------------------------------- parameters and optimiser
@dataclass
class ParamStore:
    """Named parameter blocks with gradient accumulators and Adam moments."""

    tensors: dict = field(default_factory=dict)
    frozen: set = field(default_factory=set)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value, frozen=False):
        t = Tensor(np.array(value), requires_grad=not frozen, name=name)
        self.tensors[name] = t
        if frozen:
            self.frozen.add(name)
        self.grads[name] = np.zeros_like(t.data)
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self):
        return [n for n in self.tensors if n not in self.frozen]

    def astype(self, dtype):
        for name, t in self.tensors.items():
            t.data = t.data.astype(dtype)
            self.grads[name] = self.grads[name].astype(dtype)
            self.m[name] = self.m[name].astype(dtype)
            self.v[name] = self.v[name].astype(dtype)
        return self

    @classmethod
    def union(cls, stores: dict) -> "ParamStore":
        """Combine stores under name prefixes. Tensors are shared, optimiser state is fresh."""
        out = cls()
        for prefix, store in stores.items():
            for name, t in store.tensors.items():
                key = f"{prefix}.{name}"
                out.tensors[key] = t
                if name in store.frozen:
                    out.frozen.add(key)
                out.grads[key] = np.zeros_like(t.data)
                out.m[key] = np.zeros_like(t.data)
                out.v[key] = np.zeros_like(t.data)
        return out

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in self.grads.values())))

    def zero_grad(self):
        for k in self.grads:
            self.grads[k] = np.zeros_like(self.tensors[k].data)

    def state_arrays(self):
        """Flat dict of values and optimiser state, for checkpoints."""
        out = {}
        for k, t in self.tensors.items():
            out[f"param/{k}"] = t.data
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        out["adam_step"] = np.array(self.step)
        return out

    def load_state_arrays(self, arrays):
        for k, t in self.tensors.items():
            t.data = np.array(arrays[f"param/{k}"], dtype=t.data.dtype)
            if f"adam_m/{k}" in arrays:
                self.m[k] = np.array(arrays[f"adam_m/{k}"], dtype=t.data.dtype)
                self.v[k] = np.array(arrays[f"adam_v/{k}"], dtype=t.data.dtype)
        if "adam_step" in arrays:
            self.step = int(np.ravel(arrays["adam_step"])[0])


def backprop(loss: Tensor, params: ParamStore) -> ParamStore:
    names = list(params.tensors)
    grads = grad_of(loss, [params.tensors[n] for n in names])
    for n, g in zip(names, grads):
        params.grads[n] = np.asarray(g, dtype=params.tensors[n].dtype)
    return params


def adam_step(params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, tensor in params.tensors.items():
        if n in params.frozen:
            params.grads[n] = np.zeros_like(tensor.data)
            continue
        g = params.grads[n]
        m = b1 * params.m[n] + (1.0 - b1) * g
        v = b2 * params.v[n] + (1.0 - b2) * g * g
        params.m[n] = m.astype(tensor.dtype)
        params.v[n] = v.astype(tensor.dtype)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        tensor.data = (tensor.data - upd).astype(tensor.dtype)
        params.grads[n] = np.zeros_like(tensor.data)
    return params


def clip_grad_norm(params: ParamStore, max_norm: float) -> ParamStore:
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    norm = params.grad_norm()
    if norm > max_norm:
        scale = max_norm / norm
        for n in params.grads:
            params.grads[n] = (params.grads[n] * scale).astype(params.grads[n].dtype)
    return params
