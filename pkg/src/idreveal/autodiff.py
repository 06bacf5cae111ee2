"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the two networks and their losses need are provided.
Everything runs in float64.  Each op records its parents and a closure that
pushes the output gradient back to them; ``backward`` walks the graph in
reverse topological order.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AccumulationError,
    ConfigError,
    FormatError,
    MissingGradError,
    ShapeError,
    TruncationError,
)

_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: _accum(a, g * out_data), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * a.data * g), "square")


def log1mexp(a) -> Tensor:
    """log(1 - exp(a)) for a < 0, evaluated without cancellation."""
    a = as_tensor(a)
    x = a.data
    out = np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))

    def bw(g):
        # d/dx log(1 - e^x) = -1 / expm1(-x)
        _accum(a, g * (-1.0 / np.expm1(-x)))

    return _make(out, (a,), bw, "log1mexp")


def leaky_relu(a, slope=0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: _accum(a, np.where(pos, g, slope * g)), "leaky_relu")


# --- shape manipulation ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)), "reshape")


def index(a, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), bw, "index")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: _accum(a, _unbroadcast(g, old)), "broadcast")


# --- reductions ----------------------------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape))

    return _make(np.sum(a.data, axis=axis), (a,), bw, "sum")


def tmin(a, axis) -> Tensor:
    """Minimum along one axis; the gradient goes to the first minimiser."""
    a = as_tensor(a)
    arg = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        _accum(a, full)

    return _make(out, (a,), bw, "min")


def logsumexp(a, axis, mask=None) -> Tensor:
    """log sum exp along ``axis`` restricted to entries where ``mask`` is true.

    Max-shifted for stability.  Every reduced slice must keep at least one entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(mask, x.shape)
    if not np.all(mask.any(axis=axis)):
        raise ShapeError("logsumexp mask leaves an empty slice")
    xm = np.where(mask, x, -np.inf)
    m = np.max(xm, axis=axis, keepdims=True)
    e = np.where(mask, np.exp(xm - m), 0.0)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        _accum(a, np.expand_dims(g, axis) * e / s)

    return _make(out, (a,), bw, "logsumexp")


# --- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def pairwise_sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between the rows of a (n, d) and b (m, d).

    Uses the |a|^2 + |b|^2 - 2 a.b expansion, clamped at zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    aa = np.sum(a.data * a.data, axis=1)
    bb = np.sum(b.data * b.data, axis=1)
    raw = aa[:, None] + bb[None, :] - 2.0 * (a.data @ b.data.T)
    active = raw > 0
    out = np.where(active, raw, 0.0)

    def bw(g):
        g = np.where(active, g, 0.0)
        if a.requires_grad:
            _accum(a, 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data))
        if b.requires_grad:
            _accum(b, 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data))

    return _make(out, (a, b), bw, "pairwise_sqdist")


def l2_normalize(a, axis=-1, eps=1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm

    def bw(g):
        _accum(a, (g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm)

    return _make(y, (a,), bw, "l2_normalize")


# --- network primitives ----------------------------------------------------------

def conv1d(x, kernel, bias=None, dilation=1) -> Tensor:
    """Same-length, temporally centred dilated cross-correlation.

    x: (T, C_in) or (B, T, C_in); kernel: (K, C_in, C_out); bias: (C_out,).
    out[t, o] = bias[o] + sum_{k,c} x[t + (k - K//2) * dilation, c] * kernel[k, c, o],
    with zeros outside the sequence.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (K, C_in, C_out), got {kernel.shape}")
    K, cin, cout = kernel.shape
    if K % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {K}")
    if dilation < 1 or int(dilation) != dilation:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    if x.ndim not in (2, 3) or x.shape[-1] != cin:
        raise ShapeError(f"input {x.shape} does not match kernel input channels {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, T, _ = xd.shape
    pad = (K // 2) * dilation
    xp = np.zeros((B, T + 2 * pad, cin))
    xp[:, pad:pad + T] = xd
    w = kernel.data
    out = np.zeros((B, T, cout))
    for k in range(K):
        s = k * dilation
        out += xp[:, s:s + T] @ w[k]
    if bias is not None:
        out += bias.data

    def bw(g):
        g3 = g[None] if squeeze else g
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                s = k * dilation
                gxp[:, s:s + T] += g3 @ w[k].T
            gx = gxp[:, pad:pad + T]
            _accum(x, gx[0] if squeeze else gx)
        if kernel.requires_grad:
            g2 = g3.reshape(-1, cout)
            gw = np.stack([xp[:, k * dilation:k * dilation + T].reshape(-1, cin).T @ g2
                           for k in range(K)])
            _accum(kernel, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g3.reshape(-1, cout).sum(axis=0))

    return _make(out[0] if squeeze else out, (x, kernel, bias), bw, "conv1d")


def group_norm(x, groups, gamma, beta, eps=1e-5, over_time=True) -> Tensor:
    """Group normalisation of (T, C) or (B, T, C) inputs.

    With ``over_time`` the statistics of a group pool its channels and all T
    time steps; otherwise each time step is normalised on its own, which keeps
    a layer strictly frame-local.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if groups < 1 or C % groups:
        raise ConfigError(f"{C} channels are not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("gamma and beta must have one entry per channel")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, T, _ = xd.shape
    cg = C // groups
    xg = xd.reshape(B, T, groups, cg)
    axes = (1, 3) if over_time else (3,)
    mu = xg.mean(axis=axes, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    xhat_flat = xhat.reshape(B, T, C)
    out = xhat_flat * gamma.data + beta.data

    def bw(g):
        g3 = g[None] if squeeze else g
        if gamma.requires_grad:
            _accum(gamma, (g3 * xhat_flat).reshape(-1, C).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g3.reshape(-1, C).sum(axis=0))
        if x.requires_grad:
            gh = (g3 * gamma.data).reshape(B, T, groups, cg)
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            gx = gx.reshape(B, T, C)
            _accum(x, gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, (x, gamma, beta), bw, "group_norm")


# --- backward ------------------------------------------------------------------

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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaves that already hold a gradient raise AccumulationError; reset them
    with ``zero_grad`` first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    leaves = [n for n in order if n.requires_grad and not n._parents]
    stale = [n for n in leaves if n.grad is not None]
    if stale:
        raise AccumulationError(f"{len(stale)} tensor(s) already hold gradients; call zero_grad first")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None  # intermediates do not keep gradients
        node._backward(g)


def zero_grad(tensors) -> None:
    for t in (tensors.values() if isinstance(tensors, dict) else tensors):
        t.grad = None


# --- parameters and optimisation -------------------------------------------------

class ParamSet(dict):
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, items=None):
        super().__init__()
        for name, value in (dict(items) if items is not None else {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        super().__setitem__(name, t)

    def names(self):
        return sorted(dict.keys(self))

    def items(self):
        return [(n, dict.__getitem__(self, n)) for n in self.names()]

    def values(self):
        return [dict.__getitem__(self, n) for n in self.names()]

    def __iter__(self):
        return iter(self.names())

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({n: t.data.copy() for n, t in self.items()})

    def frozen(self) -> dict:
        """Constant views of the parameters (no gradients flow into them)."""
        return {n: Tensor(t.data) for n, t in self.items()}

    def zero_grad(self):
        zero_grad(self)

    def equal(self, other) -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self.names())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, lr: float):
    """One bias-corrected ADAM update, in place.  Gradients are left untouched."""
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradError(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(f, x, eps=1e-5) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` maps a Tensor (requires_grad) to a scalar Tensor.  ``x`` is an
    array or Tensor; a list of them checks all jointly.
    """
    xs = x if isinstance(x, (list, tuple)) else [x]
    base = [np.array(xi.data if isinstance(xi, Tensor) else xi, dtype=np.float64) for xi in xs]
    leaves = [Tensor(b.copy(), requires_grad=True) for b in base]
    out = f(*leaves)
    backward(out)
    worst = 0.0
    for i, b in enumerate(base):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(b)
        flat = b.reshape(-1)
        for j in range(flat.size):
            vals = []
            for sgn in (1.0, -1.0):
                pert = [bb.copy() for bb in base]
                pert[i].reshape(-1)[j] += sgn * eps
                with no_grad():
                    vals.append(float(f(*[Tensor(p) for p in pert]).data))
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# --- checkpoint format -----------------------------------------------------------

CKPT_MAGIC = b"IDRC"
CKPT_VERSION = 1


def serialize_tensors(tensors: dict) -> bytes:
    """IDRC encoding of name -> array, names in lexicographic order."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def parse_tensors(data: bytes) -> dict:
    data = bytes(data)
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncationError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        out[name] = arr
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    return out


def save_checkpoint(path, tensors: dict) -> None:
    Path(path).write_bytes(serialize_tensors(tensors))


def load_checkpoint(path) -> dict:
    return parse_tensors(Path(path).read_bytes())
