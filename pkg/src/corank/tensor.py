"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node holding its parents and a closure that pushes the
upstream gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order. Only the ops the ranking model needs are here;
softmax, layer norm and GELU are fused for speed and stability.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

DTYPE = np.float64
LN_EPS = 1e-12

_grad_enabled = True
_flop_counters: list["FlopCounter"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class FlopCounter:
    """Accumulates matmul FLOPs (2*m*k*n per product) while active."""

    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, tag: str, flops: int) -> None:
        self.total += flops
        self.by_op[tag] = self.by_op.get(tag, 0) + flops


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a, floor: float = 0.0) -> Tensor:
    """log(sigmoid(a)) without overflow, raised to log(floor) when ``floor`` > 0.

    The gradient is that of the unclamped function (straight through the
    floor), so saturated predictions on the wrong side keep a gradient.
    """
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    if floor > 0:
        out = np.maximum(out, np.log(floor))
    return _make(out, (a,), lambda g: (g * expit(-a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# -------------------------------------------------------------------- reductions
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------------ shapes
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


# ------------------------------------------------------------------------ matmul
def matmul(a, b, tag: str = "matmul") -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)
    if _flop_counters:
        k = a.shape[-1]
        flops = 2 * k * out.size
        for c in _flop_counters:
            c.add(tag, int(flops))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = _unbroadcast(np.matmul(g, bt), a.shape)
        if b.requires_grad:
            if b.ndim == 1:
                gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
            elif a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                at = np.swapaxes(a.data, -1, -2)
                gb = _unbroadcast(np.matmul(at, g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# ----------------------------------------------------------------- fused blocks
def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax; raises on NaN/Inf input."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError("softmax of an empty input")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(a, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis with population variance."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    h = a.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ValueError(f"layer_norm expects gamma/beta of shape ({h},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return ga, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (a, gamma, beta), backward)


# --------------------------------------------------------------- gradient check
@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict
    n_coords: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-6, n_samples: int | None = None, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values. ``n_samples`` coordinates are spread across the parameters
    (all coordinates when None). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    for p in params:
        p.grad = None
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    rng = np.random.default_rng(seed)
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        # at least one coordinate per parameter, the rest at random
        chosen = {(pi, int(rng.integers(p.data.size))) for pi, p in enumerate(params)}
        rest = rng.permutation(len(coords))
        for c in rest:
            if len(chosen) >= n_samples:
                break
            chosen.add(coords[c])
        coords = sorted(chosen)

    per_param: dict = {}
    for pi, j in coords:
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[j]
        with no_grad():
            flat[j] = orig + eps
            fp = loss_fn().item()
            flat[j] = orig - eps
            fm = loss_fn().item()
        flat[j] = orig
        num = (fp - fm) / (2.0 * eps)
        ana = analytic[p.name].reshape(-1)[j]
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        per_param[p.name] = max(per_param.get(p.name, 0.0), rel)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, len(coords))


# ------------------------------------------------------------ parameter snapshots
SNAPSHOT_MAGIC = "CORANK-PARAMS 1"


def save_snapshot(params: Iterable[Parameter], path, meta: dict | None = None) -> None:
    """Write parameters as: one UTF-8 header line, then binary records.

    Header: ``CORANK-PARAMS 1<TAB>{json metadata}\\n``. Then a little-endian
    u32 record count, and per record: u32 name length, name bytes (UTF-8),
    u32 ndim, ndim x u64 dims, u8 trainable, prod(dims) x f64 values.
    """
    with open(path, "wb") as fh:
        fh.write(snapshot_bytes(params, meta))


def snapshot_bytes(params: Iterable[Parameter], meta: dict | None = None) -> bytes:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names")
    buf = io.BytesIO()
    header = json.dumps(meta or {}, sort_keys=True, separators=(",", ":"))
    buf.write(f"{SNAPSHOT_MAGIC}\t{header}\n".encode("utf-8"))
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        buf.write(struct.pack("<B", int(p.trainable)))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_snapshot(path) -> tuple[dict, dict]:
    """Return ``(name -> Parameter, metadata)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    header = raw[:nl].decode("utf-8")
    magic, _, meta_json = header.partition("\t")
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    meta = json.loads(meta_json) if meta_json else {}
    pos = nl + 1
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        (trainable,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = Parameter(name, values.astype(DTYPE), trainable=bool(trainable))
    return out, meta
