"""A small reverse-mode autodiff engine on top of numpy.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. ``Tensor.backward`` walks
the trace in reverse topological order.
"""
from __future__ import annotations

import contextlib
import json
import logging
import struct
from collections import OrderedDict

import numpy as np
from scipy import sparse

log = logging.getLogger(__name__)

_grad_enabled = True


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable trace recording, e.g. for inference."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather(self, idx)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient produced by op {node.op!r}")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise and linear algebra ------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), backward, "matmul")


def concat(ts, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, tuple(ts), backward, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis, keepdims), 1.0 / n)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data >= 0
    y = np.where(pos, x.data, slope * x.data)
    return _make(y, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))
    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, axis=-1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(y, (x,), backward, "log_softmax")


# -- indexing and segment ops --------------------------------------------------

def _scatter_rows(idx, values, n, ufunc=np.add, fill=0):
    """``out[idx[k]] (op)= values[k]`` for a 1-D integer index."""
    if ufunc is np.add:
        flat = values.reshape(len(idx), -1)
        S = sparse.csr_matrix((np.ones(len(idx), dtype=values.dtype),
                               (idx, np.arange(len(idx)))), shape=(n, len(idx)))
        return np.asarray(S @ flat).reshape((n,) + values.shape[1:])
    out = np.full((n,) + values.shape[1:], fill, dtype=values.dtype)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = ufunc.reduceat(values[order], starts, axis=0)
    return out


def gather(x: Tensor, idx) -> Tensor:
    """``x[idx]`` for any numpy index; repeated indices accumulate gradient."""
    if isinstance(idx, list):
        idx = np.asarray(idx)
    rows = isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind in "iu"

    def backward(g):
        if rows:
            return (_scatter_rows(idx, g, x.shape[0]),)
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)
    return _make(x.data[idx], (x,), backward, "gather")


def segment_sum(x: Tensor, seg, n: int) -> Tensor:
    """``out[s] = sum of x[i] with seg[i] == s`` over the leading axis."""
    seg = np.asarray(seg)
    out = _scatter_rows(seg, x.data, n)
    return _make(out, (x,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(x: Tensor, seg, n: int) -> Tensor:
    """Softmax of ``x`` within each group of rows sharing a segment id."""
    seg = np.asarray(seg)
    mx = _scatter_rows(seg, x.data, n, np.maximum, -np.inf)
    e = np.exp(x.data - mx[seg])
    y = e / _scatter_rows(seg, e, n)[seg]

    def backward(g):
        dot = _scatter_rows(seg, g * y, n)
        return (y * (g - dot[seg]),)
    return _make(y, (x,), backward, "segment_softmax")


def segment_max(x: Tensor, starts, n_rows=None):
    """Max over contiguous row blocks beginning at ``starts``.

    Returns the pooled tensor and, per block and column, the lowest row
    offset (relative to the block start) attaining the maximum.
    """
    starts = np.asarray(starts, dtype=np.int64)
    if len(starts) == 0 or x.shape[0] == 0:
        raise ValueError("segment_max over an empty node set")
    n_rows = x.shape[0] if n_rows is None else n_rows
    if np.any(np.diff(np.append(starts, n_rows)) <= 0):
        raise ValueError("segment_max over an empty segment")
    mx = np.maximum.reduceat(x.data, starts, axis=0)
    sizes = np.diff(np.append(starts, n_rows))
    seg = np.repeat(np.arange(len(starts)), sizes)
    rows = np.arange(x.shape[0])[:, None]
    cand = np.where(x.data == mx[seg], rows, x.shape[0])
    arg = np.minimum.reduceat(cand, starts, axis=0)
    cols = np.arange(x.shape[1])[None, :]

    def backward(g):
        out = np.zeros_like(x.data)
        out[arg, np.broadcast_to(cols, arg.shape)] = g
        return (out,)
    return _make(mx, (x,), backward, "segment_max"), arg - starts[:, None]


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- parameters, initialization, optimization ------------------------------------

def xavier_init(shape, seed=0, dtype=np.float64) -> np.ndarray:
    """Glorot-uniform values on +-sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.default_rng(seed)
    fan_in, fan_out = (shape[0], 1) if len(shape) == 1 else (shape[0], shape[1])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParameterStore:
    """Named trainable tensors plus their Adam moment buffers."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.unreached: list[str] = []

    def add(self, name: str, values) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def reset_optimizer(self):
        for name, t in self.params.items():
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
        self.step = 0

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def n_values(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))


def backward(loss: Tensor, store: ParameterStore) -> dict[str, np.ndarray]:
    """Fill ``.grad`` for every parameter; unreachable ones get zeros."""
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss {loss.data}")
    store.zero_grad()
    loss.backward()
    store.unreached = []
    for name, t in store.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
            store.unreached.append(name)
    if store.unreached:
        log.debug("parameters unreachable from the loss: %s", store.unreached)
    return {name: t.grad for name, t in store.items()}


def adam_step(store: ParameterStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              step: int | None = None, names=None) -> None:
    """Bias-corrected Adam update of ``names`` (default: all parameters)."""
    if step is None:
        store.step += 1
        step = store.step
    else:
        store.step = step
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name in (store.params if names is None else names):
        t = store.params[name]
        if t.grad is None:
            continue
        g = t.grad
        m = store.m[name] = beta1 * store.m[name] + (1 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1 - beta2) * g * g
        if lr:
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- checkpoints ---------------------------------------------------------------
#
# Little-endian layout:
#   magic "TGCKPT\0\0" | u32 version | u64 adam step | u32 meta length | meta JSON
#   u32 parameter count, then per parameter:
#   u16 name length | name UTF-8 | u8 dtype (0 f32, 1 f64) | u8 ndim | u64 dims...
#   values | Adam first moment | Adam second moment   (each raw, C order)

MAGIC = b"TGCKPT\x00\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: ParameterStore, path, meta=None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQI", VERSION, store.step, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(store)))
        for name, t in store.items():
            nb = name.encode("utf-8")
            code = _CODES[t.dtype]
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<BB", code, t.ndim))
            f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            dt = _DTYPES[code]
            for arr in (t.data, store.m[name], store.v[name]):
                f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_checkpoint(path):
    """Return (meta, step, {name: (values, m, v)})."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, step, meta_len = struct.unpack_from("<IQI", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    off = 8 + 16
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(buf, dtype=dt, count=size, offset=off)
                          .reshape(shape).copy())
            off += size * dt.itemsize
        entries[name] = tuple(arrays)
    return meta, step, entries


def load_checkpoint(store: ParameterStore, path, names=None, moments=True) -> dict:
    """Copy checkpoint values into ``store``; shapes must match exactly."""
    meta, step, entries = read_checkpoint(path)
    wanted = list(store.params) if names is None else list(names)
    for name in wanted:
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        values, m, v = entries[name]
        t = store.params[name]
        if values.shape != t.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {values.shape}, model expects {t.shape}")
        t.data = values.astype(store.dtype)
        if moments:
            store.m[name] = m.astype(store.dtype)
            store.v[name] = v.astype(store.dtype)
    if moments and names is None:
        store.step = step
    return meta
