"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that
require gradients records a backward closure; :meth:`Tensor.backward`
replays them in reverse topological order. Only first-order gradients are
supported.

The module also carries the Adam optimizer, a central-difference gradient
checker and the flat named-tensor checkpoint format used across the package.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(_as_array(grad).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological(root: Tensor) -> list:
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
    return order


def scatter_rows(index, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[index[k]] += values[k]``, summed with a sparse product (faster than ``np.add.at``)."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    values = values.reshape(len(index), -1)
    sel = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                        shape=(n_rows, len(index)))
    return np.asarray(sel @ values)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


_GRAD_ENABLED = True
_KINK_LOG: list | None = None  # ReLU sign patterns, recorded only while grad_check runs


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _binary_shapes(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _binary_shapes("add", a.data, b.data)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _binary_shapes("sub", a.data, b.data)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _binary_shapes("mul", a.data, b.data)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", back)


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)

    def back(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), "relu", back)


def sigmoid(x) -> Tensor:
    x = tensor(x)
    out = _stable_sigmoid(x.data)

    def back(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", back)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x) -> Tensor:
    x = tensor(x)
    out = np.tanh(x.data)

    def back(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), "tanh", back)


def exp(x) -> Tensor:
    x = tensor(x)
    out = np.exp(x.data)

    def back(g):
        x._accumulate(g * out)

    return _make(out, (x,), "exp", back)


def log(x) -> Tensor:
    x = tensor(x)

    def back(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), "log", back)


def softplus(x) -> Tensor:
    x = tensor(x)
    out = np.logaddexp(0.0, x.data)

    def back(g):
        x._accumulate(g * _stable_sigmoid(x.data))

    return _make(out, (x,), "softplus", back)


def softmax(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), "softmax", back)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        if b.ndim == 2:
            # batched input times a shared weight: fold the batch axes into rows
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), "matmul", back)


def spmm(adj, x) -> Tensor:
    """Multiply a constant (scipy sparse or dense) matrix by a tensor."""
    x = tensor(x)
    if adj.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {adj.shape} and {x.shape}")
    adj_t = adj.T

    def back(g):
        x._accumulate(np.asarray(adj_t @ g))

    return _make(np.asarray(adj @ x.data), (x,), "spmm", back)


def transpose(x, axes=None) -> Tensor:
    x = tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def back(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), "transpose", back)


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def back(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), "reshape", back)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        shapes = [x.shape for x in xs]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            if x.requires_grad:
                x._accumulate(piece)

    return _make(out, xs, "concat", back)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out, (x,), "sum", back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(x, idx) -> Tensor:
    x = tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), "getitem", back)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {table.shape}")

    def back(g):
        full = scatter_rows(ids, g.reshape(-1, table.shape[-1]), table.shape[0])
        table._accumulate(full.reshape(table.shape))

    return _make(table.data[ids], (table,), "embedding", back)


def segment_sum(x, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given per-row bucket ids."""
    x = tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    out = scatter_rows(segments, x.data, n_segments).reshape((n_segments,) + x.shape[1:])

    def back(g):
        x._accumulate(g[segments])

    return _make(out, (x,), "segment_sum", back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), "layer_norm", back)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    logits = tensor(logits)
    y = _as_array(labels)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs labels {y.shape}")
    z = logits.data
    loss = np.mean(np.logaddexp(0.0, z) - y * z)

    def back(g):
        logits._accumulate(g * (_stable_sigmoid(z) - y) / z.size)

    return _make(np.asarray(loss), (logits,), "bce", back)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 0.0015
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> tuple:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters whose gradient is ``None`` are treated as having zero gradient.
    Raises ``FloatingPointError`` before touching anything if a gradient is
    non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int  # coordinates whose +-h evaluations crossed a ReLU kink
    worst: tuple = ()  # (parameter position, flat index) of the worst coordinate


@contextlib.contextmanager
def _record_kinks():
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _crossed(a: list, b: list) -> bool:
    return len(a) != len(b) or any(x.shape != y.shape or np.any(x != y) for x, y in zip(a, b))


def grad_check_report(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      n_coords: int = 200, seed: int = 0, floor: float = 1e-6,
                      skip_kinks: bool = True) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` must read the current values of ``params`` and return a scalar
    tensor. At most ``n_coords`` coordinates are sampled (seeded). The error of
    one coordinate is ``|a - n| / max(|a|, |n|, floor)``. Central differences
    are meaningless across a ReLU kink, so with ``skip_kinks`` a coordinate is
    left out when any ReLU input changes sign between the ``+h`` and ``-h``
    evaluations; the count is reported.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst, where, skipped = 0.0, (), 0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        with _record_kinks() as up_log:
            flat[j] = orig + h
            up = float(loss_fn().data)
        with _record_kinks() as down_log:
            flat[j] = orig - h
            down = float(loss_fn().data)
        flat[j] = orig
        if skip_kinks and _crossed(up_log, down_log):
            skipped += 1
            continue
        numeric = (up - down) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if err > worst:
            worst, where = err, (i, j)
    for p in params:
        p.zero_grad()
    return GradCheckResult(worst, len(coords) - skipped, skipped, where)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               n_coords: int = 200, seed: int = 0, floor: float = 1e-6,
               skip_kinks: bool = True) -> float:
    """Largest relative gradient error; see :func:`grad_check_report`."""
    return grad_check_report(loss_fn, params, h, n_coords, seed, floor, skip_kinks).max_error


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"GRESNT1\n"


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays: name, shape, then raw little-endian values."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a named-tensor checkpoint")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    return out


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]


class Params:
    """Ordered collection of named trainable tensors."""

    def __init__(self, seed: int = 0):
        self._t: dict = {}
        self.rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        self._t[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        return self.add(name, self.rng.normal(0.0, scale, (fan_in, fan_out)))

    def zeros(self, name: str, *shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def tensors(self) -> list:
        return list(self._t.values())

    def arrays(self) -> dict:
        return {k: t.data for k, t in self._t.items()}

    def grads(self) -> dict:
        return {k: t.grad for k, t in self._t.items()}

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self._t.items()}

    def restore(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self._t.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"restore: {k!r} has shape {arrays[k].shape}, expected {t.shape}")
            t.data[...] = arrays[k]
