"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are 64-bit floats held in numpy arrays. Operations executed while a
Tape is active append a node (output + backward rule) to the tape; calling
``backward`` walks the tape in exact reverse execution order, so gradient
reduction order is deterministic and two identical runs produce bit-identical
gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, VocabularyError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """Linear record of executed ops; backward runs in reverse order."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes = []  # list of (out_tensor, parents, backward_fn)

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ContractError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


class Tensor:
    """Dense n-dimensional array of float64 with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # numpy array, same shape as data, once populated

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(out_data, parents, backward_fn) -> Tensor:
    """Create an op output, recording it on the active tape when any parent
    participates in differentiation."""
    out = Tensor(out_data)
    tape = Tape._active
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for out, backward_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        backward_fn(out.grad)


# ---------------------------------------------------------------------------
# shape helpers

def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Undo scalar broadcasting in a binary op's backward."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(a.data * c, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    e = erf(x * _INV_SQRT2)

    def bw(g):
        if a.requires_grad:
            d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
            _accum(a, g * d)

    return _make(0.5 * x * (1.0 + e), (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _make(np.abs(a.data), (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} are not conformable"
        )

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols expects a matrix, got shape {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accum(a, full)

    return _make(a.data[:, start:stop].copy(), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(f"token id out of range [0, {vocab})")

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _make(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizations

def tsum(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g)))

    return _make(np.sum(a.data), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g) / n))

    return _make(np.sum(a.data) / n, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = np.sum(g * y, axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

    return _make(y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        if a.requires_grad:
            _accum(a, g - sm * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    learned gain and bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis {d}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            _accum(bias, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gain.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)
