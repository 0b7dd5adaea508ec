"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a numpy array. Operations that touch at least one
gradient-carrying tensor are recorded, in execution order, on a global
``Tape``. ``backward(loss)`` walks the tape once in reverse, accumulating
gradients into ``.grad`` of every ``requires_grad`` leaf that contributed
to the loss.

Broadcasting is deliberately restricted: elementwise add accepts equal
shapes or a row-vector bias against a matrix; elementwise mul/div accept
equal shapes or a size-1 (scalar) operand. Everything else must be shaped
explicitly. This keeps every backward rule small and individually tested.

64-bit precision is the default; pass float32 data explicitly to opt in
to 32-bit (gradient checks are only reliable at 64-bit).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "add",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "tensor_sum",
    "mean_pool",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "softmax",
    "layer_norm",
    "embedding_lookup",
    "bce_loss",
    "BCE_CLAMP",
]

BCE_CLAMP = 1e-7
_GELU_C = math.sqrt(2.0 / math.pi)


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype)
    if arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64)


class Tensor:
    """An n-dimensional array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def _live(self) -> bool:
        return self.requires_grad or self._tracked

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs always precede outputs."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def clear(self):
        self.entries.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(op: str, inputs: Sequence[Tensor], output: Tensor,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
    if _GRAD_ENABLED and any(t._live() for t in inputs):
        output._tracked = True
        _TAPE.entries.append(_TapeEntry(op, tuple(inputs), output, backward_fn))
    return output


def backward(loss: Tensor, clear: bool = True):
    """Populate ``.grad`` on every contributing requires_grad leaf.

    The loss must be a scalar (size-1) tensor produced under the active
    tape. Each recorded operation is visited exactly once, in reverse.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(_TAPE.entries):
        g = flowing.pop(id(entry.output), None)
        if g is None:
            continue
        grads = entry.backward_fn(g)
        for inp, gi in zip(entry.inputs, grads):
            if gi is None:
                continue
            if inp.requires_grad:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            if inp._tracked:
                if id(inp) in flowing:
                    flowing[id(inp)] = flowing[id(inp)] + gi
                else:
                    flowing[id(inp)] = gi
    if clear:
        _TAPE.clear()


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts a 1-d row bias against a matrix."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g

        return _record("add", (a, b), out, bwd)
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g.sum(axis=0)

        return _record("add_bias", (a, b), out, bwd)
    if b.data.ndim == 2 and a.data.ndim == 1 and a.shape[0] == b.shape[1]:
        return add(b, a)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data)
    return _record("neg", (a,), out, lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. c)."""
    a = _wrap(a)
    out = Tensor(a.data * c)
    return _record("scale", (a,), out, lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a size-1 scalar tensor."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        out = Tensor(a.data * b.data)

        def bwd(g):
            return g * b.data, g * a.data

        return _record("mul", (a, b), out, bwd)
    if b.data.size == 1:
        out = Tensor(a.data * b.data.reshape(()))

        def bwd(g):
            return (g * b.data.reshape(()),
                    np.sum(g * a.data).reshape(b.shape))

        return _record("mul_scalar", (a, b), out, bwd)
    if a.data.size == 1:
        return mul(b, a)
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def div(a, b) -> Tensor:
    """Elementwise quotient; the denominator may be a size-1 scalar tensor."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        out = Tensor(a.data / b.data)

        def bwd(g):
            return g / b.data, -g * a.data / (b.data ** 2)

        return _record("div", (a, b), out, bwd)
    if b.data.size == 1:
        s = b.data.reshape(())
        out = Tensor(a.data / s)

        def bwd(g):
            return g / s, (-np.sum(g * a.data) / s ** 2).reshape(b.shape)

        return _record("div_scalar", (a, b), out, bwd)
    raise DimensionError(f"div: incompatible shapes {a.shape} and {b.shape}")


# ----------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, bwd)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record("transpose", (a,), out, lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape).copy())
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.array(a.data[key]))

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _record("getitem", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bwd)


def tensor_sum(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sum(a.data, axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True),)

    return _record("sum", (a,), out, bwd)


def mean_pool(a, axis: int = 0) -> Tensor:
    """Arithmetic mean along one axis (the axis is removed)."""
    a = _wrap(a)
    n = a.shape[axis]
    out = Tensor(np.mean(a.data, axis=axis))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True) / n,)

    return _record("mean_pool", (a,), out, bwd)


# ----------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record("relu", (a,), out, lambda g: (g * (a.data > 0),))


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _record("gelu", (a,), out, bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = np.where(a.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(s)
    return _record("sigmoid", (a,), out, lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)
    out = Tensor(t)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - t ** 2),))


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis; rows sum to 1."""
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record("softmax", (a,), out, bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to zero mean / unit variance,
    then apply elementwise gain and bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gain.data * xhat + bias.data)

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - np.mean(dxhat, axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgain = np.sum(g * xhat, axis=axes) if axes else g * xhat
        dbias = np.sum(g, axis=axes) if axes else g.copy()
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (1-d)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding_lookup: ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out = Tensor(table.data[ids].copy())

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record("embedding_lookup", (table,), out, bwd)


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy from probabilities.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs; the clamp
    also zeroes the gradient outside the open interval.
    """
    p, y = _wrap(p), _wrap(y)
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss: shapes disagree: {p.shape} vs {y.shape}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.data.size
    loss = -np.sum(y.data * np.log(pc) + (1.0 - y.data) * np.log(1.0 - pc)) / n
    out = Tensor(loss)
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)

    def bwd(g):
        gs = float(np.reshape(g, ()))
        dp = gs * inside * (pc - y.data) / (pc * (1.0 - pc)) / n
        dy = gs * (np.log(1.0 - pc) - np.log(pc)) / n
        return dp, dy

    return _record("bce_loss", (p, y), out, bwd)
