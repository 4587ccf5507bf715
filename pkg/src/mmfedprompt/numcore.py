"""Float-64 tensors with a minimal reverse-mode tape.

Every operation returns a new immutable :class:`Tensor` recorded on the tape of
its inputs.  Operations accept plain arrays wherever a non-differentiable
constant is meant; if no input is a tensor a fresh tape is opened.

Leading batch dimensions follow numpy semantics (``matmul`` is ``np.matmul``,
``add``/``sub``/``mul`` broadcast), which lets a whole mini-batch share one
tape.  Top-k indices and cluster assignments never carry gradient: they enter
only as integer arguments of :func:`gather_rows`.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError, NonFiniteError

__all__ = [
    "Tape", "Tensor", "backward",
    "matmul", "add", "sub", "mul", "scale", "tanh", "sigmoid", "exp", "log",
    "softmax_rows", "log_softmax_rows", "mean", "sum", "concat", "cosine",
    "sq_l2", "gather_rows", "reshape", "transpose",
]


class Tensor:
    __slots__ = ("data", "tape", "parents", "vjp", "trainable", "needs_grad", "name", "index")

    def __init__(self, data, tape, parents=(), vjp=None, trainable=False, name=None):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.trainable = trainable
        self.needs_grad = trainable or any(p.needs_grad for p in parents)
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"tensor of shape {self.shape} is not a scalar")

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, trainable={self.trainable}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of one logical execution.  Not shared across threads."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, data, trainable=True, name=None) -> Tensor:
        arr = _as_array(data, copy=True)
        return Tensor(arr, self, trainable=trainable, name=name)

    def constant(self, data, name=None) -> Tensor:
        return self.leaf(data, trainable=False, name=name)

    def trainable_leaves(self):
        return [n for n in self.nodes if n.trainable]

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)

    def _record(self, data, parents, vjp):
        if not isinstance(data, np.ndarray):  # numpy reductions may hand back scalars
            data = np.array(data, dtype=np.float64)
        _check_finite(data)
        data.flags.writeable = False
        return Tensor(data, self, parents=parents, vjp=vjp)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Populate d(loss)/d(leaf) for every trainable leaf on ``tape``.

    Returns a dict keyed by leaf tensor.  Trainable leaves that the loss does
    not depend on get an all-zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None) if not node.trainable else grads.get(node.index)
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out = {}
    for leaf in tape.trainable_leaves():
        g = grads.get(leaf.index)
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out


# helpers

def _as_array(x, copy=False):
    arr = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if copy:
        _check_finite(arr)
        arr.flags.writeable = False
    return arr


def _check_finite(arr):
    # a NaN or inf anywhere makes the sum non-finite; the full scan only runs then
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(arr, axis=None)
    if np.isfinite(total):
        return
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced or supplied")


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return Tape()


def _lift(tape, x):
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("tensors from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# primitives

def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.needs_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.needs_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return tape._record(out, (a, b), vjp)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.data, b.data)
    out = a.data + b.data
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.data, b.data)
    out = a.data - b.data
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.data, b.data)
    out = a.data * b.data
    return tape._record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    c = float(c)
    return tape._record(a.data * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = np.tanh(a.data)
    return tape._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return tape._record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = np.exp(a.data)
    return tape._record(out, (a,), lambda g: (g * out,))


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below and the
    clamped entries pass no gradient."""
    tape = _tape_of(a)
    a = _lift(tape, a)
    x = a.data
    if floor is not None:
        mask = x > floor
        xc = np.where(mask, x, floor)
    else:
        if np.any(x <= 0):
            raise ContractError("log of a non-positive value")
        mask = None
        xc = x
    out = np.log(xc)

    def vjp(g):
        gx = g / xc
        return (gx if mask is None else np.where(mask, gx, 0.0),)

    return tape._record(out, (a,), vjp)


def softmax_rows(a) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return tape._record(out, (a,), vjp)


def log_softmax_rows(a) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return tape._record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def mean(a, axis=None) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = np.asarray(a.data.mean(axis=axis))
    n = a.data.size / max(out.size, 1)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return tape._record(out, (a,), vjp)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return tape._record(out, (a,), vjp)


def concat(tensors, axis=-2) -> Tensor:
    """Concatenate along ``axis`` (the token axis by default)."""
    tape = _tape_of(*tensors)
    ts = [_lift(tape, t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(out, tuple(ts), vjp)


def cosine(u, v, eps: float = 0.0) -> Tensor:
    """Cosine similarity along the last axis (broadcast over leading axes)."""
    tape = _tape_of(u, v)
    u, v = _lift(tape, u), _lift(tape, v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine: last dims differ, {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u.data, axis=-1, keepdims=True)
    nv = np.linalg.norm(v.data, axis=-1, keepdims=True)
    if np.any(nu <= eps) or np.any(nv <= eps):
        raise DegenerateVectorError("cosine of a zero-norm vector")
    dot = (u.data * v.data).sum(axis=-1, keepdims=True)
    c = dot / (nu * nv)
    out = np.clip(c[..., 0], -1.0, 1.0)

    def vjp(g):
        g = g[..., None]
        gu = g * (v.data / (nu * nv) - c * u.data / (nu * nu))
        gv = g * (u.data / (nu * nv) - c * v.data / (nv * nv))
        return _unbroadcast(gu, u.shape), _unbroadcast(gv, v.shape)

    return tape._record(out, (u, v), vjp)


def sq_l2(a, axis=-1) -> Tensor:
    """Squared Euclidean norm along ``axis``; ``axis=None`` reduces everything."""
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = np.asarray((a.data * a.data).sum(axis=axis))
    return tape._record(out, (a,), lambda g: (2.0 * a.data * (g if axis is None else np.expand_dims(g, axis)),))


def gather_rows(a, idx) -> Tensor:
    """``a[idx]`` along axis 0.  ``idx`` is an integer array of any shape;
    gradients scatter-add back, so rows never gathered receive exactly zero."""
    tape = _tape_of(a)
    a = _lift(tape, a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return tape._record(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    tape = _tape_of(a)
    a = _lift(tape, a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return tape._record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = np.swapaxes(a.data, -1, -2)
    return tape._record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))
