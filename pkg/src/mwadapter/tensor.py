"""Dense tensors with tape-based reverse-mode autodiff.

Operations executed inside an active :class:`GradTape` are recorded in
execution order whenever one of their inputs requires a gradient;
:func:`backward` replays the tape in reverse. Frozen parameters carry
``requires_grad=False`` and therefore never receive a gradient.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a forward value or a gradient."""


class FrozenParameterError(RuntimeError):
    """An update or gradient was requested for a frozen parameter."""


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "param_name")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.param_name = None

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Parameter:
    """A named tensor with a frozen flag."""

    name: str
    tensor: Tensor
    frozen: bool = False

    def __post_init__(self):
        self.tensor.param_name = self.name
        self.tensor.requires_grad = not self.frozen

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad = False

    def unfreeze(self):
        self.frozen = False
        self.tensor.requires_grad = True

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def data(self):
        return self.tensor.data

    @property
    def size(self):
        return int(self.tensor.data.size)


@dataclass
class GradTape:
    """Records differentiable operations in execution order.

    Use as a context manager; nested tapes are not supported.
    """

    records: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already recording")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {what}")


def _result(data, parents, backward_fn, what):
    _check_finite(data, what)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.records.append((out, parents, backward_fn, what))
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _shape_or_raise(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _shape_or_raise("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _shape_or_raise("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_const(g):
            return (g * c,)

        return _result(a.data * c, (a,), bw_const, "mul")
    _shape_or_raise("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b):
    """Matrix product over the last two axes, batched over leading axes.

    A 2-D right operand (a weight matrix) is applied to every leading index of
    ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        k, n = b.shape
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*lead, n)

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), bw, "matmul")

    out = np.matmul(a.data, b.data)

    def bw_batched(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw_batched, "matmul")


# -------------------------------------------------------------- shape plumbing


def reshape(a, shape):
    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw, "transpose")


def getitem(a, index):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    return _result(data, tuple(tensors), bw, "concat")


def take_rows(table, ids):
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "take_rows")


def merge_rows(pieces, n_rows):
    """Inverse of a row partition: ``pieces`` is a list of ``(row_ids, tensor)``.

    Row ``row_ids[k]`` of the output is row ``k`` of the matching tensor. The
    ids of all pieces must partition ``range(n_rows)``.
    """
    width = pieces[0][1].shape[1]
    out = np.empty((n_rows, width), dtype=pieces[0][1].dtype)
    for ids, t in pieces:
        out[ids] = t.data

    def bw(g):
        return tuple(np.ascontiguousarray(g[ids]) for ids, _ in pieces)

    return _result(out, tuple(t for _, t in pieces), bw, "merge_rows")


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------- nonlinearities


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), bw, "relu")


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu(a):
    y, t = kernels.gelu_forward(_rows(a.data))
    x2 = _rows(a.data)

    def bw(g):
        return (kernels.gelu_backward(x2, t, _rows(g)).reshape(a.shape),)

    return _result(y.reshape(a.shape), (a,), bw, "gelu")


def softmax(a):
    """Softmax over the last axis (max-subtracted)."""
    y = kernels.softmax_forward(_rows(a.data))

    def bw(g):
        return (kernels.softmax_backward(y, _rows(g)).reshape(a.shape),)

    return _result(y.reshape(a.shape), (a,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: feature width {d} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    y, xhat, rstd = kernels.layer_norm_forward(
        _rows(x.data), gamma.data.astype(x.dtype), beta.data.astype(x.dtype), float(eps)
    )

    def bw(g):
        dx, dg, db = kernels.layer_norm_backward(_rows(g), xhat, rstd, gamma.data.astype(x.dtype))
        return dx.reshape(x.shape), dg, db

    return _result(y.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


def l2_normalize(a):
    """Scale each last-axis row to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (a,), bw, "l2_normalize")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    z = logits.data
    n = z.shape[0]
    rows = np.arange(n)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------- backward


def backward(loss, tape):
    """Reverse-mode sweep over ``tape`` seeded at scalar ``loss``.

    Returns ``{parameter name: gradient}`` for every named leaf the loss
    reached. The map is also stored on ``tape.grads``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, parents, fn, what in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = fn(g)
        for p, pg in zip(parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite gradient flowing out of {what}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.param_name is not None:
                leaves[key] = p
    result = {}
    for key, p in leaves.items():
        g = grads[key]
        result[p.param_name] = np.asarray(g, dtype=p.dtype).reshape(p.shape)
    tape.grads = result
    return result
