"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Tensors wrap numpy arrays. Operations on tensors that belong to a
:class:`Tape` are recorded with a local backward rule; operations on
free tensors just compute. The dtype follows the inputs, so the same graph
runs in float32 for training and float64 for finite-difference checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class MaskError(ValueError):
    """A softmax row has no live entries."""


class PoisonedGradientError(FloatingPointError):
    """A gradient handed to the optimizer contains NaN."""


class Tensor:
    __slots__ = ("data", "tape", "node_id", "name")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None, name: str | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Node:
    inputs: tuple
    output: int
    backward: Callable | None  # None for leaves


@dataclass
class Tape:
    """Ordered record of operations; node ids are positions in ``nodes``."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)  # name -> node id
    leaves: dict = field(default_factory=dict)  # node id -> array

    def watch(self, name: str, array) -> Tensor:
        """Register a trainable leaf."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        node_id = len(self.nodes)
        self.nodes.append(Node((), node_id, None))
        self.params[name] = node_id
        t = Tensor(array, self, node_id, name)
        self.leaves[node_id] = t.data
        return t

    def record(self, data, inputs: Sequence[Tensor | None], backward) -> Tensor:
        node_id = len(self.nodes)
        ids = tuple(t.node_id if t is not None and t.tape is self else None for t in inputs)
        self.nodes.append(Node(ids, node_id, backward))
        return Tensor(data, self, node_id)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _finish(data, inputs, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("forward op produced a non-finite value")
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            tape = t.tape
            break
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_bias_shape(a, b, opname):
    if a.shape == b.shape:
        return
    # trailing-dimension alignment only (bias rows / per-feature vectors)
    sa, sb = a.shape, b.shape
    if len(sb) > len(sa) or any(y not in (1, x) for x, y in zip(sa[::-1], sb[::-1])):
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if a.ndim >= b.ndim:
            _check_bias_shape(a, b, "mul")
        else:
            _check_bias_shape(b, a, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c) if a.data.dtype.kind == "f" else c
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def tanh_op(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _finish(y, (a,), lambda g: (g * (1 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    live = a.data > 0
    return _finish(np.where(live, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * live,))


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(1 / (1 + exp(-x)))``."""
    a = as_tensor(a)
    x = a.data
    y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = 0.5 * (1 - np.tanh(0.5 * x))  # d/dx log sigma(x) = sigma(-x), overflow-free
    return _finish(y.astype(x.dtype), (a,), lambda g: (g * sig_neg,))


# ---------------------------------------------------------------- reductions


def sum_op(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(y), (a,), back)


def mean_op(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_op(a, axis, keepdims), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Mean over the second-to-last axis: ``(..., m, d) -> (..., d)``."""
    return mean_op(a, axis=-2)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a shared 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finish(ad @ bd, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _finish(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, key) -> Tensor:
    """Basic slicing, e.g. ``index(x, (slice(None), 0))`` picks the first row per batch."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _finish(np.array(a.data[key]), (a,), back)


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _finish(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)][0]
        raise IndexError(f"embedding id {int(bad)} out of range for table with {n} rows")
    shape, dtype = table.shape, table.data.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        _accel.scatter_add_rows(out, ids, g)
        return (out,)

    return _finish(table.data[ids], (table,), back)


# ---------------------------------------------------------------- normalisers


def row_softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis with optional boolean ``mask`` (False = excluded)."""
    x = as_tensor(x)
    shape = x.shape
    flat = x.data.reshape(-1, shape[-1])
    if mask is None:
        live = np.ones(flat.shape, dtype=bool)
    else:
        live = np.broadcast_to(np.asarray(mask, dtype=bool), shape).reshape(flat.shape)
        if not live.any(axis=1).all():
            raise MaskError("row_softmax: a row is fully masked")
    y = _accel.masked_softmax(flat, live).reshape(shape)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _finish(y, (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def back(g):
        gx_hat = g * gd
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _finish(xhat * gd + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every watched parameter.

    Parameters that do not reach the loss get exact zeros.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads[node.output]
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.inputs, node.backward(g)):
            if parent is None or pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    out = {}
    for name, nid in tape.params.items():
        g = grads[nid]
        ref = tape.leaves[nid]
        out[name] = np.zeros_like(ref) if g is None else g.astype(ref.dtype, copy=False)
    return out


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on ``params``; returns ``params``.

    NaN or infinite gradients, and a second moment that overflows, raise
    :class:`PoisonedGradientError` naming the parameter.
    """
    for name, g in grads.items():
        if np.isnan(g).any():
            raise PoisonedGradientError(f"NaN in gradient of {name!r}")
        if not np.isfinite(g).all():
            raise PoisonedGradientError(f"infinite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        with np.errstate(over="ignore"):
            m *= p.dtype.type(b1)
            m += p.dtype.type(1 - b1) * g
            v *= p.dtype.type(b2)
            v += p.dtype.type(1 - b2) * (g * g)
        if not np.isfinite(v).all():
            raise PoisonedGradientError(f"second moment overflowed for {name!r}")
        m_hat = m / p.dtype.type(corr1)
        v_hat = v / p.dtype.type(corr2)
        p -= p.dtype.type(state.lr) * m_hat / (np.sqrt(v_hat) + p.dtype.type(state.eps))
    return params
