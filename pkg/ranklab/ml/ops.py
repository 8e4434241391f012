# ranklab/ml/ops.py
"""
Differentiable primitives.

Each function computes its forward value with numpy and hands a backward
closure to `make_result`. Elementwise operands broadcast numpy-style, and
only across axes that match or have size 1; anything else is a
DimensionError naming both shapes.
"""
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError
from ml.tensor import Tensor, get_dtype, make_result

Operand = Union[Tensor, float, int, np.ndarray]

_GELU_C = math.sqrt(2.0 / math.pi)


def _lift(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after a broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ── Elementwise arithmetic ────────────────────────────────────────────────────

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), _backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), _backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)

    def _backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make_result(a.data / b.data, (a, b), _backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_result(a.data ** exponent, (a,), _backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_result(out, (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lower: float, upper: float) -> Tensor:
    inside = (a.data > lower) & (a.data < upper)
    return make_result(np.clip(a.data, lower, upper), (a,), lambda g: (g * inside,), "clip")


# ── Activations ───────────────────────────────────────────────────────────────

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return make_result(np.where(active, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * active,), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return make_result(out, (a,), _backward, "gelu")


def softmax(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise softmax over the last axis. `mask` (broadcastable, True = keep)
    gives excluded entries a probability of exactly zero.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return make_result(out, (a,), _backward, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv

    def _backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make_result(y, (a,), _backward, "layer_norm")


# ── Linear algebra ────────────────────────────────────────────────────────────

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def diag_scale(a: Tensor, v: Tensor) -> Tensor:
    """Multiply column j of `a` by v[j]."""
    if v.ndim != 1 or a.ndim < 1 or a.shape[-1] != v.shape[0]:
        raise DimensionError("diag_scale", a.shape, v.shape)

    def _backward(g):
        gv = (g * a.data).reshape(-1, v.shape[0]).sum(axis=0)
        return g * v.data, gv

    return make_result(a.data * v.data, (a, v), _backward, "diag_scale")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose", a.shape)
    return make_result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", a.shape, tuple(shape)) from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(out, tensors, _backward, "concat")


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis (embedding lookup, active-column selection)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise DimensionError("take", a.shape, indices.shape)

    def _backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (grad,)

    return make_result(np.take(a.data, indices, axis=axis), (a,), _backward, "take")


def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("trace", a.shape)
    eye = np.eye(a.shape[0], dtype=a.data.dtype)
    return make_result(np.trace(a.data), (a,), lambda g: (g * eye,), "trace")


# ── Reductions ────────────────────────────────────────────────────────────────

def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def frobenius_norm(a: Tensor) -> Tensor:
    norm = np.sqrt(np.sum(a.data * a.data))

    def _backward(g):
        if norm == 0:
            return (np.zeros_like(a.data),)
        return (g * a.data / norm,)

    return make_result(norm, (a,), _backward, "frobenius_norm")


# ── Losses ────────────────────────────────────────────────────────────────────

def cross_entropy_with_logits(
    logits: Tensor,
    targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Weighted mean of -log softmax(logits)[target] over rows of an N×V matrix.
    Rows with weight 0 contribute nothing.
    """
    if logits.ndim != 2:
        raise DimensionError("cross_entropy", logits.shape)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise DimensionError("cross_entropy", logits.shape, targets.shape)
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"cross_entropy: target ids must lie in [0, {vocab})")
    w = np.ones(n, dtype=logits.data.dtype) if weights is None else np.asarray(weights, dtype=logits.data.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: no positions carry weight")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, targets]
    loss = np.asarray((w * nll).sum() / total, dtype=x.dtype)

    def _backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, targets] -= 1.0
        return (g * probs * (w / total)[:, None],)

    return make_result(loss, (logits,), _backward, "cross_entropy")


# ── Operator overloads ────────────────────────────────────────────────────────

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, _lift(other, self))
Tensor.T = property(lambda self: transpose(self))
