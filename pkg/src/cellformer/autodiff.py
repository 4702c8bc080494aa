"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record the backward graph as they are
combined. Calling backward() on a scalar accumulates exact analytic
gradients into every reachable tensor's .grad; grads start at zero when a
tensor is created and repeated backward calls accumulate (callers reset
between steps). grad_check verifies any tensor->scalar function against
central finite differences.

Only the operations the model needs exist here; everything is 64-bit by
default and safe to run at 32-bit for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def _as_float_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the autodiff graph: values, accumulated grad, parents."""

    __slots__ = ("values", "grad", "op", "_parents", "_vjp")

    def __init__(self, values, parents=(), vjp=None, op="leaf"):
        self.values = _as_float_array(values)
        self.grad = np.zeros_like(self.values)
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        """Reverse accumulation from this scalar into all reachable grads."""
        if self.values.shape != ():
            raise ShapeError(
                f"backward needs a scalar, got shape {self.values.shape}"
            )
        order = _topo_order(self)
        adjoint: dict[int, np.ndarray | None] = {id(t): None for t in order}
        adjoint[id(self)] = np.ones((), dtype=self.values.dtype)
        for node in reversed(order):
            g = adjoint[id(node)]
            if g is None:
                continue
            node.grad = node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                prev = adjoint[id(parent)]
                adjoint[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.values.shape})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def constant(values) -> Tensor:
    return Tensor(values, op="const")


@dataclass
class Parameter:
    """A named trainable tensor; non-trainable ones get no optimizer updates."""

    name: str
    tensor: Tensor
    trainable: bool = True


# ---------------------------------------------------------------------------
# Elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(values, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    a = _lift(a)
    return Tensor(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return Tensor(values, (a, b), vjp, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor(values, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    a = _lift(a)
    if a.values.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.shape}")
    return Tensor(a.values.T, (a,), lambda g: (g.T,), "transpose")


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.values > 0  # gradient at exactly 0 is 0
    return Tensor(np.maximum(a.values, 0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    values = np.exp(a.values)
    return Tensor(values, (a,), lambda g: (g * values,), "exp")


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    return Tensor(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def logsigmoid(a: Tensor) -> Tensor:
    """log(1/(1+exp(-x))), computed without overflow for any magnitude."""
    a = _lift(a)
    x = a.values
    values = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * _sigmoid_values(-x),)

    return Tensor(values, (a,), vjp, "logsigmoid")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return Tensor(values, tensors, vjp, "concat")


def slice_rows_cols(a: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
    """Basic (contiguous) slicing of a 2-d tensor."""
    a = _lift(a)
    if a.values.ndim != 2:
        raise ShapeError(f"slice expects a 2-d tensor, got {a.shape}")
    key = (rows, cols)
    values = a.values[key]

    def vjp(g):
        buf = np.zeros_like(a.values)
        buf[key] = g
        return (buf,)

    return Tensor(values, (a,), vjp, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    values = a.values.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor(values, (a,), vjp, "reshape")


def sum_all(a: Tensor) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.values.sum(), (a,), vjp, "sum")


def mean_all(a: Tensor) -> Tensor:
    a = _lift(a)
    n = a.values.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor(a.values.mean(), (a,), vjp, "mean")


# ---------------------------------------------------------------------------
# Row-wise ops


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    a = _lift(a)
    if a.values.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor(p, (a,), vjp, "softmax_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _lift(a)
    if a.values.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a 2-d tensor, got {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    values = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(values)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor(values, (a,), vjp, "log_softmax_rows")


def layernorm_rows(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with biased variance, then scale and shift."""
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    if a.values.ndim != 2:
        raise ShapeError(f"layernorm_rows expects a 2-d tensor, got {a.shape}")
    d = a.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm_rows: gamma {gamma.shape} / beta {beta.shape} must be ({d},)"
        )
    mu = a.values.mean(axis=1, keepdims=True)
    var = ((a.values - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.values - mu) * inv
    values = y * gamma.values + beta.values

    def vjp(g):
        gy = g * gamma.values
        dx = inv * (
            gy
            - gy.mean(axis=1, keepdims=True)
            - y * (gy * y).mean(axis=1, keepdims=True)
        )
        return dx, (g * y).sum(axis=0), g.sum(axis=0)

    return Tensor(values, (a, gamma, beta), vjp, "layernorm_rows")


def masked_mean_rows(a: Tensor, mask) -> Tensor:
    """Mean over the rows with mask=True only; masked rows contribute
    exactly zero to both value and gradient."""
    a = _lift(a)
    if a.values.ndim != 2:
        raise ShapeError(f"masked_mean_rows expects a 2-d tensor, got {a.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.shape[0],):
        raise ShapeError(
            f"masked_mean_rows: mask shape {mask.shape} != ({a.shape[0]},)"
        )
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("masked_mean_rows: mask is all false")
    values = a.values[mask].sum(axis=0) / count

    def vjp(g):
        buf = np.zeros_like(a.values)
        buf[mask] = g / count
        return (buf,)

    return Tensor(values, (a,), vjp, "masked_mean_rows")


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of the scalar-valued f over every element of x.

    Relative error uses max(|analytic|, |numeric|, 1) as denominator, so
    near-zero gradients are compared absolutely.
    """
    x.values = np.ascontiguousarray(x.values)
    x.zero_grad()
    out = f(x)
    if out.values.shape != ():
        raise ShapeError(f"grad_check needs scalar output, got {out.values.shape}")
    out.backward()
    analytic = x.grad.reshape(-1).copy()
    flat = x.values.reshape(-1)
    max_err = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f(x).values)
        flat[i] = orig - eps
        minus = float(f(x).values)
        flat[i] = orig
        numeric = (plus - minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1.0)
        max_err = max(max_err, err)
    return max_err


def dump_graph(root: Tensor) -> str:
    """Debug text dump: one 'child <- parent' edge per line."""
    lines = []
    for node in _topo_order(root):
        for parent in node._parents:
            lines.append(f"{node.op}#{id(node) & 0xFFFF:04x} <- {parent.op}#{id(parent) & 0xFFFF:04x}")
    return "\n".join(lines)
