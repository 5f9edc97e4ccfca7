"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds a new :class:`Tensor` and, when any input requires a
gradient, records a closure mapping the output gradient to input
gradients. :func:`backward` walks that tape in reverse topological order.

Accumulation semantics: leaf tensors (``requires_grad=True`` with no
parents) add into ``.grad`` on every :func:`backward` call; nothing is
reset implicitly. Call :func:`zero_grads` between optimizer steps.
Intermediate gradients live only for the duration of a single call.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
_TINY = np.finfo(np.float64).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


class DiffError(Exception):
    """Base class for autodiff errors."""


class ShapeError(DiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class DomainError(DiffError, ValueError):
    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Forward-only evaluation: results record no tape and carry no gradient."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError(op, "non-finite input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    # One operand must already have the output shape; the other may be
    # stretched along size-1 or missing leading axes (bias rows, scalars).
    if a.shape == b.shape:
        return a.shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    if out != a.shape and out != b.shape:
        raise ShapeError(op, a.shape, b.shape)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the output in the open interval (0, 1) after saturation
    out = np.clip(out, _TINY, _BELOW_ONE)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0) or np.any(np.isnan(a.data)):
        raise DomainError("log", "input must be strictly positive")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= floor
    return _node(np.where(mask, a.data, floor), "clamp_min", (a,), lambda g: (g * mask,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for nonnegative ``a``."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("power", "base must be nonnegative")
    out = a.data ** exponent

    def bw(g):
        if exponent == 0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * a.data ** (exponent - 1.0)
        # the derivative at a zero base is taken as 0 (one-sided limit for exponent > 1)
        d = np.where(a.data > 0, d, 0.0 if exponent != 1 else 1.0)
        return (g * d,)

    return _node(out, "power", (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, "matmul", (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_rows")
    tail = ts[0].shape[1:]
    if any(t.data.ndim == 0 or t.shape[1:] != tail for t in ts):
        raise ShapeError("concat_rows", *(t.shape for t in ts))
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _node(np.concatenate([t.data for t in ts], axis=0), "concat_rows", ts, bw)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim == 0 or not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError("slice_rows", a.shape, (start, stop))

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop].copy(), "slice_rows", (a,), bw)


def pick(a, index: Sequence[int]) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, idx.shape)
    if np.any(idx < 0) or np.any(idx >= a.shape[1]):
        raise DomainError("pick", "index out of range")
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _node(a.data[rows, idx], "pick", (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        return _node(np.asarray(a.data.sum()), "sum", (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),))
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError("sum", a.shape, (axis,))
    return _node(a.data.sum(axis=axis), "sum", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape)
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- composite primitives


def softmax_rowwise(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("softmax_rowwise", a.shape)
    _check_finite("softmax_rowwise", a.data)
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, "softmax_rowwise", (a,), bw)


def cosine_similarity_rowwise(a, b) -> Tensor:
    """Per-row cosine similarity of two (n, k) tensors; returns shape (n,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError("cosine_similarity_rowwise", a.shape, b.shape)
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("cosine_similarity_rowwise", "zero-norm row")
    dot = (a.data * b.data).sum(axis=1)
    cos = dot / (na * nb)

    def bw(g):
        g = g[:, None]
        ga = g * (b.data / (na * nb)[:, None] - cos[:, None] * a.data / (na * na)[:, None])
        gb = g * (a.data / (na * nb)[:, None] - cos[:, None] * b.data / (nb * nb)[:, None])
        return ga, gb

    return _node(cos, "cosine_similarity_rowwise", (a, b), bw)


FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "softmax_rowwise": softmax_rowwise,
    "log": log,
    "square": square,
    "mean": mean,
    "sum": sum,
    "concat_rows": lambda *ts: concat_rows(ts),
    "cosine_similarity_rowwise": cosine_similarity_rowwise,
}


def forward_ops(op: str, *inputs) -> Tensor:
    """Apply one of the named primitive ops in :data:`FORWARD_OPS`."""
    try:
        fn = FORWARD_OPS[op]
    except KeyError:
        raise DiffError(f"unknown op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        raise DiffError("backward: loss has no recorded tape (nothing requires grad)")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable, x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor or a sequence of Tensors; ``f(x)`` must return a scalar
    Tensor. Inputs are perturbed in place and restored afterwards.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
        out = f(x)
        if not np.all(np.isfinite(out.data)):
            raise DomainError("grad_check", "f(x) is not finite")
        if out.requires_grad:
            backward(out)
        worst = 0.0
        for t in xs:
            with no_grad():
                worst = max(worst, _fd_compare(f, x, t, h))
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g


def _fd_compare(f: Callable, x, t: Tensor, h: float) -> float:
    analytic = np.zeros_like(t.data) if t.grad is None else t.grad
    flat = t.data.reshape(-1)
    an = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError("grad_check", "f is not finite near x")
        num = (fp - fm) / (2.0 * h)
        denom = max(abs(an[i]), abs(num), 1e-8)
        worst = max(worst, abs(an[i] - num) / denom)
    return worst
