"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its output value, its inputs and a
local adjoint rule.  ``backward`` orders the graph reachable from a scalar
output and walks it once in reverse.  Shapes never broadcast implicitly:
binary ops accept equal shapes or a scalar (shape ``()``) on either side,
anything else goes through :func:`expand`, :func:`linear` or
:func:`rowwise`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DomainError", "tensor", "constant", "parameter",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "sum", "mean",
    "square", "exp", "log", "tanh", "softplus", "sqrt", "abs", "reciprocal",
    "l2_norm", "expand", "rowwise", "concat", "take", "stop_gradient",
    "where", "custom", "backward", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain."""


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("value", "parents", "adjoint_fn", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), adjoint_fn=None,
                 requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.adjoint_fn = adjoint_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.value.reshape(-1)

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def tensor(value, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name=None) -> Tensor:
    """A leaf whose gradient is requested."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(value, parents, adjoint_fn) -> Tensor:
    live = any(p.requires_grad for p in parents)
    if not live:
        return Tensor(value)
    return Tensor(value, parents, adjoint_fn, requires_grad=True)


def custom(value, parents: Sequence[Tensor], adjoint_fn) -> Tensor:
    """A node with a hand-written adjoint: ``adjoint_fn(g)`` returns one
    gradient per parent (``None`` for parents it does not feed)."""
    return _node(np.asarray(value, dtype=np.float64), tuple(parents), adjoint_fn)


def _is_scalar(t: Tensor) -> bool:
    return t.value.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform "
                     "(use expand/rowwise for explicit alignment)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")

    def adj(g):
        return _reduce_to(g, a), _reduce_to(g, b)
    return _node(a.value + b.value, (a, b), adj)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")

    def adj(g):
        return _reduce_to(g, a), _reduce_to(-g, b)
    return _node(a.value - b.value, (a, b), adj)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.value, b.value

    def adj(g):
        return _reduce_to(g * bv, a), _reduce_to(g * av, b)
    return _node(av * bv, (a, b), adj)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv

    def adj(g):
        return _reduce_to(g / bv, a), _reduce_to(-g * out / bv, b)
    return _node(out, (a, b), adj)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.value, (a,), lambda g: (-g,))


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def adj(g):
        return g @ bv.T, av.T @ g
    return _node(av @ bv, (a, b), adj)


def linear(x, w, b) -> Tensor:
    """``x @ w`` plus the bias row ``b`` added to every row."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xv, wv = x.value, w.value

    def adj(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)
    return _node(xv @ wv + b.value, (x, w, b), adj)


# reductions -------------------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _wrap(x)
    shape = x.shape

    def adj(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _node(x.value.sum(axis=axis, keepdims=keepdims), (x,), adj)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# elementwise unary ------------------------------------------------------------

def square(x) -> Tensor:
    x = _wrap(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _wrap(x)
    xv = x.value
    if np.any(xv <= 0.0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def _softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def softplus(x) -> Tensor:
    x = _wrap(x)
    xv = x.value
    return _node(_softplus(xv), (x,), lambda g: (g * _sigmoid(xv),))


def sqrt(x) -> Tensor:
    x = _wrap(x)
    xv = x.value
    if np.any(xv <= 0.0):
        raise DomainError("sqrt of a non-positive value")
    out = np.sqrt(xv)
    return _node(out, (x,), lambda g: (0.5 * g / out,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy
    """Absolute value; the adjoint at 0 is 0 (subgradient)."""
    x = _wrap(x)
    xv = x.value
    return _node(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def reciprocal(x) -> Tensor:
    x = _wrap(x)
    out = 1.0 / x.value
    return _node(out, (x,), lambda g: (-g * out * out,))


def l2_norm(x, axis=-1, keepdims=True) -> Tensor:
    """Euclidean norm along ``axis``; the adjoint at a zero vector is zero."""
    x = _wrap(x)
    xv = x.value
    out = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=True))
    safe = np.where(out > 0.0, out, 1.0)

    def adj(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xv / safe * (out > 0.0),)
    value = out if keepdims else np.squeeze(out, axis=axis)
    return _node(value, (x,), adj)


# shape plumbing ---------------------------------------------------------------

def expand(x, shape) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules)."""
    x = _wrap(x)
    src = x.shape
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: {src} -> {shape}: {exc}") from None
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def adj(g):
        return (g.sum(axis=axes).reshape(src) if axes else g,)
    return _node(out.copy(), (x,), adj)


def rowwise(x, row) -> Tensor:
    """Broadcast a vector ``row`` of shape ``(d,)`` across the rows of ``x``."""
    x, row = _wrap(x), _wrap(row)
    if x.value.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError(f"rowwise: {row.shape} does not match rows of {x.shape}")
    return expand(row, x.shape)


def concat(parts: Sequence, axis=-1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    values = [p.value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def adj(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(out, tuple(parts), adj)


def take(x, index) -> Tensor:
    """Basic slicing/indexing; the adjoint scatters back into zeros."""
    x = _wrap(x)
    xv = x.value

    def adj(g):
        full = np.zeros_like(xv)
        np.add.at(full, index, g)
        return (full,)
    return _node(np.array(xv[index]), (x,), adj)


def stop_gradient(x) -> Tensor:
    """Same value, no adjoint flow to anything upstream."""
    return Tensor(_wrap(x).value)


def where(mask, a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise ShapeError(f"where: shapes {mask.shape}, {a.shape}, {b.shape}")

    def adj(g):
        return np.where(mask, g, 0.0), np.where(mask, 0.0, g)
    return _node(np.where(mask, a.value, b.value), (a, b), adj)


# reverse sweep ----------------------------------------------------------------

def _tape(output: Tensor) -> list:
    """Nodes reachable from ``output`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(output, False)]
    push, pop, mark = stack.append, stack.pop, seen.add
    while stack:
        node, expanded = pop()
        if expanded:
            order.append(node)
            continue
        key = id(node)
        if key in seen:
            continue
        mark(key)
        push((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                push((p, False))
    return order


def backward(output: Tensor, params: Iterable[Tensor]) -> list:
    """Gradients of the scalar ``output`` with respect to each of ``params``.

    Leaves that ``output`` does not depend on get a zero array.
    """
    params = list(params)
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.value)
        for node in reversed(_tape(output)):
            if node.adjoint_fn is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.adjoint_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            out.append(np.zeros_like(p.value))
        else:
            out.append(np.array(g, dtype=np.float64).reshape(p.shape))
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float | None = None) -> float:
    """Max over all parameter entries of ``|AD - FD| / max(1, |FD|)``.

    ``f`` is re-evaluated with each entry nudged by ``±h`` (central
    differences); parameters are restored afterwards.  With ``tol`` set, an
    ``AssertionError`` is raised when the error exceeds it.
    """
    analytic = backward(f(), params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = math.fabs(gflat[i] - fd) / max(1.0, math.fabs(fd))
            if not math.isfinite(err):
                err = math.inf
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: {worst:.3e} > {tol:.3e}")
    return worst
