"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a plain function that computes its forward
value with numpy and registers a backward rule under its name in
``BACKWARD_RULES``. ``backward`` walks the recorded graph in reverse
topological order and accumulates gradients only into leaf tensors.

The operation set is closed on purpose: anything the model needs beyond
these primitives is composed from them, so each one can be finite-difference
checked in isolation (see ``uniflow.gradcheck``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-6

# Finite checks on every op output; the test suite turns this on.
CHECK_FINITE = False

_grad_enabled = True


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Raise NonFiniteError as soon as any op output holds NaN or inf."""
    global CHECK_FINITE
    prev, CHECK_FINITE = CHECK_FINITE, enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its allowed range."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        # extended precision passes through untouched (finite-difference oracle)
        if not (isinstance(data, np.ndarray) and data.dtype == np.longdouble):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BACKWARD_RULES: dict[str, Callable] = {}


def backward_rule(name: str):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return register


def _record(data: np.ndarray, op: str, parents: tuple[Tensor, ...], ctx=None) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._op = None
    out._parents = ()
    out._ctx = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = parents
        out._ctx = ctx
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data @ b.data, "matmul", (a, b))


@backward_rule("matmul")
def _matmul_backward(node: Tensor, g: np.ndarray):
    a, b = node._parents
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
    if b.requires_grad:
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
    return ga, gb


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(out, "add", (a, b))


@backward_rule("add")
def _add_backward(node, g):
    a, b = node._parents
    return (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(g, b.shape) if b.requires_grad else None,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(out, "sub", (a, b))


@backward_rule("sub")
def _sub_backward(node, g):
    a, b = node._parents
    return (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(-g, b.shape) if b.requires_grad else None,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(out, "mul", (a, b))


@backward_rule("mul")
def _mul_backward(node, g):
    a, b = node._parents
    return (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * c, "scale", (x,), float(c))


@backward_rule("scale")
def _scale_backward(node, g):
    return (g * node._ctx,)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,), (axis, keepdims))


@backward_rule("sum")
def _sum_backward(node, g):
    (x,) = node._parents
    axis, keepdims = node._ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _record(np.mean(x.data, axis=axis, keepdims=keepdims), "mean", (x,), (axis, keepdims, n))


@backward_rule("mean")
def _mean_backward(node, g):
    (x,) = node._parents
    axis, keepdims, n = node._ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape),)


def transpose(x, ax1: int = -2, ax2: int = -1) -> Tensor:
    x = as_tensor(x)
    return _record(np.swapaxes(x.data, ax1, ax2), "transpose", (x,), (ax1, ax2))


@backward_rule("transpose")
def _transpose_backward(node, g):
    ax1, ax2 = node._ctx
    return (np.swapaxes(g, ax1, ax2),)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), "reshape", (x,))


@backward_rule("reshape")
def _reshape_backward(node, g):
    return (g.reshape(node._parents[0].shape),)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(out, "concat", xs, (axis, sizes))


@backward_rule("concat")
def _concat_backward(node, g):
    axis, sizes = node._ctx
    return tuple(np.split(g, sizes, axis=axis))


def slice_(x, idx) -> Tensor:
    """Basic (non-fancy) indexing; use ``lookup`` for gathers."""
    x = as_tensor(x)
    return _record(x.data[idx], "slice", (x,), idx)


@backward_rule("slice")
def _slice_backward(node, g):
    (x,) = node._parents
    out = np.zeros(x.shape)
    out[node._ctx] = g
    return (out,)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, "softmax", (x,), y)


@backward_rule("softmax")
def _softmax_backward(node, g):
    y = node._ctx
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis; no affine (AdaLN supplies it)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return _record(xhat, "layer_norm", (x,), (xhat, inv))


@backward_rule("layer_norm")
def _layer_norm_backward(node, g):
    xhat, inv = node._ctx
    gm = g.mean(axis=-1, keepdims=True)
    gxm = np.mean(g * xhat, axis=-1, keepdims=True)
    return (inv * (g - gm - xhat * gxm),)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))
    return _record(0.5 * xd * (1.0 + t), "gelu", (x,), t)


@backward_rule("gelu")
def _gelu_backward(node, g):
    (x,) = node._parents
    t = node._ctx
    xd = x.data
    sech2 = 1.0 - t * t
    sech2 *= xd
    sech2 *= _GELU_C + (_GELU_C * 3 * 0.044715) * (xd * xd)
    sech2 += 1.0 + t
    sech2 *= 0.5 * g
    return (sech2,)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, "tanh", (x,), y)


@backward_rule("tanh")
def _tanh_backward(node, g):
    y = node._ctx
    return (g * (1.0 - y * y),)


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.sin(x.data), "sin", (x,))


@backward_rule("sin")
def _sin_backward(node, g):
    return (g * np.cos(node._parents[0].data),)


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.cos(x.data), "cos", (x,))


@backward_rule("cos")
def _cos_backward(node, g):
    return (-g * np.sin(node._parents[0].data),)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record(y, "exp", (x,), y)


@backward_rule("exp")
def _exp_backward(node, g):
    return (g * node._ctx,)


def lookup(table, idx) -> Tensor:
    """Gather rows of a 2-D ``table``; output shape is ``idx.shape + (D,)``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"lookup: index out of range for table of {table.shape[0]} rows")
    return _record(table.data[idx], "lookup", (table,), idx)


@backward_rule("lookup")
def _lookup_backward(node, g):
    (table,) = node._parents
    idx = node._ctx.ravel()
    out = np.zeros(table.shape)
    np.add.at(out, idx, g.reshape(idx.size, table.shape[1]))
    return (out,)


def scaled_gradient(x, lam: float) -> Tensor:
    """lam*x + (1-lam)*stop_gradient(x): identity forward, gradient times lam."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"scaled_gradient: lambda must lie in [0, 1], got {lam}")
    x = as_tensor(x)
    return _record(x.data, "scaled_gradient", (x,), float(lam))


@backward_rule("scaled_gradient")
def _scaled_gradient_backward(node, g):
    return (g * node._ctx,)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


PRIMITIVES = (
    "matmul", "add", "sub", "mul", "scale", "sum", "mean", "transpose", "reshape",
    "concat", "slice", "softmax", "layer_norm", "gelu", "tanh", "sin", "cos", "exp",
    "lookup", "scaled_gradient", "stop_gradient",
)


# --------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``; every node follows its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate gradients are kept local, so calling this twice on the same
    graph adds the gradient twice to the leaves and nothing else.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        parent_grads = BACKWARD_RULES[node._op](node, g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h for every element of ``t``."""
    t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    out = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().data
            flat[i] = orig - h
            fm = f().data
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    scale: float = 1.0,
    extended: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from ``inputs`` on every call. Relative error per
    element is |a - n| / max(|a|, |n|, 1e-8). ``scale`` multiplies the numeric
    side, for ops whose gradient is deliberately not the true derivative.

    The analytic side always runs in float64. With ``extended`` the
    finite-difference oracle evaluates ``f`` in ``np.longdouble``, which
    removes float64 rounding noise (about 1e-10 absolute for an O(1) loss)
    from entries whose true gradient is tiny.
    """
    if h <= 0:
        raise ParameterError("grad_check: h must be positive")
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    backward(f())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad for t in inputs]
    saved = [t.data for t in inputs]
    if extended:
        for t in inputs:
            t.data = t.data.astype(np.longdouble)
    try:
        worst = 0.0
        for t, a in zip(inputs, analytic):
            worst = max(worst, relative_error(a, scale * numeric_grad(f, t, h)))
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
    return worst
