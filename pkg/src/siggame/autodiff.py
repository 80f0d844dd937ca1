"""Minimal define-by-run reverse-mode automatic differentiation on numpy arrays.

Every differentiable value is a :class:`Tensor`.  Operations on tensors that
require gradients record a node holding references to their parents and a
vector-Jacobian product closure.  :func:`backward` walks the recorded nodes in
reverse creation order, which is a deterministic reverse topological order, so
gradient accumulation is reproducible bit-for-bit.

All arrays are float64.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "record",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "leaky_relu",
    "softmax",
    "log_softmax",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "stack",
    "index_select",
    "pick",
    "stop_gradient",
    "backward",
    "finite_difference_check",
]

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        dims = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {dims}")


class Tensor:
    """A dense float64 array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_id", "op", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._id = next(_ids)
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


@contextlib.contextmanager
def no_grad():
    """Context in which operations are evaluated without being recorded."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create the output node of a primitive.

    ``vjp`` maps the upstream gradient to a tuple with one entry per parent
    (``None`` for parents that need no gradient).  The node is only linked to
    its parents when gradients are enabled and some parent requires them.
    """
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), vjp)


def neg(a) -> Tensor:
    a = constant(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of a ``(n, k)`` or ``(k,)`` array with a ``(k, m)`` or ``(k,)`` array."""
    a, b = constant(a), constant(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, bd) if (ad.ndim, bd.ndim) == (2, 1) else g @ bd.T if bd.ndim == 2 else g * bd
        if b.requires_grad:
            gb = np.outer(ad, g) if (ad.ndim, bd.ndim) == (1, 2) else ad.T @ g if ad.ndim == 2 else g * ad
        return ga, gb

    return record("matmul", ad @ bd, (a, b), vjp)


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = constant(a)
    y = expit(a.data)
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = constant(a)
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = constant(a)
    x = a.data
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = constant(a)
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return record("leaky_relu", x * scale, (a,), lambda g: (g * scale,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = constant(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (a,), vjp)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = constant(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", y, (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("reduce_sum", y, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("reduce_mean", y, (a,), vjp)


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [constant(t) for t in items]
    try:
        y = np.concatenate([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in items]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in items])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(items))
        )

    return record("concat", y, items, vjp)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [constant(t) for t in items]
    try:
        y = np.stack([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in items]) from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return record("stack", y, items, vjp)


def index_select(table, index) -> Tensor:
    """Rows ``table[index]`` of a 1-D or 2-D table; ``index`` is an integer array."""
    table = constant(table)
    index = np.asarray(index)
    if table.ndim not in (1, 2):
        raise ShapeError("index_select", table.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError("index_select", table.shape, index.shape)
    rows = table.shape

    def vjp(g):
        out = np.zeros(rows)
        np.add.at(out, index, g)
        return (out,)

    return record("index_select", table.data[index], (table,), vjp)


def pick(a, index) -> Tensor:
    """Select ``a[i, index[i]]`` for a 2-D ``a``; returns shape ``(n,)``."""
    a = constant(a)
    index = np.asarray(index)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, index.shape)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return record("pick", a.data[rows, index], (a,), vjp)


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return record("getitem", a.data[index], (a,), vjp)


def stop_gradient(a) -> Tensor:
    """Same value as ``a``; no gradient flows back through the result."""
    a = constant(a)
    out = Tensor(a.data)
    out.op = "stop_gradient"
    return out


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None):
    """Reverse-mode sweep from a scalar ``root``.

    With ``wrt`` given, returns a list of gradient arrays aligned with it
    (zeros for leaves the root does not depend on).  Otherwise returns a
    dict mapping every reachable leaf that requires grad to its gradient.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward root must be a Tensor")
    if root.data.size != 1 or root.ndim > 1:
        raise ShapeError("backward", root.shape)

    nodes: dict[int, Tensor] = {}
    if root.requires_grad:
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {root._id: np.ones(root.shape)}
    leaf_grads: dict[int, np.ndarray] = {}
    # Parents are always created before children, so descending id is a valid
    # reverse topological order.
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._vjp is None:
            leaf_grads[node_id] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg

    if wrt is None:
        return {nodes[i]: g for i, g in leaf_grads.items()}
    return [leaf_grads.get(t._id, np.zeros(t.shape)) for t in wrt]


def finite_difference_check(
    f: Callable[..., Tensor],
    x,
    h: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients with central finite differences.

    ``x`` is either one array/Tensor or a list of leaf Tensors.  When it is a
    list, ``f`` is called without arguments and must read those tensors (their
    ``data`` is perturbed in place and restored); otherwise ``f`` receives a
    fresh leaf built from ``x``.

    Returns ``max |ad - fd| / max(1, |ad|, |fd|)`` over all coordinates.
    """
    if h <= 0:
        raise ValueError("step h must be positive")

    if isinstance(x, (list, tuple)):
        leaves = list(x)
        call = f
    else:
        leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
        leaves = [leaf]

        def call():
            return f(leaf)

    for leaf in leaves:
        leaf.requires_grad = True
        leaf.data = np.ascontiguousarray(leaf.data)

    out = call()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function returned a non-finite value")
    analytic = backward(out, leaves)

    worst = 0.0
    for leaf, ad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        ad = ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = call().data
            flat[i] = orig - h
            with no_grad():
                fm = call().data
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("function returned a non-finite value")
            fd = float((fp - fm) / (2.0 * h))
            err = abs(ad[i] - fd) / max(1.0, abs(ad[i]), abs(fd))
            worst = max(worst, err)
    return worst
