"""Dense float64 arrays with a small reverse-mode differentiation engine.

Arrays are plain ``numpy.ndarray`` objects of dtype float64.  A :class:`Node`
wraps one array together with the primitive that produced it.  Every
primitive's vector-Jacobian product is itself written with primitives, so a
gradient can be differentiated again (``create_graph=True``).  That path is
what lets a potential's input gradient sit inside a training loss.

Example
-------
>>> x = leaf([1.0, 2.0])
>>> (g,) = grad(dot(x, x), [x])
>>> g
array([2., 4.])
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NonScalarRootError(ValueError):
    pass


class Op(str, enum.Enum):
    LEAF = "leaf"
    AFFINE = "affine"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    ADD = "add"
    SUBTRACT = "subtract"
    MUL = "mul"
    SCALE = "scale"
    SQUARE = "elementwise-square"
    POWER = "power"
    SOFTPLUS = "softplus"
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky-relu"
    CLAMP_MIN = "clamp-min"
    DOT = "dot"
    SUM = "sum"
    MEAN = "mean"
    RESHAPE = "reshape"
    BROADCAST = "broadcast"
    CONCAT = "concat"
    SLICE = "slice"
    EMBED = "embed"


def as_tensor(value) -> Tensor:
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (values only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, enabled
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One value in a computation graph.

    Leaves created with ``requires_grad=True`` are the differentiable inputs
    (model parameters, or an input batch when input gradients are wanted).
    """

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, value: Tensor, op: Op = Op.LEAF, parents: tuple = (),
                 vjp: Callable | None = None, requires_grad: bool = False):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op.value}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _wrap(other, self))

    def __rsub__(self, other):
        return subtract(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(other, like: Node) -> Node:
    if isinstance(other, Node):
        return other
    arr = as_tensor(other)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape).copy()
    return constant(arr)


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(as_tensor(value), requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(as_tensor(value), requires_grad=False)


def _make(value: Tensor, op: Op, parents: tuple, vjp: Callable) -> Node:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, op, parents, vjp, requires_grad=True)
    return Node(value, op)


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _make(a.value + b.value, Op.ADD, (a, b), lambda g: (g, g))


def subtract(a: Node, b: Node) -> Node:
    _same_shape("subtract", a, b)
    return _make(a.value - b.value, Op.SUBTRACT, (a, b),
                 lambda g: (g, scale(g, -1.0)))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return _make(a.value * b.value, Op.MUL, (a, b),
                 lambda g: (mul(g, b), mul(g, a)))


def scale(a: Node, c) -> Node:
    """Multiply by a constant (scalar or same-shape array)."""
    if not np.isscalar(c):
        c = as_tensor(c)
        if c.shape != a.shape:
            raise ShapeError("scale", f"constant shape {c.shape} vs {a.shape}")
    return _make(a.value * c, Op.SCALE, (a,), lambda g: (scale(g, c),))


def square(a: Node) -> Node:
    return _make(a.value * a.value, Op.SQUARE, (a,),
                 lambda g: (mul(g, scale(a, 2.0)),))


def power(a: Node, e: float) -> Node:
    """Elementwise ``a**e`` for positive entries."""
    if np.any(a.value <= 0):
        raise ValueError("power: entries must be positive")
    return _make(a.value ** e, Op.POWER, (a,),
                 lambda g: (mul(g, scale(power(a, e - 1.0), e)),))


def sigmoid(a: Node) -> Node:
    def vjp(g):
        s = sigmoid(a)
        return (mul(g, subtract(s, square(s))),)
    return _make(expit(a.value), Op.SIGMOID, (a,), vjp)


def softplus(a: Node) -> Node:
    return _make(np.logaddexp(0.0, a.value), Op.SOFTPLUS, (a,),
                 lambda g: (mul(g, sigmoid(a)),))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    mask = np.where(a.value > 0, 1.0, slope)
    return _make(a.value * mask, Op.LEAKY_RELU, (a,), lambda g: (scale(g, mask),))


def clamp_min(a: Node, lo: float) -> Node:
    mask = (a.value > lo).astype(np.float64)
    return _make(np.maximum(a.value, lo), Op.CLAMP_MIN, (a,),
                 lambda g: (scale(g, mask),))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    return _make(a.value @ b.value, Op.MATMUL, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose", f"expected a matrix, got {a.shape}")
    return _make(a.value.T, Op.TRANSPOSE, (a,),
                 lambda g: (transpose(g),))


def affine(x: Node, W: Node, b: Node) -> Node:
    """``x @ W.T + b`` for a batch ``x`` of shape (B, in), or ``W x + b``
    for a single vector."""
    if x.value.ndim == 1:
        return reshape(affine(reshape(x, (1, x.shape[0])), W, b), (W.shape[0],))
    if (x.value.ndim != 2 or W.value.ndim != 2 or b.value.ndim != 1
            or x.shape[1] != W.shape[1] or b.shape[0] != W.shape[0]):
        raise ShapeError("affine", f"x {x.shape}, W {W.shape}, b {b.shape}")

    def vjp(g):
        return (matmul(g, W), matmul(transpose(g), x), sum(g, axis=0))

    return _make(x.value @ W.value.T + b.value, Op.AFFINE, (x, W, b), vjp)


def dot(a: Node, b: Node) -> Node:
    if a.value.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", f"expected equal-length vectors, got {a.shape}, {b.shape}")

    def vjp(g):
        return (mul(broadcast_to(g, a.shape), b), mul(broadcast_to(g, b.shape), a))

    return _make(np.dot(a.value, b.value), Op.DOT, (a, b), vjp)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keepdims_shape(shape, axes) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    axes = _norm_axes(axis, a.value.ndim)
    kshape = _keepdims_shape(a.shape, axes)

    def vjp(g):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _make(np.asarray(a.value.sum(axis=axes)), Op.SUM, (a,), vjp)


def mean(a: Node, axis=None) -> Node:
    axes = _norm_axes(axis, a.value.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", "empty reduction")
    kshape = _keepdims_shape(a.shape, axes)

    def vjp(g):
        return (scale(broadcast_to(reshape(g, kshape), a.shape), 1.0 / count),)

    return _make(np.asarray(a.value.mean(axis=axes)), Op.MEAN, (a,), vjp)


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}")
    return _make(a.value.reshape(shape), Op.RESHAPE, (a,),
                 lambda g: (reshape(g, a.shape),))


def _sum_to(g: Node, shape: tuple) -> Node:
    lead = g.value.ndim - len(shape)
    axes = list(range(lead))
    axes += [lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1]
    if axes:
        g = sum(g, axis=tuple(axes))
    return reshape(g, shape) if g.shape != shape else g


def broadcast_to(a: Node, shape) -> Node:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError("broadcast", str(exc)) from None
    return _make(out, Op.BROADCAST, (a,), lambda g: (_sum_to(g, a.shape),))


def slice_axis(a: Node, start: int, stop: int, axis: int = -1) -> Node:
    axis %= a.value.ndim
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, stop)
    out = np.ascontiguousarray(a.value[tuple(index)])
    return _make(out, Op.SLICE, (a,),
                 lambda g: (embed(g, a.shape, start, axis),))


def embed(a: Node, shape, start: int, axis: int) -> Node:
    """Place ``a`` into zeros of ``shape`` beginning at ``start`` along ``axis``."""
    out = np.zeros(shape)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, start + a.shape[axis])
    out[tuple(index)] = a.value
    stop = start + a.shape[axis]
    return _make(out, Op.EMBED, (a,), lambda g: (slice_axis(g, start, stop, axis),))


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    if not parts:
        raise ShapeError("concat", "nothing to concatenate")
    ndim = parts[0].value.ndim
    axis %= ndim
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return tuple(slice_axis(g, int(lo), int(hi), axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, Op.CONCAT, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def forward_eval(root: Node) -> Tensor:
    """Value of a built graph (graphs evaluate eagerly as they are built)."""
    return root.value


def _toposort(root: Node) -> list[Node]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(root: Node, wrt: Sequence[Node], create_graph: bool = False) -> list:
    """Gradients of a scalar ``root`` with respect to each node in ``wrt``.

    Returns arrays, or differentiable nodes when ``create_graph`` is set.
    Nodes that ``root`` does not depend on get zeros.
    """
    if root.value.shape != ():
        raise NonScalarRootError(f"root must be scalar, got shape {root.shape}")
    wrt = list(wrt)
    wrt_ids = {id(w) for w in wrt}
    order = _toposort(root) if root.requires_grad else []

    live = set()
    for node in order:
        if id(node) in wrt_ids or any(id(p) in live for p in node.parents):
            live.add(id(node))

    cot: dict[int, Node] = {id(root): constant(1.0)}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = cot.get(id(node))
            if g is None or node.vjp is None:
                continue
            if id(node) not in wrt_ids:
                del cot[id(node)]
            contribs = node.vjp(g)
            for p, gp in zip(node.parents, contribs):
                if gp is None or id(p) not in live:
                    continue
                prev = cot.get(id(p))
                cot[id(p)] = gp if prev is None else add(prev, gp)

    out = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            g = constant(np.zeros_like(w.value))
        out.append(g if create_graph else g.value)
    return out


def backward_grad(root: Node) -> dict[Node, Tensor]:
    """Populate ``.grad`` on every leaf reachable from a scalar root."""
    if root.value.shape != ():
        raise NonScalarRootError(f"root must be scalar, got shape {root.shape}")
    leaves = [n for n in _toposort(root) if n.op is Op.LEAF] if root.requires_grad else []
    grads = grad(root, leaves)
    for n, g in zip(leaves, grads):
        n.grad = g
    return dict(zip(leaves, grads))


def finite_diff_grad(f: Callable[[Tensor], float], x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x).copy()
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative discrepancy between two gradient estimates."""
    a, b = as_tensor(a), as_tensor(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def values(nodes: Iterable[Node]) -> list[Tensor]:
    return [n.value for n in nodes]
