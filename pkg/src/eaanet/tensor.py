"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` carrying a
``_node`` that records its parent tensors and a closure mapping the output
gradient to one gradient per parent. :func:`backward` walks those nodes in
reverse topological order and accumulates into leaf ``grad`` arrays.

Layout is row-major; 4-D tensors are batch x channel x height x width.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]
ArrayLike = Union[np.ndarray, Sequence[float], Number]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _Node:
    __slots__ = ("parents", "backward_fn", "name")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional float64 array that can take part in a differentiation graph.

    Args:
        data: array-like values. Converted to a C-contiguous float64 array.
        requires_grad: whether ``backward`` should populate ``grad`` for
            this tensor when it is a leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"shape extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return add(neg(self), _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: Number):
        return power(self, exponent)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def create(shape: Sequence[int], data: ArrayLike, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a shape and flat row-major data."""
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeError(f"data has {flat.size} values but shape {shape} needs {math.prod(shape)}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable, name: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._node = _Node(parents, backward_fn, name) if out.requires_grad else None
    return out


# -- broadcasting ----------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    """Return the output shape; ``b`` may only stretch extent-1 axes to ``a``."""
    if a.shape == b.shape:
        return a.shape
    if b.ndim > a.ndim:
        # allow scalars/lower-rank on the left by swapping roles
        a, b = b, a
    tail = a.shape[a.ndim - b.ndim:]
    for da, db in zip(tail, b.shape):
        if db != da and db != 1 and da != 1:
            raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")
    return np.broadcast_shapes(a.shape, b.shape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: Number) -> Tensor:
    ad = a.data
    out = ad ** p

    def bw(g):
        return (g * p * ad ** (p - 1),)

    return _make(out, (a,), bw, "power")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    # np.sign gives 0 at 0: subgradient 0 at ties
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``max(a, eps)``; zero gradient where clamped."""
    ad = a.data
    clamped = np.maximum(ad, eps) if eps > 0 else ad
    live = ad >= eps if eps > 0 else None

    def bw(g):
        d = g / clamped
        if live is not None:
            d = np.where(live, d, 0.0)
        return (d,)

    return _make(np.log(clamped), (a,), bw, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -- reductions and shape ops --------------------------------------------------


def _norm_axes(axes, ndim: int) -> Optional[tuple]:
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    if axes == ():
        return a
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        elif axes is None:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.atleast_1d(out), (a,), bw, "sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes`` (all axes when None, identity when empty)."""
    axes = _norm_axes(axes, a.ndim)
    if axes == ():
        return a
    count = a.size if axes is None else math.prod(a.shape[i] for i in axes)
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"cannot concatenate {t.shape} with {ref} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw, "concat")


# -- backward ----------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._node.parents, t._node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
