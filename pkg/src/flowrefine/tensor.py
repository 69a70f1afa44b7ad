"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure computing the vector-Jacobian product for each
parent; :meth:`Tensor.backward` replays those closures in reverse
topological order.

Shapes are never broadcast implicitly. Binary operations accept either two
tensors of identical shape or a tensor and a scalar (a Python number or a
0-d tensor). Anything else raises :class:`~flowrefine.errors.ShapeError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphStateError, ShapeError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported element type {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the element type used for new tensors."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
            dtype = dtype or data.dtype
        if dtype is None:
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._freed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=None):
        return cls(np.zeros(shape), requires_grad, dtype or _default_dtype)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=None):
        return cls(np.ones(shape), requires_grad, dtype or _default_dtype)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Gradients accumulate into existing ``.grad`` arrays. Unless
        ``retain_graph`` is set, the recorded closures are released and a
        second call raises :class:`GraphStateError`.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}", axis=0)
        if self._freed:
            raise GraphStateError("graph already freed by a previous backward; pass retain_graph=True")
        if not self.requires_grad:
            raise GraphStateError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                if node._freed:
                    raise GraphStateError(f"graph node {node._op!r} was freed by a previous backward")
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._freed = True

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a Python scalar")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def elu(self):
        return elu(self)

    def abs(self):
        return abs_(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording ``backward`` when any parent needs grad."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_same_shape(a: Tensor, b: Tensor, what: str = "operands") -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{what}: rank {a.ndim} vs {b.ndim} ({a.shape} vs {b.shape})", axis=None)
    for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n:
            raise ShapeError(f"{what}: axis {axis} has size {m} vs {n} ({a.shape} vs {b.shape})", axis=axis)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _binary(a, b, name):
    """Resolve operands to (tensor, tensor-or-number) with the scalar rule."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor) and b.ndim != 0 and a.ndim != 0:
        check_same_shape(a, b, name)
    elif isinstance(b, Tensor) and a.ndim == 0 and b.ndim != 0:
        a, b = b, a
    return a, b


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if like.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=like.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    if not isinstance(b, Tensor):
        return make_node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    return make_node(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b)), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    if not isinstance(b, Tensor):
        return make_node(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b)), "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("exponent must be a Python scalar")
    ad = a.data
    out = ad ** exponent
    return make_node(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def elu(a: Tensor) -> Tensor:
    """``x`` for x > 0, ``exp(x) - 1`` otherwise; continuously differentiable."""
    pos = a.data > 0
    neg = np.expm1(np.minimum(a.data, 0))
    out = np.where(pos, a.data, neg)
    return make_node(out, (a,), lambda g: (g * np.where(pos, 1, neg + 1).astype(g.dtype, copy=False),), "elu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def spatial_mean(a: Tensor) -> Tensor:
    """Mean over the trailing two (height, width) axes, keeping them as size 1."""
    return mean(a, axis=(-2, -1), keepdims=True)


def l1(a: Tensor) -> Tensor:
    """Mean absolute value over all elements."""
    return mean(abs_(a))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g) if _has_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return make_node(np.array(a.data[index]), (a,), backward, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicitly repeat size-1 axes of ``a`` up to ``shape``."""
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise ShapeError(f"broadcast_to: rank {a.ndim} vs target rank {len(shape)}")
    axes = []
    for axis, (m, n) in enumerate(zip(a.shape, shape)):
        if m != n:
            if m != 1:
                raise ShapeError(f"broadcast_to: axis {axis} has size {m}, cannot expand to {n}", axis=axis)
            axes.append(axis)
    axes = tuple(axes)
    out = np.broadcast_to(a.data, shape).copy()
    return make_node(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default); other axes must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank {t.ndim} vs {ref.ndim}")
        for ax, (m, n) in enumerate(zip(ref.shape, t.shape)):
            if ax != axis and m != n:
                raise ShapeError(f"concat: axis {ax} has size {n} vs {m}", axis=ax)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")
