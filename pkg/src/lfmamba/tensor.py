"""Dense tensors with taped reverse-mode differentiation on top of numpy.

Every primitive records its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` replays the tape in
reverse topological order. Leaves that require gradients (parameters)
accumulate into ``.grad``; intermediate gradients are discarded.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class AxesError(ValueError):
    """Raised when an axis order is not a permutation."""


class StateError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


class DomainError(ValueError):
    """Raised when an argument lies outside an operation's domain."""


_STATE = {"dtype": np.float64, "grad": True}


def get_default_dtype():
    return _STATE["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _STATE["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type for new tensors."""
    old = _STATE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference, finite differences)."""
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


def grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _STATE["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation -----------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if not self.requires_grad:
            raise StateError("backward called on a tensor with no recorded forward pass")
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None


def _topological(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result, recording ``backward`` when any parent is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return make_op(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_op(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return make_op(out, (a,), lambda g: (g * _sigmoid(a.data),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_op(a.data * scale, (a,), lambda g: (g * scale,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(min(x, 0)) / (1 + exp(-|x|)): no overflow, full relative precision in both tails
    return np.exp(np.minimum(x, 0)) / (1.0 + np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, new_shape) -> Tensor:
    a = as_tensor(a)
    new_shape = tuple(int(n) for n in new_shape)
    if -1 in new_shape:
        known = int(np.prod([n for n in new_shape if n != -1]))
        if known == 0 or a.size % known:
            raise ShapeError(f"cannot reshape {a.shape} to {new_shape}")
        new_shape = tuple(a.size // known if n == -1 else n for n in new_shape)
    if int(np.prod(new_shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {new_shape}")
    old = a.shape
    return make_op(a.data.reshape(new_shape), (a,), lambda g: (g.reshape(old),))


def permute(a, order) -> Tensor:
    a = as_tensor(a)
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(a.ndim)):
        raise AxesError(f"{order} is not a permutation of the axes of a rank-{a.ndim} tensor")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(np.transpose(a.data, order))
    return make_op(out, (a,), lambda g: (np.transpose(g, inverse),))


def flip(a, axes) -> Tensor:
    a = as_tensor(a)
    return make_op(np.flip(a.data, axes).copy(), (a,), lambda g: (np.flip(g, axes),))


def take(a, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; permutations take a scatter-free backward path."""
    a = as_tensor(a)
    index = np.asarray(index)
    axis = axis % a.ndim
    n = a.shape[axis]
    bijective = index.ndim == 1 and index.size == n and np.array_equal(np.sort(index), np.arange(n))

    def backward(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = index
        if bijective:
            out = np.empty_like(g)
            out[tuple(sl)] = g
        else:
            out = np.zeros(a.shape, dtype=g.dtype)
            np.add.at(out, tuple(sl), g)
        return (out,)

    return make_op(np.take(a.data, index, axis=axis), (a,), backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] += g
        return (out,)

    return make_op(np.array(a.data[index]), (a,), backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def split(a, sections: int, axis: int = -1) -> list:
    a = as_tensor(a)
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"axis of length {n} is not divisible into {sections} parts")
    step = n // sections
    out = []
    for i in range(sections):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(sl)))
    return out


def pad_spatial(a, pad: int) -> Tensor:
    """Zero-pad axes 1 and 2 of a channel-last [B, H, W, C] tensor."""
    a = as_tensor(a)
    if pad == 0:
        return a
    widths = [(0, 0), (pad, pad), (pad, pad), (0, 0)]
    return make_op(np.pad(a.data, widths), (a,),
                   lambda g: (g[:, pad:-pad, pad:-pad, :],))
