"""Dense N-D tensors with reverse-mode automatic differentiation.

The graph is recorded as operations execute. Every tensor produced by a
differentiable operation carries a sequence number taken from a global
counter, so sorting reachable nodes by that number recovers the execution
order; ``backward`` walks it in reverse, visiting each node exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_sequence = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Invalid use of the differentiation graph."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported tensor dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (e.g. ``np.float64`` for oracles)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them for differentiation."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_sequence)
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        if data.base is not None:
            data = data.copy()
        out.data = data
        out.grad = None
        out._seq = next(_sequence)
        out._op = op
        out._consumed = False
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf requiring it.

        Interior nodes release their closures afterwards; a second call on
        the same graph raises ``GraphError``.
        """
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("tensor is detached from any graph (no input requires grad)")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            if node._consumed:
                raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in nodes.values():
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def ln(self) -> Tensor:
        return ln(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only scalar or identical shapes broadcast)")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(s)
    return Tensor._result(a.data * s, (a,), lambda g: (g * s,), "scale")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    lo, hi = a.dtype.type(lo), a.dtype.type(hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return Tensor._result(np.where(positive, a.data, a.dtype.type(0)), (a,), lambda g: (g * positive,), "relu")


def _inside(out: np.ndarray, lo: float, hi: float, lo_floor=None) -> np.ndarray:
    # Saturated results round onto the range ends; keep them one step inside
    # so the open-interval ranges hold in floating point too.
    t = out.dtype.type
    lo_in = t(lo_floor) if lo_floor is not None else np.nextafter(t(lo), t(hi))
    return np.clip(out, lo_in, np.nextafter(t(hi), t(lo)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _inside(expit(a.data), 0.0, 1.0, np.finfo(a.dtype).tiny)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _inside(np.tanh(a.data), -1.0, 1.0)
    return Tensor._result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def ln(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "ln")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = a.dtype.type(exponent)
    return Tensor._result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "ln": ln}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``b`` is the second operand for add/sub/mul, the factor for ``scale``,
    the exponent for ``pow`` and a ``(lo, hi)`` pair for ``clamp``.
    """
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "pow":
        return power(a, b)
    if kind == "clamp":
        lo, hi = b
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {kind!r}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return Tensor._result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got {a.shape}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True).reshape(a.shape),)

    return Tensor._result(out, (a,), backward, "broadcast")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(out, (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim)) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tensor_sum(a, axis, keepdims), 1.0 / count)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._result(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def _spatial_count(x: Tensor) -> int:
    if x.ndim != 5:
        raise ShapeError(f"expected a rank-5 [N,C,D,H,W] tensor, got shape {x.shape}")
    count = int(np.prod(x.shape[2:]))
    if count == 0:
        raise ShapeError(f"empty spatial extent {x.shape[2:]}")
    return count


def channel_mean(x) -> Tensor:
    x = as_tensor(x)
    m = _spatial_count(x)
    return Tensor._result(
        x.data.mean(axis=(2, 3, 4)),
        (x,),
        lambda g: (np.broadcast_to((g / m)[:, :, None, None, None], x.shape),),
        "channel_mean",
    )


def channel_var(x) -> Tensor:
    """Population variance over the spatial axes of each (sample, channel)."""
    x = as_tensor(x)
    m = _spatial_count(x)
    centered = x.data - x.data.mean(axis=(2, 3, 4), keepdims=True)
    var = (centered * centered).mean(axis=(2, 3, 4))
    return Tensor._result(var, (x,), lambda g: (g[:, :, None, None, None] * (2.0 / m) * centered,), "channel_var")


def channel_stats(x) -> tuple[Tensor, Tensor]:
    """Per-(sample, channel) mean and population variance of an [N,C,D,H,W] tensor."""
    return channel_mean(x), channel_var(x)
