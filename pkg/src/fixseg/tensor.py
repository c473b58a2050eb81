"""Dense tensors with a define-by-run reverse-mode tape.

Values live in numpy arrays. Every op that touches a tensor with
``requires_grad=True`` while a :class:`Tape` is active records a node holding
its inputs and a vector-Jacobian product closure. :func:`backward` walks the
tape once in reverse.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must be a scalar, or the smaller shape must be a suffix of the larger one
(leading-dimension expansion). Anything else needs an explicit
:meth:`Tensor.expand`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

DIV_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class DetachedTensorError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]
    index: int
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive ops. Use as a context manager."""

    nodes: list = field(default_factory=list)
    marks: list = field(default_factory=list)
    consumed: bool = False

    def record(self, op, inputs, vjp) -> Node:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        node = Node(op, tuple(inputs), vjp, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def mark(self, label: str) -> None:
        self.marks.append((label, len(self.nodes)))

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None
        self.is_leaf = True

    # -- basic protocol -------------------------------------------------
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_reduce(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)

    def relu(self):
        return relu(self)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.is_leaf = False
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            out.tape_node = tape.record(op, inputs, vjp)
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(f"{op}: incompatible shapes {a} and {b} (use expand for non-leading broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


def _binary(op, a, b, fwd, vjp_factory):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _broadcast_shape(op, a.shape, b.shape)
    data = fwd(a.data, b.data)
    return _make(op, data, (a, b), vjp_factory(a, b, data))


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    def vjp_factory(a, b, out):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _binary("add", a, b, np.add, vjp_factory)


def sub(a, b) -> Tensor:
    def vjp_factory(a, b, out):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _binary("sub", a, b, np.subtract, vjp_factory)


def mul(a, b) -> Tensor:
    def vjp_factory(a, b, out):
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))

    return _binary("mul", a, b, np.multiply, vjp_factory)


def div(a, b, eps: Optional[float] = None) -> Tensor:
    """``a / b``. Without ``eps`` a denominator below 1e-12 in magnitude raises;
    with ``eps`` the denominator becomes ``b + eps`` (intended for non-negative
    denominators such as norms and weight sums)."""
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a if isinstance(a, Tensor) else None)
    if eps is not None:
        b = add(b, eps)
    elif np.any(np.abs(b.data) < DIV_EPS):
        raise NumericalError(f"div: denominator magnitude below {DIV_EPS:g} (shape {b.shape}); pass eps to guard")

    def vjp_factory(a, b, out):
        bd = b.data
        return lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape))

    return _binary("div", a, b, np.divide, vjp_factory)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log: non-positive input")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _make("sqrt", out, (a,), lambda g: (np.where(out > 0, g / (2.0 * safe), 0.0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


# -- linear algebra ----------------------------------------------------------
def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either operand may carry extra leading batch axes that the other lacks;
    a 2-D weight applied to a stack of matrices is the common case.
    """
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ in {a.shape} and {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        shorter, longer = (ba, bb) if len(ba) < len(bb) else (bb, ba)
        if longer[len(longer) - len(shorter):] != shorter:
            raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        return (_matmul_unbroadcast(np.matmul(g, _swap(bd)), a.shape),
                _matmul_unbroadcast(np.matmul(_swap(ad), g), b.shape))

    return _make("matmul", out, (a, b), vjp)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched_matmul: batch dimensions differ in {a.shape} and {b.shape}")
    return matmul(a, b)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along a trailing axis of length 3."""
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError(f"cross: need equal shapes ending in 3, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.cross(ad, bd)
    return _make("cross", out, (a, b), lambda g: (np.cross(bd, g), np.cross(g, ad)))


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _restore(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape
    return _make("sum", np.asarray(out), (a,), lambda g: (_restore(g, shape, axes, keepdims).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape
    return _make("mean", np.asarray(out), (a,), lambda g: (_restore(g, shape, axes, keepdims) / count,))


def max_reduce(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Max along one axis (or all). The gradient goes to the first maximal entry."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        shape = a.shape

        def vjp(g):
            grad = np.zeros(flat.shape, dtype=a.dtype)
            grad[idx] = np.asarray(g).reshape(-1)[0]
            return (grad.reshape(shape),)

        out = np.asarray(out).reshape((1,) * a.ndim if keepdims else ())
        return _make("max", out, (a,), vjp)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def vjp(g):
        grad = np.zeros(a.shape, dtype=a.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gk, axis=axis)
        return (grad,)

    return _make("max", out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    ad = a.data
    nrm = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    safe = np.where(nrm > 0, nrm, 1.0)
    out = nrm if keepdims else np.squeeze(nrm, axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.where(nrm > 0, gk * ad / safe, 0.0),)

    return _make("l2_norm", out, (a,), vjp)


# -- shape ops ---------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes (and prepend leading axes) to ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0:
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    for src, dst in zip(a.shape, shape[lead:]):
        if src != dst and src != 1:
            raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    src_shape = a.shape
    axes = tuple(i + lead for i, (s, d) in enumerate(zip(src_shape, shape[lead:])) if s == 1 and d != 1)

    def vjp(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if axes:
            g = g.sum(axis=tuple(ax - lead for ax in axes), keepdims=True)
        return (g.reshape(src_shape),)

    return _make("expand", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        grad = np.zeros(shape, dtype=dtype)
        np.add.at(grad, key, g) if _has_array_index(key) else grad.__setitem__(key, g)
        return (grad,)

    return _make("slice", np.array(out, copy=True), (a,), vjp)


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0; output shape is ``index.shape + a.shape[1:]``."""
    index = np.asarray(index, dtype=np.intp)
    rows, rest = a.shape[0], a.shape[1:]
    out = a.data[index]

    def vjp(g):
        flat = index.reshape(-1)
        gf = g.reshape(flat.size, -1)
        grad = np.zeros((rows, gf.shape[1]), dtype=g.dtype)
        # sort once so the scatter is a segmented sum
        order = np.argsort(flat, kind="stable")
        sorted_idx = flat[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]]) if flat.size else np.array([], int)
        if flat.size:
            grad[sorted_idx[starts]] = np.add.reduceat(gf[order], starts, axis=0)
        return (grad.reshape((rows,) + rest),)

    return _make("take", out, (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


# -- backward ----------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf on loss's tape."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        if loss.requires_grad and not loss.is_leaf:
            raise DetachedTensorError("backward: loss was computed outside an active tape")
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape, dtype=loss.dtype) if loss.grad is None else loss.grad + 1.0
        return
    tape = node.tape
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed")
    pending = {node.index: np.ones(loss.shape, dtype=loss.dtype)}
    for current in reversed(tape.nodes[: node.index + 1]):
        g = pending.pop(current.index, None)
        if g is None:
            continue
        grads = current.vjp(g)
        for inp, gi in zip(current.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
            src = inp.tape_node
            if src is not None and src.tape is tape:
                prev = pending.get(src.index)
                pending[src.index] = gi if prev is None else prev + gi
            elif inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                raise DetachedTensorError(
                    f"backward: input of '{current.op}' requires grad but is not on this tape"
                )
    tape.consumed = True
    tape.nodes.clear()
