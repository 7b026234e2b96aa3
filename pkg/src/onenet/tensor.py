"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array. Every differentiable op
records a :class:`TapeNode` on its output holding the inputs and a closure
that maps the output gradient to input gradients. :func:`backward` walks
those nodes once in reverse topological order and accumulates (``+=``)
into the ``grad`` buffers of leaves.

Precision defaults to float32; wrap code in ``precision("float64")`` for
gradient verification.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording tape nodes."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_finite_check_enabled() -> bool:
    return _get("check_finite", True)


@contextlib.contextmanager
def allow_nonfinite():
    """Suspend the NaN/Inf check on op outputs (used by perturbation probes)."""
    old = is_finite_check_enabled()
    _state.check_finite = False
    try:
        yield
    finally:
        _state.check_finite = old


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        # closure over whatever activations the op saved
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    # let numpy defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind == "f" or (requires_grad and arr.dtype.kind in "iub"):
            arr = arr.astype(get_default_dtype(), copy=False)
        if requires_grad and arr.dtype.kind != "f":
            raise TypeError("only floating tensors can require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node: TapeNode | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def argmax(self, axis=-1):
        return argmax(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_default_dtype()))


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result, attaching a tape node when gradients are needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if is_finite_check_enabled() and out.dtype.kind == "f" and not np.isfinite(out).all():
        raise NumericError(f"{op}: forward produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = False
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, tuple(inputs), backward_fn)
    return t


# -- broadcasting --------------------------------------------------------

def broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Output shape for a binary elementwise op.

    Allowed: equal shapes, a scalar operand, or right-aligned expansion of
    one operand into the other's exact shape. Mutual expansion such as
    (N,1) with (1,C) is rejected.
    """
    if a == b:
        return a
    for small, big in ((a, b), (b, a)):
        if len(small) > len(big):
            continue
        if int(np.prod(small, dtype=np.int64)) == 1:
            return big
        tail = big[len(big) - len(small):]
        if all(s == t or s == 1 for s, t in zip(small, tail)):
            return big
    raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return a, b


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_op("div", out, (a, b), bw)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    f = a.data.dtype.type(factor)
    return make_op("scale", a.data * f, (a,), lambda g: (g * f,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: non-positive input")
    return make_op("log", np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, a.data.dtype.type(0))
    return make_op("relu", out, (a,), lambda g: (g * (out > 0),))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    out = np.where(keep, a.data, a.data.dtype.type(floor))
    return make_op("clamp_min", out, (a,), lambda g: (g * keep,))


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_op("matmul", ad @ bd, (a, b), bw)


# -- shape ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_op("getitem", np.array(a.data[index]), (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_op("stack", out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- reductions ----------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _check_nonempty(a, axes):
    if a.size == 0 or any(a.shape[ax] == 0 for ax in axes):
        raise DimensionError("reduction over an empty axis")


def _expand_back(g, src_shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, src_shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    return make_op("sum", out, (a,), lambda g: (_expand_back(g, src, axes, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    src = a.shape
    n = int(np.prod([src[ax] for ax in axes], dtype=np.int64))
    inv = a.dtype.type(1.0 / n)
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return make_op("mean", out, (a,), lambda g: (_expand_back(g, src, axes, keepdims) * inv,))


def max(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    """Maximum; the gradient goes to the first maximal element only."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    x = a.data
    # move reduced axes to the end and flatten them so argmax picks the lowest index
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def bw(g):
        g = np.asarray(g).reshape(kept_shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return make_op("max", np.asarray(out), (a,), bw)


def argmax(a, axis=-1) -> Tensor:
    """Index of the maximum along ``axis``; ties resolve to the lowest index."""
    a = as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    _check_nonempty(a, (ax,))
    return Tensor(np.argmax(a.data, axis=ax))


# -- softmax family ----------------------------------------------------------

def _check_logits(z: np.ndarray, op: str):
    if not np.isfinite(z).all():
        raise NumericError(f"{op}: non-finite logits")


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    _check_logits(z.data, "softmax")
    s = softmax_array(z.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", s, (z,), bw)


def log_softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    _check_logits(z.data, "log_softmax")
    out = log_softmax_array(z.data, axis)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (z,), bw)


# -- backward ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack_.append((inp, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.dtype)
            if ig.shape != inp.shape:
                ig = ig.reshape(inp.shape)
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()
