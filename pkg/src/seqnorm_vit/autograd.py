"""Dense tensors with reverse-mode automatic differentiation.

Storage and kernels are numpy arrays; this module only adds the graph
bookkeeping.  Every differentiable operation builds its output through
:func:`_result`, which records the parent tensors and a closure mapping the
output gradient to parent gradients.  :meth:`Tensor.backward` replays those
closures in reverse topological order.

Precision is chosen per graph: tensors built from python data use the
current default dtype (float32 unless changed with :func:`precision`),
tensors built from floating numpy arrays keep the array's dtype.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradientError",
    "NumericError",
    "precision",
    "default_dtype",
    "set_default_dtype",
    "allocation_hook",
    "no_grad",
    "matmul",
    "softmax",
    "log_softmax",
    "seq_stats",
    "normalize",
    "l1_normalize",
    "gelu",
    "concat",
    "broadcast_to",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, reused graph...)."""


class NumericError(FloatingPointError):
    """A kernel received non-finite input where finite input is required."""


_DTYPES = {
    "f32": np.float32,
    "float32": np.float32,
    "f64": np.float64,
    "float64": np.float64,
}

_default_dtype: type = np.float32
_grad_enabled = True
_hooks: list[Callable[["Tensor", str], None]] = []


def _as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = _DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unknown precision {dtype!r}; expected f32 or f64") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = _as_dtype(dtype).type


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily switch the default dtype, e.g. ``with precision("f64"):``."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = _as_dtype(dtype).type
    try:
        yield np.dtype(_default_dtype)
    finally:
        _default_dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction; results are plain constant tensors."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def allocation_hook(fn: Callable[["Tensor", str], None]) -> Iterator[None]:
    """Call ``fn(tensor, op_name)`` for every op output backed by fresh memory.

    Outputs that overlap an input's buffer (reshape/transpose/slice views)
    are not reported.
    """
    _hooks.append(fn)
    try:
        yield
    finally:
        _hooks.remove(fn)


Grads = Sequence[np.ndarray | None]


class Tensor:
    """N-dimensional array node of a differentiation graph.

    ``requires_grad`` leaves receive ``.grad`` after :meth:`backward`.
    A gradient that is already present makes a second backward an error;
    call :meth:`zero_grad` between passes.
    """

    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=_as_dtype(dtype))
        else:
            # float arrays keep their precision; Python numbers and lists,
            # integers and bools take the default
            arr = np.asarray(data)
            if not isinstance(data, (np.ndarray, np.floating)) or arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Grads] | None = None

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every requires-grad leaf reachable from here.

        The graph is released afterwards, so a tensor can be back-propagated
        exactly once.
        """
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GradientError("loss is not attached to a graph (requires_grad=False)")
        if self.is_leaf and self.grad is not None:
            raise GradientError("gradient already populated; call zero_grad() first")

        order = _topological_order(self)
        leaves = [t for t in order if t.is_leaf and t.requires_grad]
        stale = [t for t in leaves if t.grad is not None]
        if stale:
            raise GradientError(
                f"{len(stale)} leaf gradient(s) already populated; call zero_grad() "
                "before a second backward pass"
            )

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node.grad = np.array(g, dtype=node.dtype, copy=True)
                continue
            if g is None:
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
            node._parents = ()
            node._backward = _consumed

    # -- operator sugar ---------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return absolute(self)

    def sqrt(self):
        return power(self, 0.5)


def _consumed(_g):
    raise GradientError("graph already released by a previous backward pass")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        if node._backward is _consumed:
            raise GradientError("graph already released by a previous backward pass")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: Callable[[np.ndarray], Grads],
    op: str,
) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = backward if needs else None
    if _hooks and not any(np.may_share_memory(data, p.data) for p in parents):
        for hook in _hooks:
            hook(out, op)
    return out


def _broadcast_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("add", a.shape, b.shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, 1.0 / float(b))
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (kept out of the graph)."""
    a = _lift(a)
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def power(a: Tensor, exponent: float) -> Tensor:
    p = a.dtype.type(exponent)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _result(out, (a,), backward, "pow")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _result(out, (a,), backward, "gelu")


# -- reductions --------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


# -- shape manipulation --------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", a.shape, shape)
    out = np.broadcast_to(a.data, shape)
    return _result(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(out), (a,), backward, "getitem")


# -- linear algebra ------------------------------------------------------------
def matmul(a, b, op: str = "matmul") -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    ``op`` only labels the node (allocation probes report it).
    """
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(_matmul_like(a.data, g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight matrix: fold the batch axes into one GEMM
                k, n = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(_matmul_like(b.data, np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, op)


def _matmul_like(ref: np.ndarray, lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``lhs @ rhs`` laid out in memory like ``ref``.

    Gradients of transposed views (e.g. ``K.T``) then flow back through the
    view chain as C-contiguous arrays instead of strided ones.
    """
    if ref.ndim >= 2 and ref.strides[-1] > ref.strides[-2] and ref.shape[-2] > 1:
        return np.swapaxes(np.matmul(np.swapaxes(rhs, -1, -2), np.swapaxes(lhs, -1, -2)), -1, -2)
    return np.matmul(lhs, rhs)


# -- fused numerics --------------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    if not np.isfinite(a.data).all():
        raise NumericError("softmax received non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def backward(g):
        gy = g * out
        gy -= out * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericError("log_softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def seq_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-feature mean and population variance over the sequence axis (-2)."""
    if x.ndim < 2:
        raise ShapeError(f"seq_stats expects [..., N, F], got {x.shape}")
    if x.shape[-2] < 1:
        raise ShapeError("seq_stats needs at least one token")
    mean = reduce_mean(x, axis=-2)
    centered = x - reshape(mean, mean.shape[:-1] + (1, mean.shape[-1]))
    var = reduce_mean(centered * centered, axis=-2)
    return mean, var


def normalize(x: Tensor, axis: int, eps: float, mask: np.ndarray | None = None) -> Tensor:
    """Standardize ``x`` along one axis: ``(x - mean) / sqrt(var + eps)``.

    Population variance.  With ``mask`` (broadcastable to ``x``, 1 = valid),
    statistics use valid positions only and masked positions come out as 0.
    """
    ax = axis % x.ndim
    data = x.data
    dt = data.dtype.type
    if mask is None:
        count = dt(data.shape[ax])
        mean = data.mean(axis=ax, keepdims=True)
        centered = data - mean
        var = (centered * centered).mean(axis=ax, keepdims=True)
    else:
        mask = mask.astype(data.dtype, copy=False)
        count = mask.sum(axis=ax, keepdims=True)
        mean = (data * mask).sum(axis=ax, keepdims=True) / count
        centered = (data - mean) * mask
        var = (centered * centered).sum(axis=ax, keepdims=True) / count
    inv_std = 1.0 / np.sqrt(var + dt(eps))
    out = centered
    out *= inv_std

    def backward(g):
        if mask is not None:
            g = g * mask
        g_mean = g.sum(axis=ax, keepdims=True) / count
        t = np.multiply(g, out)
        gx_mean = t.sum(axis=ax, keepdims=True) / count
        np.multiply(out, gx_mean, out=t)
        np.subtract(g, t, out=t)
        t -= g_mean
        t *= inv_std
        if mask is not None:
            t *= mask
        return (t,)

    return _result(out, (x,), backward, "normalize")


def l1_normalize(x: Tensor, axis: int, eps: float) -> Tensor:
    """``x / (sum(|x|, axis) + eps)``: unit l1 norm along one axis."""
    ax = axis % x.ndim
    data = x.data
    denom = np.abs(data).sum(axis=ax, keepdims=True) + data.dtype.type(eps)
    out = data / denom

    def backward(g):
        # one scratch buffer; large fresh temporaries dominate at long N
        t = np.multiply(g, out)
        inner = t.sum(axis=ax, keepdims=True)
        np.sign(data, out=t)
        t *= inner
        np.subtract(g, t, out=t)
        t /= denom
        return (t,)

    return _result(out, (x,), backward, "l1_normalize")
