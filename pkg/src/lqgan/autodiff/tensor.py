"""Dense tensors with reverse-mode automatic differentiation.

Backward rules are written in terms of Tensor operations, so a backward pass
run with ``create_graph=True`` is itself differentiable. This is what the
gradient penalty needs: it differentiates the norm of an input gradient with
respect to the critic weights.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from lqgan.errors import ShapeError

_GRAD_ENABLED = True
DEFAULT_DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the graph node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, -_lift(other, self))

    def __rsub__(self, other):
        return Add.apply(_lift(other, self), -self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(_lift(other, self), self)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- reductions and shape ops ---------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        axes = _norm_axis(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    def broadcast_to(self, shape) -> Tensor:
        return BroadcastTo.apply(self, shape=tuple(shape))

    def sum_to(self, shape) -> Tensor:
        return SumTo.apply(self, shape=tuple(shape))

    # -- elementwise -----------------------------------------------------
    def exp(self) -> Tensor:
        return Exp.apply(self)

    def log(self) -> Tensor:
        return Log.apply(self)

    def sqrt(self) -> Tensor:
        return Pow.apply(self, exponent=0.5)

    def tanh(self) -> Tensor:
        return Tanh.apply(self)

    def sigmoid(self) -> Tensor:
        return Sigmoid.apply(self)

    def relu(self) -> Tensor:
        return Relu.apply(self)

    def leaky_relu(self, slope: float = 0.2) -> Tensor:
        return LeakyRelu.apply(self, slope=float(slope))

    def norm(self, axis=None, keepdims: bool = False) -> Tensor:
        return Norm.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    # -- autodiff entry point ---------------------------------------------
    def backward(self, grad=None, create_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires grad and participates in the graph."""
        leaves = [t for t in _topo_order(self) if t._ctx is None and t.requires_grad]
        grads = _run_backward(self, leaves, grad, create_graph)
        for leaf, g in zip(leaves, grads):
            gd = g.data if g is not None else np.zeros_like(leaf.data)
            if leaf.grad is None:
                leaf.grad = np.array(gd, dtype=leaf.dtype, copy=True)
            else:
                leaf.grad = leaf.grad + gd


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class _Node:
    __slots__ = ("fn", "inputs", "saved")

    def __init__(self, fn: Function, inputs: tuple[Tensor, ...]):
        self.fn = fn
        self.inputs = inputs
        self.saved: tuple = ()


class Function:
    """Base class for differentiable primitives.

    ``forward`` works on raw numpy arrays; ``backward`` receives the output
    gradient as a Tensor and returns one Tensor (or None) per input, built
    from Tensor operations.
    """

    def __init__(self, **attrs):
        self.__dict__.update(attrs)
        self.out: Tensor | None = None

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        fn = cls(**attrs)
        ref = next((x for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(
            x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=ref.dtype if ref is not None else DEFAULT_DTYPE))
            for x in inputs
        )
        try:
            out_data = fn.forward(*(t.data for t in tensors))
        except ValueError as exc:
            if isinstance(exc, ShapeError):
                raise
            raise ShapeError(
                f"{cls.__name__}: {exc}", op=cls.__name__, shapes=[list(t.shape) for t in tensors]
            ) from exc
        out = Tensor(out_data)
        if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = _Node(fn, tensors)
            fn.inputs = tensors
            fn.out = out
        return out

    def forward(self, *arrays):  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: Tensor):  # pragma: no cover - abstract
        raise NotImplementedError


def _topo_order(root: Tensor) -> list[Tensor]:
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
        if node._ctx is not None:
            for parent in reversed(node._ctx.inputs):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _run_backward(
    output: Tensor, targets: Sequence[Tensor], grad_output, create_graph: bool
) -> list[Tensor | None]:
    if not output.requires_grad:
        return [None for _ in targets]
    if grad_output is None:
        if output.size != 1:
            raise ShapeError("backward without grad_output needs a scalar output", shape=list(output.shape))
        grad_output = Tensor(np.ones_like(output.data))
    elif not isinstance(grad_output, Tensor):
        grad_output = Tensor(np.asarray(grad_output, dtype=output.dtype))
    order = _topo_order(output)
    grads: dict[int, Tensor] = {id(output): grad_output}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._ctx is None:
                continue
            fn = node._ctx.fn
            in_grads = fn.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(node._ctx.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    ig = ig.sum_to(inp.shape)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    return [grads.get(id(t)) for t in targets]


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs that do not influence the output receive zeros. With
    ``create_graph=True`` the returned tensors are part of the graph and can
    be differentiated again.
    """
    inputs = list(inputs)
    res = _run_backward(output, inputs, grad_output, create_graph)
    return [g if g is not None else Tensor(np.zeros_like(t.data)) for g, t in zip(res, inputs)]


# ---------------------------------------------------------------------------
# Broadcasting helpers


class BroadcastTo(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return np.broadcast_to(x, self.shape).copy()

    def backward(self, g):
        return (g.sum_to(self.in_shape),)


class SumTo(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return _sum_to(x, self.shape)

    def backward(self, g):
        return (g.broadcast_to(self.in_shape),)


def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError("cannot sum to a higher-rank shape", op="SumTo", shapes=[list(x.shape), list(shape)])
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and x.shape[lead + i] != 1:
            axes.append(lead + i)
    out = x.sum(axis=tuple(axes), keepdims=True)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise primitives


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return g * b, g * a


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = g / b
        return ga, -ga * a / b


class Pow(Function):
    def forward(self, a):
        return a**self.exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.exponent
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.out if self.out is not None else g * self.inputs[0].exp(),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g):
        y = self.out
        return (g * (1.0 - y * y),)


class Sigmoid(Function):
    def forward(self, a):
        # split form avoids overflow in exp for large |a|
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def backward(self, g):
        y = self.out
        return (g * y * (1.0 - y),)


class Relu(Function):
    def forward(self, a):
        self.mask = (a > 0).astype(a.dtype)
        return a * self.mask

    def backward(self, g):
        return (g * Tensor(self.mask),)


class LeakyRelu(Function):
    def forward(self, a):
        self.factor = np.where(a > 0, 1.0, self.slope).astype(a.dtype)
        return a * self.factor

    def backward(self, g):
        return (g * Tensor(self.factor),)


# ---------------------------------------------------------------------------
# Linear algebra, reductions, shape ops


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs operands of rank >= 2", op="MatMul", shapes=[list(a.shape), list(b.shape)])
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions differ: {a.shape} @ {b.shape}",
                op="MatMul",
                shapes=[list(a.shape), list(b.shape)],
            )
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = g @ _swap_last(b)
        gb = _swap_last(a) @ g
        return ga, gb


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(tuple(axes))


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g):
        if not self.keepdims:
            shape = list(self.in_shape)
            for ax in self.axis:
                shape[ax] = 1
            g = g.reshape(tuple(shape))
        return (g.broadcast_to(self.in_shape),)


class Norm(Function):
    """Euclidean norm over ``axis``; the gradient at a zero vector is zero."""

    def forward(self, a):
        return np.sqrt(np.sum(a * a, axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        (a,) = self.inputs
        y = self.out
        if not self.keepdims:
            shape = list(a.shape)
            for ax in self.axis:
                shape[ax] = 1
            g = g.reshape(tuple(shape))
            y = y.reshape(tuple(shape))
        safe = Tensor((y.data == 0).astype(a.dtype))
        return (a * (g / (y + safe)),)


class Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a):
        if sorted(self.axes) != list(range(a.ndim)):
            raise ShapeError("invalid permutation", op="Transpose", shapes=[list(a.shape)], axes=list(self.axes))
        return np.transpose(a, self.axes)

    def backward(self, g):
        inv = tuple(np.argsort(self.axes))
        return (g.transpose(inv),)


class GetItem(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.array(a[self.index], copy=True)

    def backward(self, g):
        return (ScatterAdd.apply(g, index=self.index, shape=self.in_shape),)


class ScatterAdd(Function):
    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return out

    def backward(self, g):
        return (g[self.index],)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        out = []
        start = 0
        for size in self.sizes:
            idx = [slice(None)] * g.ndim
            idx[self.axis] = slice(start, start + size)
            out.append(g[tuple(idx)])
            start += size
        return tuple(out)


# ---------------------------------------------------------------------------
# Convolution support: im2col / col2im are mutually adjoint linear maps


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, image_shape: tuple[int, int, int], k: int, s: int, p: int) -> np.ndarray:
    c, h, w = image_shape
    n = cols.shape[0]
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    return xp[:, :, p : p + h, p : p + w] if p else xp


class Im2Col(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError("im2col expects NCHW input", op="Im2Col", shapes=[list(x.shape)])
        self.image_shape = x.shape[1:]
        return _im2col(x, self.kernel, self.stride, self.padding)

    def backward(self, g):
        return (Col2Im.apply(g, image_shape=self.image_shape, kernel=self.kernel, stride=self.stride, padding=self.padding),)


class Col2Im(Function):
    def forward(self, cols):
        return _col2im(cols, self.image_shape, self.kernel, self.stride, self.padding)

    def backward(self, g):
        return (Im2Col.apply(g, kernel=self.kernel, stride=self.stride, padding=self.padding),)
