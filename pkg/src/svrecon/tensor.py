"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable quantity in the pipeline is a :class:`Tensor`. Ops record
their parents and a closure mapping the output gradient to input gradients;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class TensorError(ValueError):
    """Base class for errors raised by tensor ops."""


class ShapeError(TensorError):
    pass


class DomainError(TensorError):
    pass


class ContractError(TensorError):
    pass


class ConfigError(TensorError):
    pass


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float64)


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def get_default_dtype():
    return _dtype()


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the floating point type used for new tensors."""
    prev = _dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is None:
        dtype = _dtype()
    if arr.dtype != dtype and arr.dtype.kind in "fiub":
        arr = arr.astype(dtype)
    return arr


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operators --------------------------------------------------------
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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


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
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result with a hand-written backward closure.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    return Tensor._make(data, parents, backward)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(_as_array(x, dtype))


# elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def negate(a) -> Tensor:
    a = _wrap(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def exp(a, cutoff: float | None = None) -> Tensor:
    """``exp(a)``; with ``cutoff``, arguments below it give exactly 0 (value and gradient)."""
    a = _wrap(a)
    if cutoff is None:
        out = np.exp(a.data)
    else:
        out = np.exp(np.maximum(a.data, cutoff))
        out = np.where(a.data < cutoff, out.dtype.type(0), out)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = _wrap(a)
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: one transcendental, no overflow for any finite x
    out = np.tanh(0.5 * x)
    out += 1
    out *= 0.5
    return out.astype(x.dtype, copy=False)


def silu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = _sigmoid(x)
    return Tensor._make(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def softplus(a, beta: float = 1.0) -> Tensor:
    """log(1 + exp(beta*x)) / beta, computed stably."""
    a = _wrap(a)
    z = a.data * beta
    # log1p(exp(-30)) is below float64 resolution of max(z, 0) terms; clamping
    # keeps exp out of the slow denormal range
    out = np.minimum(np.abs(z), 30.0)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(z, 0)
    out /= beta
    s = _sigmoid(z)
    return Tensor._make(out.astype(a.dtype), (a,), lambda g: (g * s,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),))


def tabs(a) -> Tensor:
    a = _wrap(a)
    # sign(0) == 0 gives the zero subgradient at the kink
    sgn = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def clamp_min(a, lo: float) -> Tensor:
    a = _wrap(a)
    keep = a.data > lo
    return Tensor._make(np.where(keep, a.data, lo).astype(a.dtype), (a,), lambda g: (g * keep,))


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds take ``b``, ``clamp_min`` takes the bound as ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {
        "exp": exp, "log": log, "relu": relu, "silu": silu, "tanh": tanh, "abs": tabs,
        "sqrt": sqrt, "negate": negate, "sigmoid": sigmoid, "softplus": softplus,
    }
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    if op_kind == "clamp_min":
        return clamp_min(a, b)
    raise ContractError(f"unknown elementwise op {op_kind!r}")


# reductions and shape ops -----------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    out = a.data[idx]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.asarray(out), (a,), backward)


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather rows along axis 0; faster backward than generic indexing."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        flat = g.reshape(len(rows), -1)
        full = np.zeros((n, flat.shape[1]), dtype=g.dtype)
        for col in range(flat.shape[1]):
            full[:, col] = np.bincount(rows, weights=flat[:, col], minlength=n)
        return (full.reshape((n,) + g.shape[1:]),)

    return Tensor._make(a.data[rows], (a,), backward)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(axis: int, parts: Sequence) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    axis = _check_axis(axis, parts[0].ndim, "concat")
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} disagree off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def split(axis: int, sizes: Sequence[int], x) -> list[Tensor]:
    x = _wrap(x)
    axis = _check_axis(axis, x.ndim, "split")
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to axis length {x.shape[axis]}")
    out = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        out.append(_slice(x, tuple(sl)))
        start += s
    return out


def _slice(a: Tensor, sl: tuple) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return Tensor._make(a.data[sl], (a,), backward)


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _check_axis(axis, a.ndim, "cumsum")
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = out - a.data

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if exclusive:
            rev = rev - g
        return (rev,)

    return Tensor._make(out, (a,), backward)


# linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a single C_in x H x W map."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigError(
            f"conv2d: output size ({hp}-{kh})/{stride}+1 x ({wp}-{kw})/{stride}+1 is not an integer"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # C_in, ho, wo, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, ho * wo)
    wmat = w.data.reshape(c_out, -1)
    out = wmat @ cols
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        out = out + b.data[:, None]
        parents.append(b)
    out = out.reshape(c_out, ho, wo)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c_in, kh, kw, ho, wo)
            dxp = np.zeros((c_in, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


# normalisation and attention helpers -----------------------------------


def softmax_lastdim(x) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def layer_norm_lastdim(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]
    out = xhat
    parents = [x]
    gd = None
    if gain is not None:
        gain = _wrap(gain)
        gd = gain.data
        out = out * gd
        parents.append(gain)
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
        parents.append(bias)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gd if gd is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def bilinear_sample_2d(fmap, uv) -> Tensor:
    """Sample a C x H x W map at continuous pixel coordinates.

    ``uv[:, 0]`` is the column (x) and ``uv[:, 1]`` the row (y); integer
    coordinates land on pixel centres. Coordinates are clamped to the border.
    Differentiable with respect to ``fmap`` only.
    """
    fmap = _wrap(fmap)
    uv = np.asarray(uv.data if isinstance(uv, Tensor) else uv, dtype=np.float64)
    if fmap.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(f"bilinear_sample_2d: bad shapes {fmap.shape}, {uv.shape}")
    c, h, w = fmap.shape
    u = np.clip(uv[:, 0], 0, w - 1)
    v = np.clip(uv[:, 1], 0, h - 1)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = u - x0
    wy = v - y0
    k = len(uv)
    rows = np.repeat(np.arange(k), 4)
    cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1).reshape(-1)
    vals = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1).reshape(-1)
    smat = sp.csr_matrix((vals.astype(fmap.dtype), (rows, cols)), shape=(k, h * w))
    flat = fmap.data.reshape(c, h * w).T
    out = np.asarray(smat @ flat)

    def backward(g):
        return (np.asarray(smat.T @ g).T.reshape(c, h, w),)

    return Tensor._make(out, (fmap,), backward)


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    return concat(0, [reshape(v, (1,)) for v in values])
