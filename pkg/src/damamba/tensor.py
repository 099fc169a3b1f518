"""Dense tensors with reverse-mode automatic differentiation.

Storage is a contiguous row-major numpy buffer. Every differentiable op
records its parents and a backward closure on the result; ``backward``
replays the recorded ops in reverse creation order. Leading batch axes are
allowed on most ops, but broadcasting is limited to three cases: equal
shapes, a 0-d scalar operand, or a 1-d operand matching the last axis
(bias / gain).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from damamba.errors import DimensionError, NonFiniteError, UsageError

_seq = itertools.count()
_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject NaN/Inf at every op boundary inside the block."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


def set_checked(enabled: bool) -> None:
    global _checked
    _checked = enabled


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An N-dimensional value grid that can take part in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), copy=True)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)
        self.name = name
        if _checked:
            _check_finite(self.data, "Tensor()")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        data = np.asarray(data)
        t.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        t.grad = None
        t.requires_grad = requires_grad
        t._parents = ()
        t._backward = None
        t._seq = next(_seq)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    if isinstance(data, Tensor):
        return data.dtype
    return np.float64


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor._wrap(arr)


def parameter(data, name: str | None = None) -> Tensor:
    t = Tensor(data, requires_grad=True, name=name)
    return t


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, where: str) -> Tensor:
    if _checked:
        _check_finite(data, where)
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# -- broadcasting (restricted) ------------------------------------------------


def _bcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# -- elementwise binary --------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _bcast_kind(a, b, "add")

    def bw(g):
        _accum(a, _reduce(g, a.shape))
        _accum(b, _reduce(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _bcast_kind(a, b, "sub")

    def bw(g):
        _accum(a, _reduce(g, a.shape))
        _accum(b, _reduce(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _bcast_kind(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _bcast_kind(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), bw, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g)

    return _result(a.data + c, (a,), bw, "add_scalar")


# -- elementwise unary ---------------------------------------------------------


def _unary(a: Tensor, out: np.ndarray, dfn, where: str) -> Tensor:
    def bw(g):
        _accum(a, g * dfn())

    return _result(out, (a,), bw, where)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _unary(a, out, lambda: out, "exp")


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _unary(a, out, lambda: 0.5 / out, "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    return _unary(a, a.data**p, lambda: p * a.data ** (p - 1), "power")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _unary(a, out, lambda: 1.0 - out * out, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return _unary(a, out, lambda: out * (1.0 - out), "sigmoid")


def relu(a: Tensor) -> Tensor:
    return _unary(a, np.maximum(a.data, 0), lambda: (a.data > 0).astype(a.dtype), "relu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.dtype)
    return _unary(a, out, lambda: _np_sigmoid(a.data), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def deriv():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner

    return _unary(a, out, deriv, "gelu")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions and shape ops -----------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(out, (a,), bw, "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), bw, "permute")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if _is_fancy(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            _accum(a, full)

    return _result(np.array(out), (a,), bw, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-d (shared across ``a``'s leading axes) or carry the same
    leading axes as ``a``.
    """
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), bw, "matmul")


def linear(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-frame affine map ``x @ W + bias`` over the last axis."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    y = matmul(x, W)
    if bias is not None:
        if bias.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {W.shape}")
        y = add(y, bias)
    return y


# -- normalizers ----------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (x,), bw, "softmax_rows")


def logsumexp_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]

    def bw(g):
        _accum(x, g[..., None] * (e / s))

    return _result(out, (x,), bw, "logsumexp_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(
                x,
                rstd
                * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)),
            )

    return _result(out, (x, gain, bias), bw, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    nrm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = x.data / nrm

    def bw(g):
        _accum(x, (g - out * (g * out).sum(axis=-1, keepdims=True)) / nrm)

    return _result(out, (x,), bw, "l2_normalize")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (eval mode) or p == 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bw(g):
        _accum(x, g * keep)

    return _result(x.data * keep, (x,), bw, "dropout")


# -- backward ---------------------------------------------------------------------


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate gradients from ``root`` to every reachable leaf.

    Recorded ops run in reverse creation order, so a tensor consumed by two
    ops receives the sum of both contributions before its own rule fires.
    The tape is released afterwards; calling twice is a usage error.
    """
    if grad is None:
        if root.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        raise UsageError("backward() root is not on the tape")
    if root._backward is _consumed:
        _consumed(None)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    order.sort(key=lambda t: t._seq, reverse=True)

    # interior nodes buffer their incoming gradient in .grad, then release it
    root.grad = np.array(grad, dtype=root.data.dtype)
    for t in order:
        if t._backward is None:
            continue
        g = t.grad
        if g is None:
            continue
        t._backward(g)
        t._backward = _consumed
        t._parents = ()
        if t is not root:
            t.grad = None


def _consumed(_g):
    raise UsageError("tape already consumed; recompute the forward pass")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient oracle -------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-6
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be smooth near ``x``
    (no kinks within ``h``). Denominator is ``max(|g|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    num = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = num.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor._wrap(x0.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor._wrap(x0.copy())).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.abs(g), 1e-8)
    return float(np.max(np.abs(g - num) / denom)) if g.size else 0.0
