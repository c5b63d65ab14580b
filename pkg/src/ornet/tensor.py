"""Dense float64 tensors with a recorded tape for reverse-mode gradients.

Only the operations OR-Net needs are provided. Feature maps use NCHW layout.
Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result records a closure that maps the output gradient to
input gradients. :meth:`Tensor.backward` walks the tape in reverse
topological order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
import functools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def backward(self) -> None:
        backward(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` and record ``grad_fn`` when any parent tracks gradients."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _check_finite(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op}: input contains NaN or Inf")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The tape below ``loss`` is released afterwards, so a graph can be
    differentiated once. Leaf gradients accumulate across calls until
    cleared with :meth:`Tensor.zero_grad`.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tracked tensor")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
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
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _align(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Return broadcast-compatible arrays; a 1-D (C,) operand maps onto NCHW channels."""
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 4 and ad.size > 1:
        if ad.shape[0] != bd.shape[1]:
            raise DimensionError(f"channel operand {a.shape} does not match {b.shape}")
        ad = ad.reshape(1, -1, 1, 1)
    elif bd.ndim == 1 and ad.ndim == 4 and bd.size > 1:
        if bd.shape[0] != ad.shape[1]:
            raise DimensionError(f"channel operand {b.shape} does not match {a.shape}")
        bd = bd.reshape(1, -1, 1, 1)
    try:
        np.broadcast_shapes(ad.shape, bd.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None
    return ad, bd


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 1 and shape[0] > 1 and grad.ndim == 4:
        return grad.sum(axis=(0, 2, 3))
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _align(a, b)
    return _make(ad + bd, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _align(a, b)
    return _make(ad - bd, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _align(a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), grad_fn)


_KINK_LOG: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the on/off pattern of every relu and abs evaluated inside the block.

    Finite-difference checks use it to tell when a stencil straddles a kink.
    """
    global _KINK_LOG
    previous, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = previous


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(mask))
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(s > 0))
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch ``add``/``sub``/``mul``/``relu``/``sigmoid``/``abs`` by name."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# reductions and channel ops
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_channels: no inputs")
    for p in parts:
        _require_4d(p, "concat_channels")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels: {p.shape} does not match {ref} outside channels")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=1)

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(data, parts, grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}:{stop}] out of range for {x.shape[1]} channels")
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool: empty spatial dims")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def softmax_channels(x: Tensor) -> Tensor:
    _require_4d(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class Conv2dParams:
    """Weights of a square convolution; ``padding`` defaults to ``k // 2``."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise DimensionError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"conv bias must be ({self.weight.shape[0]},), got {self.bias.shape}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.kernel_size % 2 == 0 and self.padding is None:
            raise ValueError("stride-1 convolution needs an odd kernel for same padding")
        if self.padding is None:
            self.padding = self.kernel_size // 2
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold NCHW ``x`` into (N, C*k*k, Ho*Wo) patch columns."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return x.reshape(n, c, h * w), ho, wo
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int,
           ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an NCHW array."""
    n, c, h, w = shape
    if k == 1 and stride == 1 and padding == 0:
        return cols.reshape(shape)
    blocks = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += blocks[:, :, di, dj]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d_raw(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Untracked correlation of NCHW ``x`` with (O, C, k, k) ``weight``; no bias."""
    o, c, k, _ = weight.shape
    cols, ho, wo = im2col(x, k, stride, padding)
    out = np.matmul(weight.reshape(o, c * k * k), cols)
    return out.reshape(x.shape[0], o, ho, wo)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D cross-correlation with bias (PyTorch ``Conv2d`` semantics)."""
    _require_4d(x, "conv2d")
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {p.in_channels}")
    k, s, pad = p.kernel_size, p.stride, p.padding
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise DimensionError(f"conv2d: spatial dims {x.shape[2:]} smaller than kernel {k}")
    _check_finite(x, "conv2d")
    w = p.weight.data
    o = w.shape[0]
    cols, ho, wo = im2col(x.data, k, s, pad)
    w2 = w.reshape(o, -1)
    out = np.matmul(w2, cols)
    out += p.bias.data.reshape(1, o, 1)
    n = x.shape[0]
    xdata = x.data

    def grad_fn(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gx = col2im(np.matmul(w2.T, g2), xdata.shape, k, s, pad, ho, wo)
        if p.weight.requires_grad:
            # columns are recomputed rather than kept alive on the tape
            c = im2col(xdata, k, s, pad)[0]
            gw = np.matmul(g2, c.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if p.bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    del cols
    return _make(out.reshape(n, o, ho, wo), (x, p.weight, p.bias), grad_fn)


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """(factor*n_in, n_in) interpolation matrix, half-pixel centers, edge clamp."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for dst in range(n_out):
        src = (dst + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[dst, i0] += 1.0 - t
        m[dst, i1] += t
    m.setflags(write=False)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    _require_4d(x, "bilinear_upsample")
    if int(factor) != factor or factor < 2:
        raise ValueError(f"bilinear_upsample: factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    uh = bilinear_matrix(x.shape[2], factor)
    uw = bilinear_matrix(x.shape[3], factor)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def kaiming_conv(rng: np.random.Generator, in_channels: int, out_channels: int, k: int,
                 stride: int = 1) -> Conv2dParams:
    """Conv parameters with He fan-in normal weights and zero bias."""
    std = np.sqrt(2.0 / (in_channels * k * k))
    weight = Tensor(rng.normal(0.0, std, size=(out_channels, in_channels, k, k)), requires_grad=True)
    bias = Tensor(np.zeros(out_channels), requires_grad=True)
    return Conv2dParams(weight, bias, stride=stride)
