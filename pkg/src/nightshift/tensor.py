"""Rank-4 tensors with reverse-mode automatic differentiation.

numpy supplies storage and the inner kernels (BLAS matmul for convolution);
this module adds the graph. Every tensor is (batch, channels, height, width),
float32 by default, and ops never mutate their inputs. backward() walks the
recorded graph once in reverse topological order, accumulates gradients
additively in a fixed order, then releases the graph; a second backward on
the same root raises TapeError.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

EPS = 1e-8

_default_dtype = np.dtype(np.float32)


class DimensionError(ValueError):
    """Shape or rank violation, reported with the offending extents."""


class TapeError(RuntimeError):
    """Graph misuse: backward on a consumed tape, or a non-scalar root."""


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the element type new tensors are created with.

    Training runs in float32; gradient-oracle tests run the same op code in
    float64 so the finite-difference reference is not drowned in rounding.
    """
    global _default_dtype
    saved = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = saved


class Tensor:
    """A rank-4 array plus the edges needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim != 4:
            raise DimensionError(
                f"tensors are rank-4 (batch, channels, height, width); got shape {arr.shape}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph edges, no gradient."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)

    # Operator sugar; the module-level functions are the actual op set.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op result into the graph.

    backward_fn maps the output gradient to one gradient (or None) per parent.
    The closure is only kept when some parent needs it, so stop-gradient paths
    cost no memory. Extension point for ops defined outside this module.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Reverse-mode sweep from a scalar root.

    Accumulates ∂loss/∂t into t.grad for every requires_grad tensor reached,
    in one fixed topological order, then frees the graph.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar root, shape is {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed; backward was called twice on this root")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    if seed is None:
        seed = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.data.dtype)}

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.full((1, 1, 1, 1), value, dtype=like.data.dtype)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the gradient back over axes the forward broadcast along."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    for i, (x, y) in enumerate(zip(a.shape, b.shape)):
        if x != y and x != 1 and y != 1:
            raise DimensionError(
                f"axis {i}: extents {x} and {y} are incompatible "
                f"(shapes {a.shape} and {b.shape})"
            )


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_broadcast(a, b)
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return from_op(data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_broadcast(a, b)
    data = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return from_op(data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_broadcast(a, b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return from_op(data, (a, b), back)


def div(a: Tensor, b, eps: float = EPS) -> Tensor:
    """a / (b + eps). Callers whose denominator is already stabilized pass eps=0."""
    b = _coerce(b, a)
    _check_broadcast(a, b)
    den = b.data + a.data.dtype.type(eps)
    data = a.data / den
    ad = a.data

    def back(g):
        ga = g / den
        gb = -g * ad / (den * den)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return from_op(data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    data = a.data * c

    def back(g):
        return (g * c,)

    return from_op(data, (a,), back)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    gate = a.data > 0

    def back(g):
        return (g * gate,)

    return from_op(data, (a,), back)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    alpha = a.data.dtype.type(alpha)
    data = np.where(a.data > 0, a.data, a.data * alpha)
    pos = a.data > 0

    def back(g):
        return (np.where(pos, g, g * alpha),)

    return from_op(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        return (g * (1 - data * data),)

    return from_op(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def back(g):
        return (g * data * (1 - data),)

    return from_op(data, (a,), back)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def back(g):
        return (g * data,)

    return from_op(data, (a,), back)


def log(a: Tensor, eps: float = EPS) -> Tensor:
    arg = a.data + a.data.dtype.type(eps)
    data = np.log(arg)

    def back(g):
        return (g / arg,)

    return from_op(data, (a,), back)


def sqrt(a: Tensor, eps: float = EPS) -> Tensor:
    """Exact forward (sqrt(0) = 0); the singular derivative is what gets the guard."""
    data = np.sqrt(np.maximum(a.data, 0))
    guarded = np.sqrt(a.data.clip(min=0) + a.data.dtype.type(eps))

    def back(g):
        return (g * 0.5 / guarded,)

    return from_op(data, (a,), back)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def back(g):
        return (g * sign,)

    return from_op(data, (a,), back)


# ---------------------------------------------------------------------------
# reductions (float64 accumulators, output cast back; order fixed)


def _reduce_mean(a: Tensor, axes: tuple[int, ...], count: int) -> Tensor:
    data = a.data.mean(axis=axes, keepdims=True, dtype=np.float64).astype(a.data.dtype)
    inv = a.data.dtype.type(1.0 / count)
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g * inv, shape).copy(),)

    return from_op(data, (a,), back)


def mean(a: Tensor) -> Tensor:
    return _reduce_mean(a, (0, 1, 2, 3), a.data.size)


def total(a: Tensor) -> Tensor:
    """Sum over all elements to a (1,1,1,1) scalar."""
    data = a.data.sum(dtype=np.float64).reshape(1, 1, 1, 1).astype(a.data.dtype)
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return from_op(data, (a,), back)


def channel_mean(a: Tensor) -> Tensor:
    return _reduce_mean(a, (1,), a.shape[1])


def spatial_mean(a: Tensor) -> Tensor:
    return _reduce_mean(a, (2, 3), a.shape[2] * a.shape[3])


# ---------------------------------------------------------------------------
# structure


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat needs matching batch/spatial extents, got {a.shape} and {b.shape}")
    data = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def back(g):
        return g[:, :ca], g[:, ca:]

    return from_op(data, (a, b), back)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {a.shape}")
    data = a.data[:, start:stop].copy()
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return from_op(data, (a,), back)


def gather_locations(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick spatial locations by flat row-major index.

    index has shape (B, K); output is (B, C, 1, K). Backward scatter-adds,
    so repeated indices accumulate.
    """
    b, c, h, w = a.shape
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != b:
        raise DimensionError(f"index must be (batch, K); got {index.shape} for input {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= h * w):
        raise DimensionError(f"flat index out of range [0, {h * w}) for input {a.shape}")
    flat = a.data.reshape(b, c, h * w)
    data = np.stack([flat[i][:, index[i]] for i in range(b)], axis=0).reshape(b, c, 1, -1)

    def back(g):
        gk = g.reshape(b, c, -1)
        out = np.zeros((b, c, h * w), dtype=g.dtype)
        for i in range(b):
            np.add.at(out[i], (slice(None), index[i]), gk[i])
        return (out.reshape(b, c, h, w),)

    return from_op(data, (a,), back)


def resample(a: Tensor, mode: str) -> Tensor:
    """Nearest-neighbour 2x resampling; up2 then down2 is the identity."""
    if mode == "up2":
        data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

        def back(g):
            b, c, h2, w2 = g.shape
            folded = g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5), dtype=np.float64)
            return (folded.astype(g.dtype),)

        return from_op(data, (a,), back)
    if mode == "down2":
        if a.shape[2] % 2 or a.shape[3] % 2:
            raise DimensionError(f"down2 needs even spatial extents, got {a.shape}")
        data = a.data[:, :, ::2, ::2].copy()
        shape = a.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[:, :, ::2, ::2] = g
            return (full,)

        return from_op(data, (a,), back)
    raise ValueError(f"unknown resample mode {mode!r}; expected 'up2' or 'down2'")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, the usual deep-learning convention.

    x (B, C, H, W) with weight (O, C, kh, kw) -> (B, O, OH, OW). Forward and
    both backward passes are im2col matmuls plus one deterministic scatter.
    """
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"axis 1 (channels): input has {c}, weight expects {cw}")
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise DimensionError(f"bias must be (1, {o}, 1, 1); got {bias.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"stride must be >= 1 and padding >= 0; got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(cols, wmat.T)  # (B, OH*OW, O)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b, o, oh, ow)
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.reshape(b, o, oh * ow)
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(gm, cols, axes=([0, 2], [0, 1])).reshape(o, c, kh, kw)
        gx = None
        if x.requires_grad:
            colsg = np.matmul(gm.transpose(0, 2, 1), wmat)  # (B, OH*OW, C*kh*kw)
            colsg = colsg.reshape(b, oh, ow, c, kh, kw)
            gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + stride * (oh - 1) + 1 : stride, v : v + stride * (ow - 1) + 1 : stride] += (
                        colsg[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).reshape(1, o, 1, 1).astype(g.dtype)
        return gx, gw, gb

    return from_op(out, parents, back)
