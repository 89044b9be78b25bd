"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps an ``ndarray`` and
remembers the tensors it was computed from together with a closure that
maps the output gradient to parent gradients.  ``Tensor.backward`` walks
that implicit graph once in reverse topological order and accumulates
``dLoss/dLeaf`` into every leaf that participates in the loss, summing
over all paths when a subexpression is shared.

Only the operations this package needs exist here.  Each one registers
its backward rule at the moment the forward result is produced, so the
graph is never rebuilt or re-walked for the gradient.

Numerical policy: tensors are float32 by default; ``precision`` swaps the
default to float64 for finite-difference verification.  Any non-finite
value produced by a forward operation raises ``NumericError`` naming the
operation and the enclosing scope.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_default_dtype = np.float32
_grad_enabled = True
_nan_checks = True
_scope: list[str] = []


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ContractError("default dtype must be float32 or float64")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_nan_checks(enabled: bool) -> None:
    global _nan_checks
    _nan_checks = bool(enabled)


@contextmanager
def scope(name: str):
    """Label a region of the forward pass for numeric error reports."""
    _scope.append(name)
    try:
        yield
    finally:
        _scope.pop()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _nan_checks or arr.dtype.kind != "f":
        return
    # One fused reduction; a non-finite element always poisons the total.
    total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        where = " in " + "/".join(_scope) if _scope else ""
        raise NumericError(f"non-finite values produced by {op}{where}")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._done = False

    # -- construction used by every op ------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward = None
        out._op = op
        out._done = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
        else:
            out.requires_grad = False
            out._parents = ()
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Own the buffer: closures may hand back views of downstream grads.
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate dSelf/dLeaf into every reachable leaf.

        ``self`` must hold exactly one element.  The walk releases each
        intermediate node's closure, parent links and gradient buffer as soon
        as they are consumed, so forward activations free while the pass is
        still running; leaf gradients persist.  A second call on the same
        result, or on another result sharing part of a consumed graph, is
        refused because the buffers are gone; run a fresh forward pass.
        """
        if self.data.size != 1:
            raise ContractError("backward requires a scalar (one-element) tensor")
        if self._done:
            raise ContractError("backward already ran for this tensor; rebuild the graph")
        if not self.requires_grad:
            raise ContractError("tensor does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        while order:
            node = order.pop()
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()
                node.grad = None
            elif node._op != "leaf":
                raise ContractError(
                    "graph buffers were already consumed by an earlier backward; "
                    "rebuild the graph"
                )
        self._done = True

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _coerce(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_coerce(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, _coerce(other, self.dtype))

    def __truediv__(self, other):
        other = _coerce(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_coerce(other, self.dtype), power(self, -1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor._make(data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accum(unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor._make(data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accum(unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = Tensor._make(a.data ** p, (a,), "power")
    if out.requires_grad:
        def _bw(g):
            a._accum(g * (p * a.data ** (p - 1.0)))
        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor._make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        def _bw(g):
            a._accum(g * out.data)
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor._make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _bw(g):
            a._accum(g / a.data)
        out._backward = _bw
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor._make(np.sqrt(a.data), (a,), "sqrt")
    if out.requires_grad:
        def _bw(g):
            a._accum(g * (0.5 / out.data))
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor._make(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _bw(g):
            a._accum(g * (a.data > 0.0))
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = Tensor._make(data, (a,), "sigmoid")
    if out.requires_grad:
        def _bw(g):
            a._accum(g * (out.data * (1.0 - out.data)))
        out._backward = _bw
    return out


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim if -ndim <= a < ndim else a for a in axis)
    for a in axes:
        if not 0 <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
    return axes


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = Tensor._make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if not keepdims:
                g = np.expand_dims(g, axes) if axes else g
            a._accum(np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = float(np.prod([a.shape[i] for i in axes])) if axes else 1.0
    out = Tensor._make(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        def _bw(g):
            if not keepdims:
                g = np.expand_dims(g, axes) if axes else g
            a._accum(np.broadcast_to(g, a.shape) / count)
        out._backward = _bw
    return out


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the two spatial axes of an (N, C, H, W) tensor."""
    if a.ndim != 4:
        raise DimensionError(f"global_avg_pool expects rank 4, got {a.ndim}")
    return tensor_mean(a, axis=(2, 3), keepdims=True)


# -- shape manipulation --------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor._make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw(g):
            a._accum(g.reshape(a.shape))
        out._backward = _bw
    return out


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = Tensor._make(a.data.transpose(axes), (a,), "transpose")
    if out.requires_grad:
        def _bw(g):
            a._accum(g.transpose(inverse))
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(
                    f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._make(data, tensors, "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(g[tuple(sl)])
        out._backward = _bw
    return out


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(f"narrow: [{start}, {start + length}) exceeds extent {a.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor._make(np.ascontiguousarray(a.data[sl]), (a,), "narrow")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            full[sl] = g
            a._accum(full)
        out._backward = _bw
    return out


def stop_gradient(a: Tensor) -> Tensor:
    """Cut the graph: same values, no path for gradients."""
    return Tensor(a.data)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul supports rank 2 or 3, got {a.ndim} and {b.ndim}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes {a.shape[0]} and {b.shape[0]} differ")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    out = Tensor._make(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


# -- softmax family --------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if len(axes) != 1:
        raise DimensionError("softmax normalizes over exactly one axis")
    ax = axes[0]
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True)
    out = Tensor._make(data, (a,), "softmax")
    if out.requires_grad:
        def _bw(g):
            y = out.data
            a._accum(y * (g - (g * y).sum(axis=ax, keepdims=True)))
        out._backward = _bw
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if len(axes) != 1:
        raise DimensionError("log_softmax normalizes over exactly one axis")
    ax = axes[0]
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = Tensor._make(data, (a,), "log_softmax")
    if out.requires_grad:
        def _bw(g):
            soft = np.exp(out.data)
            a._accum(g - soft * g.sum(axis=ax, keepdims=True))
        out._backward = _bw
    return out


# -- spatial operations ------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (N, C, H, W) with (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects rank 4 input and kernel, got {x.ndim} and {weight.ndim}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if ck != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(o, c * kh * kw)
    data = np.matmul(w2, cols).reshape(n, o, oh, ow)
    out = Tensor._make(data, (x, weight), "conv2d")
    if out.requires_grad:
        def _bw(g):
            g2 = g.reshape(n, o, oh * ow)
            if weight.requires_grad:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
                weight._accum(gw.reshape(weight.shape))
            if x.requires_grad:
                gcols = np.matmul(w2.T, g2)
                x._accum(_col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow))
        out._backward = _bw
    return out


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects rank 4, got {x.ndim}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"maxpool2d: spatial extents {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    windows = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, oh, ow, size * size)
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = Tensor._make(data, (x,), "maxpool2d")
    if out.requires_grad:
        def _bw(g):
            gw = np.zeros((n, c, oh, ow, size * size), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            gw = gw.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
            x._accum(gw.reshape(n, c, h, w))
        out._backward = _bw
    return out


def _interp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    # Half-pixel-centre sampling (align_corners off); edge samples clamp.
    mat = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        t = src - i0
        mat[o, i0] += 1.0 - t
        mat[o, i1] += t
    return mat


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear resize of (N, C, H, W) by an integer factor."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects rank 4, got {x.ndim}")
    scale = int(scale)
    if scale < 1:
        raise ContractError(f"upsample_bilinear: scale must be >= 1, got {scale}")
    if scale == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    ah = _interp_matrix(h * scale, h, x.dtype)
    aw = _interp_matrix(w * scale, w, x.dtype)
    data = np.matmul(np.matmul(ah, x.data), aw.T)
    out = Tensor._make(data, (x,), "upsample_bilinear")
    if out.requires_grad:
        def _bw(g):
            x._accum(np.matmul(np.matmul(ah.T, g), aw))
        out._backward = _bw
    return out


# -- finite-difference verification --------------------------------------------------


def gradcheck(build_loss: Callable[[], Tensor], wrt: Iterable[Tensor], *,
              eps: float = 1e-4, rtol: float = 1e-4, atol: float = 1e-7,
              max_probes: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must run a fresh forward pass over the same parameter
    tensors each time it is called and return a scalar.  Every element of
    every tensor in ``wrt`` is probed unless ``max_probes`` caps the count,
    in which case coordinates are sampled without replacement.  Returns the
    worst relative error seen; raises ``AssertionError`` on mismatch so the
    failure message lands in test output.
    """
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    loss = build_loss()
    loss.backward()
    analytic = []
    for t in wrt:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(np.array(t.grad, copy=True))

    coords = [(ti, fi) for ti, t in enumerate(wrt) for fi in range(t.data.size)]
    if max_probes is not None and len(coords) > max_probes:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_probes, replace=False)
        coords = [coords[int(k)] for k in pick]

    worst = 0.0
    for ti, fi in coords:
        t = wrt[ti]
        orig = t.data.flat[fi]
        t.data.flat[fi] = orig + eps
        hi = float(build_loss().data)
        t.data.flat[fi] = orig - eps
        lo = float(build_loss().data)
        t.data.flat[fi] = orig
        numeric = (hi - lo) / (2.0 * eps)
        ana = float(analytic[ti].flat[fi])
        err = abs(ana - numeric)
        denom = max(abs(ana), abs(numeric))
        rel = err / denom if denom > 0 else 0.0
        if err > atol + rtol * denom:
            raise AssertionError(
                f"gradient mismatch at tensor {ti} flat index {fi}: "
                f"analytic {ana:.10g}, numeric {numeric:.10g}, rel {rel:.3g}")
        if denom > atol:
            worst = max(worst, rel)
    return worst
