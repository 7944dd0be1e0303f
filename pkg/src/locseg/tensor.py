"""Dense tensors with reverse-mode differentiation.

Everything the two networks compute runs through the ``Tensor`` class in this
module: elementwise arithmetic, reductions, convolution, max pooling,
corner-aligned linear upsampling and normalization, each with an analytic
backward pass.  The module also carries the plain-SGD parameter update and the
polynomial learning-rate decay used by both training phases.

Computation is float32 by default; building a graph from float64 arrays keeps
it float64, which the gradient-check tests rely on.  Tensors are immutable
after construction except for gradient accumulation, so a frozen model can be
shared across threads while a training step stays single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ParamSet",
    "OptimConfig",
    "RunningStats",
    "astensor",
    "concat",
    "conv",
    "pool_max",
    "upsample_linear",
    "normalize",
    "pointwise",
    "relu",
    "sigmoid",
    "backward",
    "sgd_update",
    "lr_at_epoch",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _asarray(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional real array, optionally participating in differentiation.

    ``track=True`` marks a leaf whose gradient is wanted; interior nodes keep
    backward closures automatically whenever any ancestor is tracked.
    Gradients accumulate across ``backward`` calls until cleared (by
    ``zero_grad`` or by the optimizer step).
    """

    __slots__ = ("data", "grad", "track", "_parents", "_backward")

    def __init__(self, data, track: bool = False, _parents=(), _backward=None):
        self.data = _asarray(data)
        self.grad: np.ndarray | None = None
        self.track = bool(track)
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------

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
    def needs_grad(self) -> bool:
        return self.track or self._backward is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, track={self.track})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # -- elementwise arithmetic -----------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b) -> "Tensor":
        other = astensor(other, dtype=self.dtype)
        out_data = fwd(self.data, other.data)
        needs = self.needs_grad or other.needs_grad

        def _bw(g, a=self, b=other):
            if a.needs_grad:
                a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data), a.shape))
            if b.needs_grad:
                b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data), b.shape))

        return Tensor(out_data, _parents=(self, other) if needs else (),
                      _backward=_bw if needs else None)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return astensor(other, dtype=self.dtype) - self

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, lambda a, b: a / b,
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return astensor(other, dtype=self.dtype) / self

    def __neg__(self):
        return self * (-1.0)

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        out = Tensor(self.data ** p, _parents=(self,) if self.needs_grad else ())
        if self.needs_grad:
            def _bw(g, a=self, p=p):
                a._accumulate(g * p * a.data ** (p - 1.0))
            out._backward = _bw
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _parents=(self,) if self.needs_grad else ())
        if self.needs_grad:
            def _bw(g, a=self):
                a._accumulate(g / a.data)
            out._backward = _bw
        return out

    def sqrt(self) -> "Tensor":
        return self ** 0.5

    def clamp(self, lo: float, hi: float) -> "Tensor":
        """Clip values to [lo, hi]; gradient passes only strictly inside."""
        out = Tensor(np.clip(self.data, lo, hi),
                     _parents=(self,) if self.needs_grad else ())
        if self.needs_grad:
            def _bw(g, a=self, lo=lo, hi=hi):
                inside = (a.data > lo) & (a.data < hi)
                a._accumulate(g * inside)
            out._backward = _bw
        return out

    # -- reductions and reshaping ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        out = Tensor(out_data, _parents=(self,) if self.needs_grad else ())
        if self.needs_grad:
            def _bw(g, a=self, axis=axis, keepdims=keepdims):
                if axis is not None and not keepdims:
                    ax = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, ax)
                a._accumulate(np.broadcast_to(g, a.shape))
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[i] for i in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape),
                     _parents=(self,) if self.needs_grad else ())
        if self.needs_grad:
            def _bw(g, a=self):
                a._accumulate(g.reshape(a.shape))
            out._backward = _bw
        return out


def astensor(x, dtype=None) -> Tensor:
    """Wrap arrays/scalars as a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(_asarray(x, dtype=dtype))


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis`` (used for U-Net skip connections)."""
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    needs = any(t.needs_grad for t in tensors)
    out = Tensor(out_data, _parents=tuple(tensors) if needs else ())
    if needs:
        sizes = [t.shape[axis] for t in tensors]
        def _bw(g, parts=tensors, sizes=sizes, axis=axis):
            start = 0
            for t, n in zip(parts, sizes):
                if t.needs_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, start + n)
                    t._accumulate(g[tuple(sl)])
                start += n
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor) -> None:
    if x.ndim < 3 or x.ndim != w.ndim:
        raise ShapeError(
            f"conv expects x (batch, ch, spatial...) and w (out, in, kernel...) of "
            f"equal rank; got x {x.shape} vs w {w.shape}")
    if 0 in x.shape or 0 in w.shape:
        raise ShapeError(f"zero-sized dimension in conv operands: x {x.shape}, w {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {w.shape[1]}")
    kernel = w.shape[2:]
    if any(k % 2 == 0 for k in kernel):
        raise ShapeError(f"conv kernel extents must be odd, got {kernel}")
    if b.shape != (w.shape[0],):
        raise ShapeError(
            f"conv bias must have shape ({w.shape[0]},), got {b.shape}")


def _corr_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlate with stride 1 and zero 'same' padding.

    x: (B, C, *S), w: (O, C, *K) with odd K.  Returns (B, O, *S).
    """
    spatial = x.shape[2:]
    kernel = w.shape[2:]
    rank = len(spatial)
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
    xp = np.pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(
        xp, kernel, axis=tuple(range(2, 2 + rank)))
    # (B, C, *S, *K) -> (B, *S, C, *K) -> matrix
    win = np.moveaxis(win, 1, 1 + rank)
    b = x.shape[0]
    n = int(np.prod(spatial))
    cols = np.ascontiguousarray(win).reshape(b * n, -1)
    out = cols @ w.reshape(w.shape[0], -1).T
    out = out.reshape((b,) + spatial + (w.shape[0],))
    return np.moveaxis(out, -1, 1)


def _conv_grad_w(x: np.ndarray, g: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    """Gradient of _corr_same w.r.t. the kernel."""
    spatial = x.shape[2:]
    rank = len(spatial)
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
    xp = np.pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(
        xp, kernel, axis=tuple(range(2, 2 + rank)))
    win = np.moveaxis(win, 1, 1 + rank)
    b = x.shape[0]
    n = int(np.prod(spatial))
    cols = np.ascontiguousarray(win).reshape(b * n, -1)
    gmat = np.moveaxis(g, 1, -1).reshape(b * n, -1)  # (B*S, O)
    dw = gmat.T @ cols  # (O, C*K)
    return dw.reshape((g.shape[1], x.shape[1]) + kernel)


def conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1, zero-padded 'same' convolution for 2D or 3D feature maps.

    Layouts: ``x`` is (batch, channels, spatial...), ``w`` is
    (out_ch, in_ch, kernel...) with odd kernel extents, ``b`` is (out_ch,).
    Output spatial extents equal input spatial extents.
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    _check_conv_shapes(x, w, b)
    rank = x.ndim - 2
    out_data = _corr_same(x.data, w.data)
    out_data += b.data.reshape((1, -1) + (1,) * rank)
    needs = x.needs_grad or w.needs_grad or b.needs_grad
    out = Tensor(out_data, _parents=(x, w, b) if needs else ())
    if needs:
        kernel = w.shape[2:]

        def _bw(g, x=x, w=w, b=b, kernel=kernel, rank=rank):
            if b.needs_grad:
                b._accumulate(g.sum(axis=(0,) + tuple(range(2, 2 + rank))))
            if w.needs_grad:
                w._accumulate(_conv_grad_w(x.data, g, kernel))
            if x.needs_grad:
                # same-shape correlation with the transposed, spatially
                # flipped kernel gives d/dx exactly for stride-1 same conv
                wt = np.flip(w.data, axis=tuple(range(2, 2 + rank))).swapaxes(0, 1)
                x._accumulate(_corr_same(g, np.ascontiguousarray(wt)))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling and upsampling


def pool_max(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping max pooling by ``factor`` over every spatial axis.

    Gradient routes to the first maximum in row-major window order.
    """
    x = astensor(x)
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    spatial = x.shape[2:]
    if x.ndim < 3:
        raise ShapeError(f"pool_max expects (batch, ch, spatial...), got {x.shape}")
    bad = [n for n in spatial if n % factor != 0]
    if bad:
        raise ShapeError(
            f"spatial extents {spatial} not divisible by pool factor {factor}")
    rank = len(spatial)
    b, c = x.shape[:2]
    blocks = tuple(n // factor for n in spatial)
    split_shape = (b, c) + tuple(v for n in blocks for v in (n, factor))
    # (B, C, n0, f, n1, f, ...) -> (B, C, n0, n1, ..., f, f, ...)
    perm = (0, 1) + tuple(2 + 2 * i for i in range(rank)) + tuple(3 + 2 * i for i in range(rank))
    win = x.data.reshape(split_shape).transpose(perm)
    win = np.ascontiguousarray(win).reshape((b, c) + blocks + (factor ** rank,))
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = Tensor(out_data, _parents=(x,) if x.needs_grad else ())
    if x.needs_grad:
        def _bw(g, x=x, idx=idx, blocks=blocks, factor=factor, rank=rank, perm=perm):
            gwin = np.zeros(idx.shape + (factor ** rank,), dtype=g.dtype)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gwin = gwin.reshape(idx.shape + (factor,) * rank)
            inv = np.argsort(perm)
            gx = gwin.transpose(inv).reshape(x.shape)
            x._accumulate(gx)
        out._backward = _bw
    return out


def _linear_weights(n_in: int, factor: int, dtype) -> np.ndarray:
    """Corner-aligned interpolation matrix (n_in*factor, n_in)."""
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = (1.0 - frac).astype(dtype)
    mat[rows, lo + 1] += frac.astype(dtype)
    return mat


def upsample_linear(x: Tensor, factor: int) -> Tensor:
    """Corner-aligned linear upsampling of every spatial axis by ``factor``.

    Corners map to corners: output sample i sits at input coordinate
    i * (n_in - 1) / (n_out - 1), so constants stay constant and the end
    points reproduce exactly.  Bilinear for 2D maps, trilinear for 3D.
    """
    x = astensor(x)
    factor = int(factor)
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    if x.ndim < 3:
        raise ShapeError(f"upsample expects (batch, ch, spatial...), got {x.shape}")
    rank = x.ndim - 2
    mats = [_linear_weights(x.shape[2 + i], factor, x.dtype) for i in range(rank)]
    out_data = x.data
    for i, mat in enumerate(mats):
        out_data = np.moveaxis(np.tensordot(out_data, mat, axes=([2 + i], [1])), -1, 2 + i)
    out = Tensor(out_data, _parents=(x,) if x.needs_grad else ())
    if x.needs_grad:
        def _bw(g, x=x, mats=mats, rank=rank):
            gx = g
            for i, mat in enumerate(mats):
                gx = np.moveaxis(np.tensordot(gx, mat, axes=([2 + i], [0])), -1, 2 + i)
            x._accumulate(gx)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Exponential moving average of per-channel batch statistics."""

    mean: np.ndarray
    var: np.ndarray
    decay: float = 0.9

    @classmethod
    def identity(cls, channels: int, decay: float = 0.9) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=np.float32),
                   var=np.ones(channels, dtype=np.float32), decay=decay)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        d = self.decay
        self.mean = d * self.mean + (1.0 - d) * batch_mean.astype(self.mean.dtype)
        self.var = d * self.var + (1.0 - d) * batch_var.astype(self.var.dtype)


def normalize(x: Tensor, kind: str, gain: Tensor, bias: Tensor, eps: float = 1e-5,
              running: RunningStats | None = None, training: bool = True) -> Tensor:
    """Batch or layer normalization with a per-channel affine.

    ``batch`` normalizes each channel over (batch, spatial) and, when a
    ``running`` accumulator is supplied, updates it in training mode and uses
    it verbatim in eval mode.  ``layer`` normalizes each sample over
    (channels, spatial) and behaves identically in both modes.
    """
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    if kind not in ("batch", "layer"):
        raise ValueError(f"unknown normalization kind {kind!r}")
    if x.ndim < 3:
        raise ShapeError(f"normalize expects (batch, ch, spatial...), got {x.shape}")
    channels = x.shape[1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(
            f"gain/bias must have shape ({channels},), got {gain.shape} and {bias.shape}")
    spatial_axes = tuple(range(2, x.ndim))
    group_axes = (0,) + spatial_axes if kind == "batch" else (1,) + spatial_axes
    group_size = int(np.prod([x.shape[i] for i in group_axes]))
    if eps <= 0.0:
        if group_size <= 1:
            raise ValueError(
                "normalization over a single-element group requires eps > 0")
        raise ValueError(f"eps must be > 0, got {eps}")

    affine_shape = (1, channels) + (1,) * len(spatial_axes)
    if kind == "batch" and not training:
        if running is None:
            raise ValueError("eval-mode batch normalization requires running statistics")
        mean = running.mean.reshape(affine_shape).astype(x.dtype)
        var = running.var.reshape(affine_shape).astype(x.dtype)
        xhat = (x - mean) * (1.0 / np.sqrt(var + eps))
    else:
        m = x.mean(axis=group_axes, keepdims=True)
        xc = x - m
        v = (xc * xc).mean(axis=group_axes, keepdims=True)
        xhat = xc / ((v + eps) ** 0.5)
        if kind == "batch" and training and running is not None:
            running.update(m.data.reshape(channels), v.data.reshape(channels))
    return gain.reshape(affine_shape) * xhat + bias.reshape(affine_shape)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x: Tensor) -> Tensor:
    x = astensor(x)
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,) if x.needs_grad else ())
    if x.needs_grad:
        def _bw(g, x=x):
            x._accumulate(g * (x.data > 0))
        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = astensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    s[~pos] = ez / (1.0 + ez)
    # keep outputs strictly inside (0, 1) even where exp saturates
    info = np.finfo(d.dtype)
    np.clip(s, info.tiny, 1.0 - info.epsneg, out=s)
    out = Tensor(s, _parents=(x,) if x.needs_grad else ())
    if x.needs_grad:
        def _bw(g, x=x, s=s):
            x._accumulate(g * s * (1.0 - s))
        out._backward = _bw
    return out


def pointwise(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: ``relu`` or ``sigmoid``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate gradients of every tracked tensor reachable from ``loss``.

    ``loss`` must be a scalar.  Repeated calls without clearing grads
    accumulate, which the optimizer step relies on being explicit about.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not node.track and node is not loss:
            node.grad = None  # interior grads are scratch space


# ---------------------------------------------------------------------------
# optimization


class ParamSet:
    """Ordered, uniquely named collection of tracked parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.momentum_buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.track:
            raise ValueError(f"parameter {name!r} must be tracked")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())


@dataclass(frozen=True)
class OptimConfig:
    """SGD settings: initial rate, schedule horizon, decay and momentum."""

    alpha0: float = 1e-3
    epochs: int = 200
    weight_decay: float = 1e-4
    momentum: float = 0.0

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError(f"alpha0 must be > 0, got {self.alpha0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_update(params: ParamSet, cfg: OptimConfig, alpha: float) -> None:
    """One SGD step: w <- w - alpha * (g + weight_decay * w), then clear grads.

    With momentum m > 0 a velocity buffer v <- m * v + g_effective is kept per
    parameter and the step uses v in place of the raw gradient.
    """
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad + cfg.weight_decay * p.data
        if cfg.momentum > 0.0:
            buf = params.momentum_buffers.get(name)
            buf = g if buf is None else cfg.momentum * buf + g
            params.momentum_buffers[name] = buf
            g = buf
        p.data = p.data - alpha * g
        p.grad = None


def lr_at_epoch(alpha0: float, n: int, total: int) -> float:
    """Polynomial decay: alpha0 * (1 - n/total) ** 0.9 for epoch n of total."""
    if n < 0 or n > total:
        raise ValueError(f"epoch {n} outside schedule range [0, {total}]")
    return alpha0 * (1.0 - n / total) ** 0.9
