"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new :class:`Tensor`; backward rules are closures over what the forward pass
saved. Layouts follow NCHW; conv weights are ``(out, in, k, k)`` and
transposed-conv weights ``(in, out, k, k)``.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, emit

DEFAULT_LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return emit("add", a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return emit("sub", a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return emit("mul", ad * bd, (a, b), back)


def reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    return emit("reciprocal", y, (x,), lambda g: (-g * y * y,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return emit("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return emit("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    return emit("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return emit("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return emit("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,),
                lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    xd = x.data
    scale = np.where(xd > 0, 1.0, slope).astype(xd.dtype)
    return emit("leaky_relu", xd * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = 0.5 * (1.0 + np.tanh(0.5 * xd))
    # keep the open-interval guarantee once tanh saturates
    eps = np.finfo(xd.dtype).eps
    y = np.clip(y, eps, 1.0 - eps).astype(xd.dtype)
    return emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x: Tensor, kind: str, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ reductions

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _axes(axis, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return emit("sum", np.sum(x.data, axis=axes), (x,),
                lambda g: (np.broadcast_to(np.reshape(g, kept), shape),))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return emit("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return emit("matmul", ad @ bd, (a, b),
                lambda g: (g @ bd.T if a.requires_grad else None,
                           ad.T @ g if b.requires_grad else None))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"fully_connected: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    return emit("fully_connected", xd @ wd + bias.data, (x, weight, bias),
                lambda g: (g @ wd.T if x.requires_grad else None,
                           xd.T @ g if weight.requires_grad else None,
                           g.sum(axis=0)))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    return emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                lambda g: (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)),))


# ---------------------------------------------------------------- convolution

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a ``(C*k*k, N*ho*wo)`` matrix, so a conv is one GEMM."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into ``shape`` (NCHW)."""
    n, c, hp, wp = shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _to_cm(a: np.ndarray) -> np.ndarray:
    """NCHW -> ``(C, N*H*W)``."""
    n, c = a.shape[:2]
    return a.transpose(1, 0, 2, 3).reshape(c, -1)


def _from_cm(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """``(C, N*H*W)`` -> contiguous NCHW."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _check_conv(x, weight, bias, stride, padding, in_axis):
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv expects 4-d input and weight, got {x.shape}, {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or k < 1:
        raise DimensionError(f"square kernels only, got {weight.shape}")
    if weight.shape[in_axis] != x.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels, weight expects {weight.shape[in_axis]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    out_ch = weight.shape[1 - in_axis]
    if bias is not None and bias.shape != (out_ch,):
        raise DimensionError(f"bias shape {bias.shape} does not match {out_ch} output channels")
    return k


def _pad(a: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Discrete cross-correlation, weight ``(F, C, k, k)``."""
    k = _check_conv(x, weight, bias, stride, padding, in_axis=1)
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{w}+{padding}")
    f = weight.shape[0]
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(f, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_cm(out, n, ho, wo)
    xp_shape = xp.shape

    def back(g):
        gm = _to_cm(g)
        gx = None
        if x.requires_grad:
            gxp = _col2im(wm.T @ gm, xp_shape, k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("conv2d", out, inputs, back)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its input, weight ``(C_in, C_out, k, k)``.

    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``;
    ``output_padding`` (< stride) picks which conv2d input size to invert.
    """
    k = _check_conv(x, weight, bias, stride, padding, in_axis=0)
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding must be in [0, stride), got {output_padding}")
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    hout = (h - 1) * stride - 2 * padding + k + output_padding
    wout = (w - 1) * stride - 2 * padding + k + output_padding
    if hout < 1 or wout < 1:
        raise DimensionError(f"transposed conv output would be {hout}x{wout}")
    padded = (n, cout, hout + 2 * padding, wout + 2 * padding)
    wm = weight.data.reshape(cin, -1)
    xm = _to_cm(x.data)
    full = _col2im(wm.T @ xm, padded, k, stride, h, w)
    out = full[:, :, padding:padding + hout, padding:padding + wout]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def back(g):
        cols = _im2col(_pad(g, padding), k, stride, h, w)
        gx = _from_cm(wm @ cols, n, h, w) if x.requires_grad else None
        gw = (xm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("conv2d_transpose", out, inputs, back)


# -------------------------------------------------------------- normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray | None = None,
                running_var: np.ndarray | None = None,
                training: bool = True, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics (if given) are updated in place
    with an exponential moving average; the unbiased batch variance feeds
    the running estimate.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data
    if training:
        if m < 2:
            raise ValueError("batchnorm2d needs at least 2 values per channel in train mode")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return emit("batchnorm2d", out.astype(xd.dtype), (x, gamma, beta), back)
