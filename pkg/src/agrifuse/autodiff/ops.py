"""Differentiable primitives.

Each function computes a forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent.  All ops accept leading
batch dimensions unless stated otherwise.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from agrifuse.autodiff.tensor import Tensor, as_tensor, check_same_shape, unbroadcast
from agrifuse.errors import ConfigError, ShapeError

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# -- elementwise arithmetic ---------------------------------------------------


def _broadcast_shape(a: Tensor, b: Tensor, what: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: cannot broadcast {a.shape} with {b.shape}") from None


def broadcast_add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add"
    )


def broadcast_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    check_same_shape(a, b, "add")
    return broadcast_add(a, b)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    check_same_shape(a, b, "hadamard")
    return broadcast_mul(a, b)


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return Tensor._from_op(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# -- activations --------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    xd = x.data
    slope = np.where(xd > 0, 1.0, alpha)
    return Tensor._from_op(xd * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return Tensor._from_op(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return Tensor._from_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def elementwise(x: Tensor, kind: str, y: Optional[Tensor] = None, alpha: float = 0.01) -> Tensor:
    """Dispatch by name: sigmoid, tanh, leaky_relu, add, hadamard."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind in ("add", "hadamard"):
        if y is None:
            raise ConfigError(f"elementwise '{kind}' needs a second operand")
        return add(x, y) if kind == "add" else hadamard(x, y)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# -- reductions and shape ops ---------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),), "transpose"
    )


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
        "concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        check_same_shape(tensors[0], t, "stack")
    n = len(tensors)
    return Tensor._from_op(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not agree")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` for ``weight`` shaped (in, out); ``x`` may be a single vector."""
    x = as_tensor(x)
    if x.ndim == 1:
        out = matmul(x.reshape(1, x.shape[0]), weight)
        out = out.reshape(out.shape[1:])
    else:
        out = matmul(x, weight)
    return out if bias is None else out + bias


# -- normalisation and softmax --------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        batch_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=batch_axes)
        g_bias = g.sum(axis=batch_axes)
        gx_hat = g * gd
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return Tensor._from_op(out, (x, gain, bias), backward, "layer_norm")


class BatchNormState:
    """Running statistics for :func:`batch_norm2d` (not differentiated)."""

    def __init__(self, channels: int, momentum: float = BATCH_NORM_MOMENTUM, eps: float = BATCH_NORM_EPS):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        other = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batch_norm2d(
    x: Tensor, state: BatchNormState, gain: Tensor, bias: Tensor, training: bool, eps: Optional[float] = None
) -> Tensor:
    """Per-channel normalisation of ``[C,H,W]`` or ``[B,C,H,W]`` input.

    Training mode normalises with batch statistics and updates the running
    estimates in ``state``; eval mode uses the running estimates.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"batch_norm2d expects [C,H,W] or [B,C,H,W], got {x.shape}")
    c_axis = x.ndim - 3
    channels = x.shape[c_axis]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(f"batch_norm2d: gain {gain.shape} / bias {bias.shape} vs {channels} channels")
    eps = state.eps if eps is None else eps
    axes = tuple(i for i in range(x.ndim) if i != c_axis)
    bshape = [1] * x.ndim
    bshape[c_axis] = channels
    xd = x.data
    gd = gain.data.reshape(bshape)

    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        n = xd.size // channels
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        state.running_var = (1 - m) * state.running_var + m * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std

        def backward(g):
            g_gain = (g * xhat).sum(axis=axes)
            g_bias = g.sum(axis=axes)
            gx_hat = g * gd
            gx = inv_std * (
                gx_hat
                - gx_hat.mean(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
            )
            return gx, g_gain, g_bias

    else:
        mu = state.running_mean.reshape(bshape)
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (xd - mu) * inv_std

        def backward(g):
            return g * gd * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + bias.data.reshape(bshape)
    return Tensor._from_op(out, (x, gain, bias), backward, "batch_norm2d")


# -- convolution ----------------------------------------------------------------


def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C*kh*kw, H*W] patches of the zero-padded input."""
    b, c, h, w = xd.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((b, c, kh, kw, h, w))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = padded[:, :, u : u + h, v : v + w]
    return cols.reshape(b, c * kh * kw, h * w)


def _correlate_same(xd: np.ndarray, wd: np.ndarray, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-padded 'same' cross-correlation. xd [B,Cin,H,W], wd [Cout,Cin,kh,kw]."""
    b, _, h, w = xd.shape
    c_out, _, kh, kw = wd.shape
    if cols is None:
        cols = xd.reshape(b, -1, h * w) if kh == kw == 1 else _im2col(xd, kh, kw)
    return np.matmul(wd.reshape(c_out, -1), cols).reshape(b, c_out, h, w)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """'Same'-padded 2-D cross-correlation (deep-learning convention, kernel not flipped).

    ``x`` is ``[C_in,H,W]`` or ``[B,C_in,H,W]``; ``kernels`` is ``[C_out,C_in,kh,kw]``
    with odd ``kh``, ``kw``.
    """
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be [C_out,C_in,kh,kw], got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: 'same' padding needs odd kernel sizes, got {kh}x{kw}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")

    xd = x.data[None] if unbatched else x.data
    wd = kernels.data
    b, _, h, w = xd.shape
    cols = xd.reshape(b, c_in, h * w) if kh == kw == 1 else _im2col(xd, kh, kw)
    out = _correlate_same(xd, wd, cols)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gb = g[None] if unbatched else g
        g_flat = gb.reshape(b, c_out, h * w)
        g_w = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        grads = [None, g_w]
        if x.requires_grad:
            # input gradient: 'same' correlation with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            g_x = _correlate_same(gb, flipped)
            grads[0] = g_x[0] if unbatched else g_x
        if bias is not None:
            grads.append(g_flat.sum(axis=(0, 2)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._from_op(out[0] if unbatched else out, parents, backward, "conv2d")


# -- stochastic -----------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: identity in eval mode, zero-and-rescale in training mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
