"""Differentiable image ops built on the autodiff core.

Convolution is expressed as im2col followed by a 2-D matmul, and the
kernel-2 stride-2 transposed convolution as a pointwise matmul followed by
a 2x2 depth-to-space shuffle.  The structural primitives come in mutually
adjoint pairs (im2col/col2im, depth_to_space2/space_to_depth2, pooling
gather/scatter), each serving as the other's VJP, so second-order
gradients work through all of them.

Shape convention: images are (N, C, H, W).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import core
from .core import ShapeError, Tensor, _as_tensor, _op

__all__ = [
    "im2col",
    "col2im",
    "depth_to_space2",
    "space_to_depth2",
    "conv2d",
    "conv_transpose2d",
    "maxpool2",
    "batchnorm2d",
    "concat_channels",
    "relu",
    "activation",
]


def _require_rank4(a: Tensor, op: str) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"{op} expects (N, C, H, W), got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# patch extraction


def im2col(a, kernel: int, padding: int) -> Tensor:
    """Extract stride-1 kxk patches into a (N*Ho*Wo, C*k*k) matrix.

    Column order within a row is channel-major then kernel-row then
    kernel-column, matching a naive loop ``for c: for ky: for kx``.
    """
    a = _require_rank4(_as_tensor(a), "im2col")
    n, c, h, w = a.shape
    k, p = int(kernel), int(padding)
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if k < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"im2col kernel {k} pad {p} does not fit input H={h}, W={w}")
    xp = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    shape = (n, c, h, w)
    return _op("im2col", out, (a,), (lambda g: col2im(g, shape, k, p),))


def col2im(cols, image_shape: tuple, kernel: int, padding: int) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    cols = _as_tensor(cols)
    n, c, h, w = (int(s) for s in image_shape)
    k, p = int(kernel), int(padding)
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if cols.shape != (n * ho * wo, c * k * k):
        raise ShapeError(
            f"col2im expects shape {(n * ho * wo, c * k * k)} for image {image_shape}, got {cols.shape}"
        )
    g6 = cols.data.reshape(n, ho, wo, c, k, k)
    acc = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            acc[:, :, ky : ky + ho, kx : kx + wo] += g6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    out = acc[:, :, p : p + h, p : p + w] if p else acc
    return _op("col2im", np.ascontiguousarray(out), (cols,), (lambda g: im2col(g, k, p),))


# ---------------------------------------------------------------------------
# 2x2 cell shuffles (the spatial halves of the stride-2 transposed conv)


def depth_to_space2(a) -> Tensor:
    """(N, 4F, H, W) -> (N, F, 2H, 2W); channel f*4 + i*2 + j lands at (2h+i, 2w+j)."""
    a = _require_rank4(_as_tensor(a), "depth_to_space2")
    n, c4, h, w = a.shape
    if c4 % 4:
        raise ShapeError(f"depth_to_space2 needs channels divisible by 4, got {c4}")
    f = c4 // 4
    out = (
        a.data.reshape(n, f, 2, 2, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, f, 2 * h, 2 * w)
    )
    return _op("depth_to_space2", np.ascontiguousarray(out), (a,), (lambda g: space_to_depth2(g),))


def space_to_depth2(a) -> Tensor:
    """(N, F, 2H, 2W) -> (N, 4F, H, W); exact inverse of :func:`depth_to_space2`."""
    a = _require_rank4(_as_tensor(a), "space_to_depth2")
    n, f, h2, w2 = a.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"space_to_depth2 needs even spatial dims, got H={h2}, W={w2}")
    h, w = h2 // 2, w2 // 2
    out = (
        a.data.reshape(n, f, h, 2, w, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, 4 * f, h, w)
    )
    return _op("space_to_depth2", np.ascontiguousarray(out), (a,), (lambda g: depth_to_space2(g),))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 same-size convolution (cross-correlation), kernel 3 or 1.

    `weight` is (F, C, k, k); zero padding is k//2 so spatial dims are
    preserved.  In float64 the reduction order matches a naive six-loop
    implementation exactly.
    """
    x = _require_rank4(_as_tensor(x), "conv2d")
    weight = _as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (F, C, k, k), got {weight.shape}")
    f, c, k, _ = weight.shape
    if k not in (1, 3):
        raise ShapeError(f"conv2d supports kernel 1 or 3, got {k}")
    if c != x.shape[1]:
        raise ShapeError(f"conv2d weight expects {c} input channels, image has {x.shape[1]}")
    n, _, h, w = x.shape
    cols = im2col(x, k, k // 2)  # (N*H*W, C*k*k)
    wmat = core.transpose(core.reshape(weight, (f, c * k * k)), (1, 0))
    y = core.matmul(cols, wmat)  # (N*H*W, F)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d bias must be ({f},), got {bias.shape}")
        y = core.add(y, core.reshape(bias, (1, f)))
    return core.transpose(core.reshape(y, (n, h, w, f)), (0, 3, 1, 2))


def conv_transpose2d(x, weight, bias=None) -> Tensor:
    """Kernel-2 stride-2 transposed convolution: doubles H and W.

    `weight` is (C, F, 2, 2); output pixel (2h+i, 2w+j) of channel f is
    sum_c x[c, h, w] * weight[c, f, i, j] plus bias.  Windows do not
    overlap, so this is a pointwise matmul followed by a cell shuffle.
    """
    x = _require_rank4(_as_tensor(x), "conv_transpose2d")
    weight = _as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d weight must be (C, F, 2, 2), got {weight.shape}")
    c, f = weight.shape[0], weight.shape[1]
    if c != x.shape[1]:
        raise ShapeError(f"conv_transpose2d weight expects {c} input channels, image has {x.shape[1]}")
    n, _, h, w = x.shape
    xm = core.reshape(core.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    wm = core.reshape(weight, (c, f * 4))
    y = core.matmul(xm, wm)  # (N*H*W, 4F)
    y = core.transpose(core.reshape(y, (n, h, w, f * 4)), (0, 3, 1, 2))
    y = depth_to_space2(y)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv_transpose2d bias must be ({f},), got {bias.shape}")
        y = core.add(y, core.reshape(bias, (1, f, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# pooling


def _pool_gather(a: Tensor, idx: np.ndarray) -> Tensor:
    n, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    win = a.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    hw = (h, w)
    return _op("pool_gather", np.ascontiguousarray(out), (a,), (lambda g: _pool_scatter(g, idx, hw),))


def _pool_scatter(g: Tensor, idx: np.ndarray, hw: tuple) -> Tensor:
    g = _as_tensor(g)
    h, w = hw
    n, c, h2, w2 = g.shape
    buf = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(buf, idx[..., None], g.data[..., None], axis=-1)
    out = buf.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return _op("pool_scatter", np.ascontiguousarray(out), (g,), (lambda gg: _pool_gather(gg, idx),))


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2.  Ties resolve to the first maximum in
    row-major window order; the gradient routes only to that element."""
    x = _require_rank4(_as_tensor(x), "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got H={h}, W={w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max wins ties
    return _pool_gather(x, idx)


# ---------------------------------------------------------------------------
# normalization and activations


def batchnorm2d(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization using current-batch statistics.

    Mean and (biased) variance are taken over the batch and both spatial
    axes.  There is no running-average state: evaluation uses the statistics
    of whatever batch it is given.
    """
    x = _require_rank4(_as_tensor(x), "batchnorm2d")
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must be ({c},), got {gamma.shape} and {beta.shape}")
    mu = core.mean(x, axis=(0, 2, 3), keepdims=True)
    xc = core.sub(x, mu)
    var = core.mean(core.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
    inv = core.div(1.0, core.sqrt(core.add(var, float(eps))))
    y = core.mul(xc, inv)
    return core.add(core.mul(y, core.reshape(gamma, (1, c, 1, 1))), core.reshape(beta, (1, c, 1, 1)))


def concat_channels(a, b) -> Tensor:
    """Concatenate two (N, C, H, W) tensors along channels, `a` first."""
    a = _require_rank4(_as_tensor(a), "concat_channels")
    b = _require_rank4(_as_tensor(b), "concat_channels")
    return core.concat([a, b], axis=1)


def relu(x) -> Tensor:
    return core.maximum_scalar(x, 0.0)


def activation(x, kind: str) -> Tensor:
    """Apply a named activation: 'relu' or 'sigmoid'."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return core.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r} (expected 'relu' or 'sigmoid')")
