"""Reconstruction loss and full-reference image quality metrics.

The training loss combines a pixelwise L1 term with a per-pixel color
cosine penalty: mean|p - t| + lam * (1 - mean_j cos(p_j, t_j)), where j
runs over pixels and the cosine is taken between the two color vectors at
that pixel.  The L1 term drives luminance, the cosine term hue.

SSIM and PSNR are plain numpy (no autodiff); they are measurement tools,
not training signals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import core
from .tensor.core import ShapeError, Tensor

__all__ = ["LossConfig", "expandnet_loss", "ssim", "psnr"]

# added under each squared norm before sqrt: keeps the sqrt gradient finite
# if a channel underflows to exactly 0, far below one ulp of any real norm
_NORM_PAD = 1e-20


@dataclass(frozen=True)
class LossConfig:
    """lam weights the cosine term; eps floors the cosine denominator."""

    lam: float = 5.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


def expandnet_loss(pred, target, cfg: LossConfig | None = None) -> Tensor:
    """L1 plus weighted per-pixel cosine dissimilarity.

    Accepts (C, H, W) or (N, C, H, W); pred and target must match exactly.
    The cosine denominator is max(|p| * |t|, eps), so pixels where either
    color vector vanishes contribute zero similarity rather than NaN.
    """
    cfg = cfg or LossConfig()
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred and target shapes differ: {pred.shape} vs {target.shape}")
    if pred.ndim not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {pred.shape}")
    ch_axis = pred.ndim - 3

    l1 = core.mean(core.absolute(core.sub(pred, target)))
    dot = core.sum(core.mul(pred, target), axis=ch_axis)
    pn = core.sqrt(core.add(core.sum(core.mul(pred, pred), axis=ch_axis), _NORM_PAD))
    tn = core.sqrt(core.add(core.sum(core.mul(target, target), axis=ch_axis), _NORM_PAD))
    cos = core.div(dot, core.maximum_scalar(core.mul(pn, tn), cfg.eps))
    return core.add(l1, core.mul(core.sub(1.0, core.mean(cos)), cfg.lam))


# ---------------------------------------------------------------------------
# metrics


def _as_channels(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"metrics expect (H, W) or (C, H, W), got {arr.shape}")
    return arr


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(
    a,
    b,
    *,
    peak: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over valid (fully-inside) window positions.

    Gaussian-weighted 11x11 windows, sigma 1.5, stabilizers C1=(k1*peak)^2
    and C2=(k2*peak)^2.  Multi-channel inputs are averaged over channels.
    Computation is float64 regardless of input dtype.
    """
    xa, xb = _as_channels(a), _as_channels(b)
    if xa.shape != xb.shape:
        raise ShapeError(f"ssim inputs differ in shape: {xa.shape} vs {xb.shape}")
    c, h, w = xa.shape
    if h < window_size or w < window_size:
        raise ShapeError(f"ssim needs at least {window_size}x{window_size} images, got {h}x{w}")
    kern = _gaussian_kernel(window_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(c):
        wa = sliding_window_view(xa[ch], (window_size, window_size))
        wb = sliding_window_view(xb[ch], (window_size, window_size))
        mu_a = np.tensordot(wa, kern, axes=((2, 3), (0, 1)))
        mu_b = np.tensordot(wb, kern, axes=((2, 3), (0, 1)))
        e_aa = np.tensordot(wa * wa, kern, axes=((2, 3), (0, 1)))
        e_bb = np.tensordot(wb * wb, kern, axes=((2, 3), (0, 1)))
        e_ab = np.tensordot(wa * wb, kern, axes=((2, 3), (0, 1)))
        var_a = e_aa - mu_a * mu_a
        var_b = e_bb - mu_b * mu_b
        cov = e_ab - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def psnr(a, b, *, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    xa, xb = _as_channels(a), _as_channels(b)
    if xa.shape != xb.shape:
        raise ShapeError(f"psnr inputs differ in shape: {xa.shape} vs {xb.shape}")
    mse = float(np.mean((xa - xb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
