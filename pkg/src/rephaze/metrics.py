"""Reconstruction quality metrics for [0, 1] images: PSNR and SSIM.

These operate on plain numpy arrays (or tensors) and are evaluation-only;
they never participate in gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

__all__ = ["psnr", "ssim", "PSNR_CAP"]

PSNR_CAP = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got shape {arr.shape}")
    return arr


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for a [0, 1] range, capped at 100."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _window_filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    # Separable valid-mode correlation along the two spatial axes.
    k = win.size
    for axis in (2, 3):
        moved = np.moveaxis(x, axis, 0)
        n = moved.shape[0] - k + 1
        acc = np.zeros((n,) + moved.shape[1:], dtype=np.float64)
        for i in range(k):
            acc += win[i] * moved[i : i + n]
        x = np.moveaxis(acc, 0, axis)
    return x


def ssim(a, b) -> float:
    """Single-scale structural similarity with the standard 11x11 Gaussian
    window (sigma 1.5, K1=0.01, K2=0.03), averaged over channels and pixels."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    if x.shape[2] < _SSIM_WINDOW or x.shape[3] < _SSIM_WINDOW:
        raise ContractError(f"image must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW} for SSIM")
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    mu_x = _window_filter_valid(x, win)
    mu_y = _window_filter_valid(y, win)
    xx = _window_filter_valid(x * x, win)
    yy = _window_filter_valid(y * y, win)
    xy = _window_filter_valid(x * y, win)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
