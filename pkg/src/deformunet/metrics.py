"""Image quality metrics: PSNR (capped sentinel at 100 dB) and
single-scale SSIM with the standard 11x11 Gaussian window."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import ShapeError, Tensor

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_image(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"metric wants a 2-D image (or [1,H,W]), got {arr.shape}")
    # canonical layout: identical values give identical reductions
    return np.ascontiguousarray(arr)


def psnr(xhat, x, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB (identical inputs hit the cap)."""
    a, b = _as_image(xhat), _as_image(x)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


_KERNEL_CACHE: dict = {}


def _gaussian_kernel(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    key = (n, sigma)
    k = _KERNEL_CACHE.get(key)
    if k is None:
        t = np.arange(n) - (n - 1) / 2.0
        k = np.exp(-0.5 * (t / sigma) ** 2)
        k /= k.sum()
        _KERNEL_CACHE[key] = k
    return k


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.size
    t = sliding_window_view(img, n, axis=0) @ k
    return sliding_window_view(t, n, axis=1) @ k


def ssim(xhat, x, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM over valid window positions."""
    a, b = _as_image(xhat), _as_image(x)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2

    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
