"""Fidelity metrics on images scaled to [0, 1]."""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor

PSNR_CAP = 100.0
BT601 = np.array([0.299, 0.587, 0.114])
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, peak 1.0, capped at 100 dB."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a (3, H, W) image; 2-D input passes through."""
    img = _array(img)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(BT601, img, axes=(0, 0))
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise DimensionError(f"luma: expected (3, H, W) or (H, W), got {img.shape}")


@functools.lru_cache(maxsize=4)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    g.setflags(write=False)
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.shape[0]
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions of the luma channel."""
    ya, yb = luma(a), luma(b)
    if ya.shape != yb.shape:
        raise DimensionError(f"ssim: {ya.shape} vs {yb.shape}")
    if min(ya.shape) < window:
        raise DimensionError(f"ssim: image {ya.shape} smaller than {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a ** 2
    var_b = _filter_valid(yb * yb, g) - mu_b ** 2
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
