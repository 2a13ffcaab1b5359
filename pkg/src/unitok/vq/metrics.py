"""Reconstruction metrics on [0, 1] clips."""
from __future__ import annotations

import numpy as np

from .media import MediaClip

PSNR_CAP = 99.0


def _frames(x) -> np.ndarray:
    return np.asarray(x.frames if isinstance(x, MediaClip) else x, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit peak; identical inputs give ``PSNR_CAP``."""
    fa, fb = _frames(a), _frames(b)
    if fa.shape != fb.shape:
        raise ValueError(f"psnr shape mismatch: {fa.shape} vs {fb.shape}")
    mse = float(np.mean((fa - fb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable filter over the last two axes, no padding
    k = g.size
    rows = sum(g[i] * img[..., i : img.shape[-2] - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[..., :, i : img.shape[-1] - k + 1 + i] for i in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over Gaussian windows, averaged over frames and channels."""
    fa, fb = _frames(a), _frames(b)
    if fa.shape != fb.shape:
        raise ValueError(f"ssim shape mismatch: {fa.shape} vs {fb.shape}")
    if fa.shape[-1] < window or fa.shape[-2] < window:
        raise ValueError(f"frames {fa.shape[-2:]} smaller than the {window}x{window} window")
    c1, c2 = k1**2, k2**2
    g = _gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(fa, g), _filter_valid(fb, g)
    var_a = _filter_valid(fa * fa, g) - mu_a**2
    var_b = _filter_valid(fb * fb, g) - mu_b**2
    cov = _filter_valid(fa * fb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
