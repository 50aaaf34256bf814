"""Image quality metrics on plain arrays (no tape).

Images are ``[3,H,W]`` or ``[H,W]`` float arrays in [0, 1], peak value 1.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_C1 = SSIM_K1 ** 2
SSIM_C2 = SSIM_K2 ** 2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian, outer product of the 1-D profile."""
    g = gaussian_profile(size, sigma)
    return np.outer(g, g)


def gaussian_profile(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0; ``math.inf`` when the
    images are identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Separable Gaussian over the last two axes, valid region only.
    k = g.size
    x = sliding_window_view(x, k, axis=-2) @ g
    return sliding_window_view(x, k, axis=-1) @ g


def ssim(a, b) -> float:
    """Mean SSIM over all valid 11x11 Gaussian (sigma 1.5) windows, computed
    per channel and averaged."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    g = gaussian_profile()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    per_channel = (num / den).reshape(a.shape[0], -1).mean(axis=1)
    return float(per_channel.mean())


def error_map(pred, gt) -> np.ndarray:
    """8-bit grayscale map, white where the prediction is exact.

    The per-pixel error is the channel mean of ``|pred - gt|`` clipped to
    [0, 1]; the pixel value is ``round_half_up(255 * (1 - error))``.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    err = np.abs(pred - gt)
    if err.ndim == 3:
        err = err.mean(axis=0)
    err = np.clip(err, 0.0, 1.0)
    return np.floor(255.0 * (1.0 - err) + 0.5).astype(np.uint8)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def format_score(p: float, s: float) -> str:
    """``PSNR/SSIM`` as printed under result figures, e.g. ``+∞/1.000``."""
    head = "+∞" if math.isinf(p) else f"{p:.2f}"
    return f"{head}/{s:.3f}"
