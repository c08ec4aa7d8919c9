"""PSNR and SSIM on scan fields.

SSIM follows Wang et al. (2004): 11x11 Gaussian window with sigma 1.5,
K1 = 0.01, K2 = 0.03, averaged over the positions where the window fits
entirely inside the image.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
METRIC_COLUMNS = ("sample_id", "method", "sigma", "channel", "psnr_db", "ssim")


def _arrays(pred, target) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, target, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    if data_range <= 0:
        raise ValidationError("data_range must be positive")
    a, b = _arrays(pred, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, target, data_range: float = 1.0) -> np.ndarray:
    a, b = _arrays(pred, target)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"fields must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if data_range <= 0:
        raise ValidationError("data_range must be positive")
    w = gaussian_window()
    pad = SSIM_WINDOW // 2

    def filt(x):
        return ndimage.correlate(x, w, mode="constant")[pad:-pad, pad:-pad]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, target, data_range: float = 1.0) -> float:
    return float(np.mean(ssim_map(pred, target, data_range)))
