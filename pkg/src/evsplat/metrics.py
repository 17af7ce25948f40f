"""Image quality metrics on display-encoded images in [0, 1]."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError

PSNR_CAP = 99.0
GAMMA = 2.2


def linear_to_display(linear) -> np.ndarray:
    return np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0) ** (1.0 / GAMMA)


def display_to_linear(display) -> np.ndarray:
    return np.clip(np.asarray(display, dtype=np.float64), 0.0, 1.0) ** GAMMA


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (11x11 at sigma 1.5), averaged over channels.

    Uses the usual constants K1 = 0.01, K2 = 0.03, sample-covariance
    normalization and drops the half-window border, like scikit-image.
    """
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    truncate = 3.5
    radius = int(truncate * sigma + 0.5)
    win = 2 * radius + 1
    cov_norm = win * win / (win * win - 1.0)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def filt(img):
            return gaussian_filter(img, sigma, truncate=truncate, mode="reflect")

        ux, uy = filt(x), filt(y)
        vx = cov_norm * (filt(x * x) - ux * ux)
        vy = cov_norm * (filt(y * y) - uy * uy)
        vxy = cov_norm * (filt(x * y) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(s[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))
