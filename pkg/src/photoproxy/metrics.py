"""PSNR and Gaussian-windowed mean SSIM.

Both work in the normalized intensity domain, so the peak is 1.0 rather
than 255.  SSIM uses valid-region windowing: no padding, the local map is
``window - 1`` pixels smaller than the inputs along each axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core_image import check_image


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0
    window: int = 11
    window_sigma: float = 1.5

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.window_sigma <= 0 or self.peak <= 0:
            raise ValueError("window_sigma and peak must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.peak) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.peak) ** 2


@dataclass(frozen=True)
class QualityScore:
    mse: float
    psnr_db: float
    mssim: float


def _pair(a, b):
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(err))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    return psnr_from_mse(mse(a, b), peak)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = len(taps)
    rows = sliding_window_view(img, k, axis=1) @ taps
    return sliding_window_view(rows, k, axis=0) @ taps


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("SSIM requires single-channel images")
    if min(a.shape) < cfg.window:
        raise ValueError(f"image {a.shape} smaller than SSIM window {cfg.window}")
    taps = gaussian_window(cfg.window, cfg.window_sigma)
    mu_x = _filter_valid(a, taps)
    mu_y = _filter_valid(b, taps)
    var_x = np.maximum(_filter_valid(a * a, taps) - mu_x ** 2, 0.0)
    var_y = np.maximum(_filter_valid(b * b, taps) - mu_y ** 2, 0.0)
    cov = _filter_valid(a * b, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_x ** 2 + mu_y ** 2 + cfg.c1) * (var_x + var_y + cfg.c2)
    return num / den


def mean_ssim(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    return float(np.mean(ssim_map(a, b, cfg)))


def quality(reference: np.ndarray, test: np.ndarray, cfg: SsimConfig = SsimConfig()) -> QualityScore:
    err = mse(reference, test)
    return QualityScore(err, psnr_from_mse(err, cfg.peak), mean_ssim(reference, test, cfg))
