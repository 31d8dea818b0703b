"""Image quality metrics and dark/bright channel statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .ecpel import bright_extract, dark_extract
from .tensor import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim == 2:
        return img
    raise ShapeError(f"expected (C, H, W) or (H, W) image, got {img.shape}")


def ssim(a, b) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5), range 1."""
    a, b = _pair(a, b)
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()

    def filt(img):
        return convolve2d(img, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class ChannelStats:
    mean_dark: float
    mean_bright: float
    window: int
    histogram: np.ndarray  # 256 bins of dark-channel values over [0, 1]


def channel_stats(image, window: int = 15) -> ChannelStats:
    """Dark/bright channel means of a (3, H, W) image via the layer's extractors."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    dark, _ = dark_extract(img, window)
    bright, _ = bright_extract(img, window)
    hist, _ = np.histogram(dark, bins=256, range=(0.0, 1.0))
    return ChannelStats(float(dark.mean()), float(bright.mean()), window, hist)


def blur_verdict(sharp, blurred, window: int = 15) -> bool:
    """True when blurring made the dark channel lighter and the bright channel darker (or equal)."""
    s, b = channel_stats(sharp, window), channel_stats(blurred, window)
    return b.mean_dark >= s.mean_dark and b.mean_bright <= s.mean_bright
