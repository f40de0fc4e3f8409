"""
ControlSR Image Metrics
PSNR and SSIM on [0,1] images, optionally on the BT.601 luma channel.
"""
import logging
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ValidationError
from src.storage.ppm import ImageBuffer

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
Y_COEFFS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def luma(pixels: np.ndarray) -> np.ndarray:
    return pixels @ Y_COEFFS


def _planes(a: ImageBuffer, b: ImageBuffer, on_y: bool):
    if a.pixels.shape != b.pixels.shape:
        raise ValidationError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    if on_y:
        return luma(a.pixels)[None], luma(b.pixels)[None]
    return np.moveaxis(a.pixels, -1, 0), np.moveaxis(b.pixels, -1, 0)


def psnr(a: ImageBuffer, b: ImageBuffer, on_y: bool = True) -> float:
    """10 log10(1 / MSE), capped at 99 dB"""
    x, y = _planes(a, b, on_y)
    mse = float(np.mean((x - y) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    win = (min(SSIM_WINDOW, x.shape[0]), min(SSIM_WINDOW, x.shape[1]))
    wx = sliding_window_view(x, win)
    wy = sliding_window_view(y, win)
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cov = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: ImageBuffer, b: ImageBuffer, on_y: bool = True) -> float:
    """Mean local SSIM over uniform 8x8 windows"""
    x, y = _planes(a, b, on_y)
    return float(np.mean([_ssim_plane(px, py) for px, py in zip(x, y)]))
