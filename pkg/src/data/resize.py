"""
ControlSR Bicubic Resampling
Separable bicubic resize (Keys kernel, a = -0.5) expressed as weight matrices,
antialiased when downscaling, edge pixels replicated.
"""
from functools import lru_cache

import numpy as np
import torch

from src.errors import ValidationError

BICUBIC_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def _weights(in_size: int, out_size: int, a: float) -> np.ndarray:
    scale = out_size / in_size
    # widen the kernel when shrinking so every input pixel contributes
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    out_pos = np.arange(out_size, dtype=np.float64)
    centers = (out_pos + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(np.int64)
    taps = int(np.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * stretch, a) * stretch
    w = w / w.sum(axis=1, keepdims=True)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    clamped = np.clip(idx, 0, in_size - 1)
    for row in range(out_size):
        np.add.at(matrix[row], clamped[row], w[row])
    matrix.setflags(write=False)
    return matrix


def bicubic_weights(in_size: int, out_size: int, a: float = BICUBIC_A) -> np.ndarray:
    """(out_size, in_size) matrix W with resized = W @ signal"""
    if in_size < 1 or out_size < 1:
        raise ValidationError(f"resize sizes must be positive, got {in_size} -> {out_size}")
    return _weights(in_size, out_size, float(a))


def resize_array(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize an (H, W, C) array"""
    wy = bicubic_weights(pixels.shape[0], height)
    wx = bicubic_weights(pixels.shape[1], width)
    return np.einsum("yh,hwc,xw->yxc", wy, pixels, wx)


def resize_tensor(images: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Resize a (B, C, H, W) tensor with the same kernel"""
    wy = torch.from_numpy(bicubic_weights(images.shape[-2], height)).to(images)
    wx = torch.from_numpy(bicubic_weights(images.shape[-1], width)).to(images)
    return torch.einsum("yh,bchw,xw->bcyx", wy, images, wx)
