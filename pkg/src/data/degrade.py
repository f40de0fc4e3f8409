"""
ControlSR Synthetic Degradation
Single-order real-world degradation (blur -> bicubic downscale -> noise ->
block-DCT quantization) and procedural toy-image synthesis.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from src.errors import ValidationError
from src.storage.ppm import ImageBuffer
from src.storage.run_config import DegradeConfig
from .resize import resize_array

logger = logging.getLogger(__name__)

__all__ = ["DegradeConfig", "DegradeParams", "degrade_image", "synth_toy_image", "block_dct_quantize"]

BLOCK = 8

# Standard JPEG luminance table, used as the per-frequency step shape
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class DegradeParams:
    """Concrete parameters drawn for one image"""
    blur_sigma: float
    noise_sigma: float
    jpeg_quality: float


def _draw(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return lo if lo == hi else float(rng.uniform(lo, hi))


def draw_params(cfg: DegradeConfig, rng: np.random.Generator) -> DegradeParams:
    return DegradeParams(
        blur_sigma=_draw(rng, cfg.blur_sigma),
        noise_sigma=_draw(rng, cfg.noise_sigma),
        jpeg_quality=_draw(rng, cfg.jpeg_quality),
    )


def quantizer_steps(quality: float) -> np.ndarray:
    """Per-frequency DCT step for [0,1] images; zero at quality 100"""
    strength = (100.0 - quality) / 50.0
    return JPEG_LUMA_TABLE / 255.0 * strength


def block_dct_quantize(pixels: np.ndarray, quality: float) -> np.ndarray:
    """Quantize 8x8 orthonormal DCT blocks of an (H, W, C) array"""
    h, w, c = pixels.shape
    if h % BLOCK or w % BLOCK:
        raise ValidationError(f"block DCT needs dims divisible by {BLOCK}, got {h}x{w}")
    steps = quantizer_steps(quality)
    if not np.any(steps):
        return pixels.copy()
    blocks = pixels.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK, c).transpose(0, 2, 4, 1, 3)
    coeffs = dctn(blocks, axes=(-2, -1), norm="ortho")
    coeffs = np.round(coeffs / steps) * steps
    blocks = idctn(coeffs, axes=(-2, -1), norm="ortho")
    return blocks.transpose(0, 3, 1, 4, 2).reshape(h, w, c)


def degrade_image(hr: ImageBuffer, cfg: DegradeConfig, rng: np.random.Generator) -> ImageBuffer:
    """HR -> LR through blur, bicubic downscale, Gaussian noise and DCT quantization"""
    factor = BLOCK * cfg.scale
    if hr.height % factor or hr.width % factor:
        raise ValidationError(f"HR dims {hr.height}x{hr.width} must be divisible by 8*scale = {factor}")
    params = draw_params(cfg, rng)

    x = hr.pixels
    if params.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(params.blur_sigma, params.blur_sigma, 0), mode="reflect")
    x = np.clip(x, 0.0, 1.0)
    if cfg.scale != 1:
        x = np.clip(resize_array(x, hr.height // cfg.scale, hr.width // cfg.scale), 0.0, 1.0)
    if params.noise_sigma > 0:
        x = np.clip(x + rng.normal(0.0, params.noise_sigma, size=x.shape), 0.0, 1.0)
    x = np.clip(block_dct_quantize(x, params.jpeg_quality), 0.0, 1.0)

    logger.debug(f"Degraded {hr.height}x{hr.width} -> {x.shape[0]}x{x.shape[1]} with {params}")
    return ImageBuffer(x)


def _smoothstep(edge: np.ndarray) -> np.ndarray:
    t = np.clip(edge, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def synth_toy_image(size: int, rng: np.random.Generator) -> ImageBuffer:
    """Gradient background, anti-aliased ellipses/rectangles and band-limited texture"""
    if size < 8 or size % 8:
        raise ValidationError(f"toy image size must be a positive multiple of 8, got {size}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    # linear gradient background
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    ramp = ramp - ramp.min()
    ramp = ramp / max(ramp.max(), 1e-12)
    c0, c1 = rng.uniform(0.25, 0.75, size=3), rng.uniform(0.25, 0.75, size=3)
    img = c0 + (c1 - c0) * ramp[..., None]

    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.1, 0.9, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        ry, rx = rng.uniform(0.08, 0.3, size=2) * size
        if rng.random() < 0.5:
            dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            # one-pixel soft edge
            coverage = _smoothstep((1.0 - dist) * min(ry, rx) + 0.5)
        else:
            coverage = (_smoothstep(ry - np.abs(yy - cy) + 0.5)
                        * _smoothstep(rx - np.abs(xx - cx) + 0.5))
        img = img * (1 - coverage[..., None]) + color * coverage[..., None]

    # band-limited texture: difference of Gaussians keeps mid/high frequencies
    noise = rng.normal(0.0, 1.0, size=(size, size))
    fine = rng.uniform(0.5, 0.9)
    band = ndimage.gaussian_filter(noise, fine, mode="wrap") - ndimage.gaussian_filter(noise, 3 * fine, mode="wrap")
    band = band / max(band.std(), 1e-12)
    amplitude = rng.uniform(0.04, 0.1)
    img = img + amplitude * band[..., None] * rng.uniform(0.6, 1.0, size=3)
    return ImageBuffer.clipped(img)
