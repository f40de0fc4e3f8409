"""
ControlSR Control-Signal Probes
Spatial distributions and KL divergence between control signals and x_lr,
PCA false-colour projection, radially averaged power spectra and the
high-frequency energy fraction used as a proxy for generated detail.

KL convention: each tensor is reduced to a distribution over positions by
channel mean -> bilinear resize to a common grid -> spatial softmax, and
D_kl = KL(P_xlr || P_signal). Values are comparable within this package only.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from src.errors import ControlSRError, ValidationError
from src.storage.ppm import ImageBuffer

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
POWER_FLOOR = 1e-12
PCA_ITERS = 100
PCA_TOL = 1e-8

ArrayLike = Union[torch.Tensor, np.ndarray, ImageBuffer]


# distributions and divergence

def to_distribution(x: torch.Tensor, target_hw: Tuple[int, int]) -> np.ndarray:
    """(1, C, H, W) tensor -> (h, w) probability grid summing to 1"""
    if x.dim() != 4 or x.shape[0] != 1:
        raise ValidationError(f"expected a single (1, C, H, W) item, got {tuple(x.shape)}")
    m = x.detach().to(torch.float64).mean(dim=1, keepdim=True)
    if tuple(m.shape[-2:]) != tuple(target_hw):
        m = F.interpolate(m, size=tuple(target_hw), mode="bilinear", align_corners=False)
    p = torch.softmax(m.flatten(), dim=0).numpy()
    p = np.maximum(p, PROB_FLOOR)
    return (p / p.sum()).reshape(target_hw)


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    """sum P log(P / Q) in nats"""
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValidationError(f"distribution grids differ: {P.shape} vs {Q.shape}")
    return float(np.sum(P * np.log(P / Q)))


def diff_kl(kl_baseline: float, kl_ours: float) -> float:
    """Positive when ours stays closer to x_lr than the baseline"""
    return kl_baseline - kl_ours


def signal_kl(signals: Sequence[torch.Tensor], x_lr: torch.Tensor) -> float:
    """Mean over injection scales of KL(x_lr || c_k), x_lr resized to each scale"""
    if not signals:
        raise ValidationError("no control signals to compare")
    values = []
    for c in signals:
        hw = tuple(c.shape[-2:])
        values.append(kl_divergence(to_distribution(x_lr, hw), to_distribution(c, hw)))
    return float(np.mean(values))


# PCA

@dataclass
class Components:
    """Top principal directions (columns) with their variances"""
    vectors: np.ndarray
    variances: np.ndarray


def principal_components(samples: np.ndarray, k: int, iters: int = PCA_ITERS, tol: float = PCA_TOL) -> Components:
    """Power iteration with deflation on the covariance of (N, C) samples"""
    X = samples - samples.mean(axis=0, keepdims=True)
    cov = X.T @ X / X.shape[0]
    c = cov.shape[0]
    rng = np.random.default_rng(0)
    vectors = np.zeros((c, k))
    variances = np.zeros(k)
    for j in range(k):
        v = rng.standard_normal(c)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                v = np.zeros(c)
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        vectors[:, j] = v
        variances[j] = max(lam, 0.0)
        cov = cov - lam * np.outer(v, v)
    return Components(vectors=vectors, variances=variances)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi - lo <= 0 else (a - lo) / (hi - lo)


def pca_project(x: torch.Tensor) -> ImageBuffer:
    """Top-3 principal components of the per-position channel vectors as RGB"""
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] < 3:
        raise ValidationError(f"expected (1, C>=3, H, W), got {tuple(x.shape)}")
    _, c, h, w = x.shape
    samples = x.detach().to(torch.float64)[0].reshape(c, h * w).T.numpy()
    total = float(np.trace(np.cov(samples, rowvar=False, bias=True)))
    if not np.isfinite(total) or total <= 1e-20:
        logger.warning("Degenerate covariance in PCA projection; showing raw channels 0-2")
        rgb = samples[:, :3]
    else:
        comps = principal_components(samples, 3)
        rgb = (samples - samples.mean(axis=0)) @ comps.vectors
    rgb = np.stack([_minmax(rgb[:, i]) for i in range(3)], axis=-1)
    return ImageBuffer(rgb.reshape(h, w, 3))


# spectra

@dataclass
class RadialSpectrum:
    radii: np.ndarray
    log_power: np.ndarray


def _maps(x: ArrayLike) -> np.ndarray:
    """Any supported input -> (M, H, W) float64 stack of 2-D maps"""
    if isinstance(x, ImageBuffer):
        return np.moveaxis(x.pixels, -1, 0).astype(np.float64)
    if isinstance(x, torch.Tensor):
        x = x.detach().to(torch.float64).cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 4:
        return x.reshape(-1, *x.shape[-2:])
    if x.ndim == 3:
        return x
    raise ValidationError(f"unsupported array rank {x.ndim}")


def power_2d(x: np.ndarray) -> np.ndarray:
    """|DFT|^2 of a 2-D map"""
    return np.abs(np.fft.fft2(x)) ** 2


def _radius(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def power_spectrum(x: ArrayLike) -> RadialSpectrum:
    """Channel-mean map -> radially binned mean log10 power, bins 0..Nyquist"""
    maps = _maps(x)
    if isinstance(x, torch.Tensor) and x.dim() == 4:
        maps = maps.reshape(x.shape[0], x.shape[1], *maps.shape[-2:])[0]
    field = maps.mean(axis=0)
    h, w = field.shape
    power = power_2d(field)
    bins = np.floor(_radius(h, w) + 0.5).astype(np.int64)
    nyquist = min(h, w) // 2
    radii = np.arange(nyquist + 1)
    log_power = np.empty(len(radii))
    for r in radii:
        log_power[r] = np.mean(np.log10(power[bins == r] + POWER_FLOOR))
    return RadialSpectrum(radii=radii, log_power=log_power)


def hf_energy_fraction(x: ArrayLike) -> float:
    """Energy beyond half-Nyquist over all non-DC energy, summed across maps"""
    maps = _maps(x)
    h, w = maps.shape[-2:]
    r = _radius(h, w)
    power = sum(power_2d(m) for m in maps)
    non_dc = r > 0
    total = float(power[non_dc].sum())
    # flat maps leave only round-off outside DC
    if total <= POWER_FLOOR * max(float(power.sum()), 1.0):
        return 0.0
    return float(power[r > min(h, w) / 4.0].sum() / total)


# reports

def _write_rows(path: Union[str, Path], header: List[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise ControlSRError(f"failed to write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def write_kl_csv(path, rows: Iterable[Tuple[str, float, Optional[float]]]) -> None:
    """rows: (image, kl_dpm_gspm, kl_baseline or None)"""
    out = []
    for image, ours, baseline in rows:
        diff = "" if baseline is None else f"{diff_kl(baseline, ours):.6g}"
        out.append([image, f"{ours:.6g}", "" if baseline is None else f"{baseline:.6g}", diff])
    _write_rows(path, ["image", "kl_dpm_gspm", "kl_baseline", "diff"], out)


def write_spectrum_csv(path, spectra: Dict[str, RadialSpectrum]) -> None:
    rows = [[tap, int(r), f"{v:.6g}"] for tap, s in spectra.items() for r, v in zip(s.radii, s.log_power)]
    _write_rows(path, ["tap", "radius", "log_power"], rows)


def write_hf_csv(path, fractions: Dict[str, float]) -> None:
    _write_rows(path, ["tap", "hf_fraction"], [[tap, f"{v:.6g}"] for tap, v in fractions.items()])
