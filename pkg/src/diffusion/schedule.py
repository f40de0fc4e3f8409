"""
ControlSR Noise Schedule
Linear beta schedule, forward noising, spaced-timestep subsampling and the
reverse DDPM posterior step.

    x_t     = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
    x_{k-1} = (x_k - beta'_k / sqrt(1 - abar_k) * eps_hat) / sqrt(1 - beta'_k) + sigma_k z
    sigma_k^2 = beta'_k (1 - abar_{k-1}) / (1 - abar_k),  sigma_0 = 0
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch

from src.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """beta / alpha_bar tables; spaced_map holds original timesteps when subsampled"""
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    spaced_map: Optional[Tuple[int, ...]] = None

    @property
    def n_steps(self) -> int:
        return len(self.beta)

    def timestep(self, k: int) -> int:
        """Original training timestep fed to the model at spaced index k"""
        return self.spaced_map[k] if self.spaced_map is not None else k


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def spaced_indices(T: int, n: int):
    """round(i*T/n) for i in [0, n), rounded half up, deduplicated"""
    return sorted({int(math.floor(i * T / n + 0.5)) for i in range(n)})


def space_schedule(schedule: NoiseSchedule, n: int) -> NoiseSchedule:
    """Subsample n timesteps and recompute the effective betas"""
    total = schedule.n_steps
    if not 1 <= n <= total:
        raise ValidationError(f"spaced step count must be in [1, {total}], got {n}")
    idx = spaced_indices(total, n)
    beta = np.empty(len(idx), dtype=np.float64)
    prev = -1
    for k, tau in enumerate(idx):
        if tau == prev + 1:
            # consecutive: the training-schedule beta is already the effective one
            beta[k] = schedule.beta[tau]
        else:
            prev_bar = schedule.alpha_bar[prev] if prev >= 0 else 1.0
            beta[k] = 1.0 - schedule.alpha_bar[tau] / prev_bar
        prev = tau
    original = tuple(schedule.timestep(tau) for tau in idx)
    logger.debug(f"Spaced schedule: {len(idx)} of {total} steps")
    return NoiseSchedule(T=schedule.T, beta=beta, alpha_bar=schedule.alpha_bar[idx].copy(), spaced_map=original)


def _per_item(values: np.ndarray, t: Union[int, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        idx = t.detach().cpu().long().numpy()
        if idx.shape[0] != like.shape[0]:
            raise ValidationError(f"{idx.shape[0]} timesteps for batch of {like.shape[0]}")
        if idx.min() < 0 or idx.max() >= len(values):
            raise ValidationError(f"timestep out of range [0, {len(values)})")
        return torch.as_tensor(values[idx], dtype=like.dtype, device=like.device).view(-1, *([1] * (like.dim() - 1)))
    t = int(t)
    if not 0 <= t < len(values):
        raise ValidationError(f"timestep {t} out of range [0, {len(values)})")
    return torch.as_tensor(values[t], dtype=like.dtype, device=like.device)


def add_noise(x0: torch.Tensor, t: Union[int, torch.Tensor], eps: torch.Tensor,
              schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process q(x_t | x0); t is a scalar or one timestep per batch item"""
    if x0.shape != eps.shape:
        raise ValidationError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    abar = _per_item(schedule.alpha_bar, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def posterior_sigma(k: int, schedule: NoiseSchedule) -> float:
    if k == 0:
        return 0.0
    b = schedule.beta[k]
    return float(math.sqrt(b * (1.0 - schedule.alpha_bar[k - 1]) / (1.0 - schedule.alpha_bar[k])))


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, k: int, schedule: NoiseSchedule) -> torch.Tensor:
    """x0 estimate implied by eps_hat at spaced index k"""
    abar = float(schedule.alpha_bar[k])
    return (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def ddpm_step(x_t: torch.Tensor, eps_hat: torch.Tensor, k: int, schedule: NoiseSchedule,
              rng: Optional[torch.Generator] = None, sigma: Optional[float] = None) -> torch.Tensor:
    """One reverse step from spaced index k to k-1; `sigma` overrides the posterior sigma"""
    if x_t.shape != eps_hat.shape:
        raise ValidationError(f"x_t {tuple(x_t.shape)} and eps_hat {tuple(eps_hat.shape)} differ")
    if not 0 <= k < schedule.n_steps:
        raise ValidationError(f"spaced index {k} out of range [0, {schedule.n_steps})")
    b = float(schedule.beta[k])
    abar = float(schedule.alpha_bar[k])
    mean = (x_t - (b / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(1.0 - b)
    sigma = posterior_sigma(k, schedule) if sigma is None else sigma
    if sigma == 0.0:
        return mean
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
    return mean + sigma * z
