"""
ControlSR Sampler
Spaced DDPM sampling from noise under control signals, with latent space
adjustment of each step's output:

    early steps (ELA):  x <- (1 - alpha) x + alpha x_lr
    late steps  (LLA):  x <- (1 + beta) x - beta x_lr
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import torch

from src.analysis.metrics import psnr
from src.errors import ControlSRError, UsageError, ValidationError
from src.model.controlsr import ControlOutputs, ControlSRModel
from src.storage.checkpoint import Stage
from src.storage.ppm import ImageBuffer, write_ppm
from src.storage.run_config import RunConfig
from .schedule import NoiseSchedule, ddpm_step, predict_x0, space_schedule

logger = logging.getLogger(__name__)


class Phase(Enum):
    ELA = "ELA"
    NONE = "NONE"
    LLA = "LLA"


@dataclass(frozen=True)
class LSAConfig:
    """Latent space adjustment strengths and phase boundaries"""
    alpha: float = 0.01
    beta: float = 0.01
    n_steps: int = 50
    early_frac: float = 0.4
    late_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0.0 <= self.early_frac <= self.late_frac <= 1.0:
            raise ValidationError(
                f"need 0 <= early_frac <= late_frac <= 1, got {self.early_frac}, {self.late_frac}")

    @classmethod
    def from_config(cls, config: RunConfig, **overrides) -> "LSAConfig":
        values = dict(alpha=config.alpha, beta=config.beta, n_steps=config.steps,
                      early_frac=config.early_frac, late_frac=config.late_frac, seed=config.seed)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def assign_phase(i: int, cfg: LSAConfig) -> Phase:
    n = cfg.n_steps
    if i < math.ceil(cfg.early_frac * n):
        return Phase.ELA
    if i >= math.ceil(cfg.late_frac * n):
        return Phase.LLA
    return Phase.NONE


def _same_shape(x_i: torch.Tensor, x_lr: torch.Tensor) -> None:
    if x_i.shape != x_lr.shape:
        raise ValidationError(f"latent {tuple(x_i.shape)} and x_lr {tuple(x_lr.shape)} differ")


def ela(x_i: torch.Tensor, x_lr: torch.Tensor, alpha: float) -> torch.Tensor:
    """Pull toward x_lr"""
    _same_shape(x_i, x_lr)
    return (1.0 - alpha) * x_i + alpha * x_lr


def lla(x_i: torch.Tensor, x_lr: torch.Tensor, beta: float) -> torch.Tensor:
    """Push away from x_lr"""
    _same_shape(x_i, x_lr)
    return (1.0 + beta) * x_i - beta * x_lr


@dataclass
class TraceRecord:
    step: int
    phase: Phase
    dist_pre: float
    dist_lr: float
    psnr: Optional[float] = None


@dataclass
class SamplerTrace:
    records: List[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "phase", "dist_lr", "psnr"])
                for r in self.records:
                    writer.writerow([r.step, r.phase.value, f"{r.dist_lr:.8g}",
                                     "" if r.psnr is None else f"{r.psnr:.4f}"])
        except OSError as e:
            raise ControlSRError(f"failed to write trace {path}: {e}") from e


ControlHook = Callable[[int, ControlOutputs, torch.Tensor, torch.Tensor], None]


@torch.no_grad()
def sample(lr_image: ImageBuffer, model: ControlSRModel, schedule: NoiseSchedule, lsa: LSAConfig,
           stage: Stage = Stage.CONTROL, hr: Optional[ImageBuffer] = None,
           snapshot_dir: Optional[Union[str, Path]] = None,
           control_hook: Optional[ControlHook] = None) -> Tuple[ImageBuffer, SamplerTrace]:
    """Super-resolve one LR image; control_hook(i, outputs, x_t, x_lr) sees every step"""
    if stage is not Stage.CONTROL:
        raise UsageError(f"sampling needs a control-stage checkpoint, got '{stage.value}'")
    if schedule.spaced_map is None:
        schedule = space_schedule(schedule, lsa.n_steps)
    elif schedule.n_steps != lsa.n_steps:
        raise ValidationError(f"schedule has {schedule.n_steps} steps, sampler expects {lsa.n_steps}")
    scale = model.scale
    if hr is not None and (hr.height != lr_image.height * scale or hr.width != lr_image.width * scale):
        raise ValidationError(f"HR {hr.height}x{hr.width} is not x{scale} of LR {lr_image.height}x{lr_image.width}")

    dtype = next(model.parameters()).dtype
    lr = lr_image.to_tensor(dtype)
    x_lr = model.latent_lr(lr)
    p = model.condition(lr)
    gen = torch.Generator().manual_seed(lsa.seed)
    x = torch.randn(x_lr.shape, generator=gen, dtype=dtype)
    snapshots = Path(snapshot_dir) if snapshot_dir is not None else None

    trace = SamplerTrace()
    n = schedule.n_steps
    for i in range(n):
        k = n - 1 - i
        t = torch.full((x.shape[0],), schedule.timestep(k), dtype=torch.long)
        outputs = model.controls(x, x_lr, t, p)
        eps_hat = model.unet(x, t, outputs.fused, p)
        if control_hook is not None:
            control_hook(i, outputs, x, x_lr)

        score = None
        if hr is not None or snapshots is not None:
            estimate = ImageBuffer.from_tensor(model.vae.decode(predict_x0(x, eps_hat, k, schedule)))
            if hr is not None:
                score = psnr(estimate, hr)
            if snapshots is not None:
                write_ppm(snapshots / f"step_{i:03d}.ppm", estimate)

        x = ddpm_step(x, eps_hat, k, schedule, gen)
        dist_pre = float(torch.linalg.vector_norm(x - x_lr))
        phase = assign_phase(i, lsa)
        if phase is Phase.ELA:
            x = ela(x, x_lr, lsa.alpha)
        elif phase is Phase.LLA:
            x = lla(x, x_lr, lsa.beta)
        trace.records.append(TraceRecord(step=i, phase=phase, dist_pre=dist_pre,
                                         dist_lr=float(torch.linalg.vector_norm(x - x_lr)), psnr=score))
        logger.debug(f"step {i} ({phase.value}) t={schedule.timestep(k)} dist_lr={trace.records[-1].dist_lr:.4f}")

    return ImageBuffer.from_tensor(model.vae.decode(x)), trace
