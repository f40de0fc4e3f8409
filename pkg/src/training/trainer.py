"""
ControlSR Trainer
Three training stages over the toy pair set:
    vae       reconstruction MSE + small KL on HR images
    backbone  unconditional epsilon-prediction on frozen HR latents
    control   epsilon-prediction with fused control signals and condition p
Each stage optimizes its trainable set with Adam and audits the frozen rest.
"""
import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from src.data.toyset import ToyPairs
from src.diffusion.schedule import NoiseSchedule, add_noise, make_schedule
from src.errors import ControlSRError, PrerequisiteError, UsageError
from src.model.controlsr import ControlSRModel
from src.model.vae import kl_term
from src.storage.checkpoint import Checkpoint, Stage, read_checkpoint, write_checkpoint
from src.storage.run_config import RunConfig, dump_config, sidecar_path
from .params import ParamStore

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
THREADS_ENV = "CONTROLSR_THREADS"

# stage -> stages whose checkpoints may seed it
PREREQUISITES = {
    Stage.VAE: (Stage.VAE,),
    Stage.BACKBONE: (Stage.VAE, Stage.BACKBONE),
    Stage.CONTROL: (Stage.BACKBONE, Stage.CONTROL),
}
# stages that may start without --resume
FRESH_START = (Stage.VAE,)

Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
        return 1


def make_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.set_num_threads(thread_count())
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainState:
    """Model, optimizer and bookkeeping for one stage"""
    model: ControlSRModel
    store: ParamStore
    optimizer: torch.optim.Optimizer
    stage: Stage
    generator: torch.Generator
    config: RunConfig
    step: int = 0
    frozen: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, model: ControlSRModel, stage: Stage, config: RunConfig,
               lr: Optional[float] = None) -> "TrainState":
        store = ParamStore(model, stage)
        optimizer = torch.optim.Adam(store.trainable(), lr=config.lr if lr is None else lr, betas=ADAM_BETAS)
        generator = torch.Generator().manual_seed(config.seed)
        frozen = store.snapshot_frozen() if config.audit_freeze else {}
        return cls(model=model, store=store, optimizer=optimizer, stage=stage,
                   generator=generator, config=config, frozen=frozen)

    def require(self, stage: Stage) -> None:
        if self.stage is not stage:
            raise UsageError(f"{stage.value} step called in stage '{self.stage.value}'")

    def optimize(self, loss: torch.Tensor) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.frozen:
            self.store.audit(self.frozen)
        self.step += 1
        return float(loss.detach())


def _draw(state: TrainState, schedule: NoiseSchedule, like: torch.Tensor,
          noise: Optional[torch.Tensor], timesteps: Optional[torch.Tensor]):
    b = like.shape[0]
    t = timesteps if timesteps is not None else torch.randint(0, schedule.n_steps, (b,), generator=state.generator)
    eps = noise if noise is not None else torch.randn(like.shape, generator=state.generator, dtype=like.dtype)
    return t, eps


def controlsr_loss(batch_hr: torch.Tensor, batch_lr: torch.Tensor, state: TrainState, schedule: NoiseSchedule,
                   noise: Optional[torch.Tensor] = None, timesteps: Optional[torch.Tensor] = None,
                   predictor: Optional[Predictor] = None) -> torch.Tensor:
    """|| eps - eps_hat(x_t, x_c, p, t) ||^2 averaged over elements"""
    state.require(Stage.CONTROL)
    model = state.model
    with torch.no_grad():
        x0 = model.vae.encode(batch_hr)
    t, eps = _draw(state, schedule, x0, noise, timesteps)
    x_t = add_noise(x0, t, eps, schedule)
    x_lr = model.latent_lr(batch_lr)
    p = model.condition(batch_lr)
    eps_hat = (predictor or model.eps)(x_t, t, x_lr, p)
    return F.mse_loss(eps_hat, eps)


def pretrain_vae_step(batch_hr: torch.Tensor, state: TrainState) -> float:
    state.require(Stage.VAE)
    vae = state.model.vae
    mean, logvar = vae.moments(batch_hr)
    loss = F.mse_loss(vae.decode_raw(mean), batch_hr) + state.config.vae_kl_weight * kl_term(mean, logvar)
    return state.optimize(loss)


def pretrain_backbone_step(batch_hr: torch.Tensor, state: TrainState, schedule: NoiseSchedule) -> float:
    state.require(Stage.BACKBONE)
    model = state.model
    with torch.no_grad():
        x0 = model.vae.encode(batch_hr)
    t, eps = _draw(state, schedule, x0, None, None)
    loss = F.mse_loss(model.unet(add_noise(x0, t, eps, schedule), t), eps)
    return state.optimize(loss)


def control_step(batch_hr: torch.Tensor, batch_lr: torch.Tensor, state: TrainState,
                 schedule: NoiseSchedule) -> float:
    return state.optimize(controlsr_loss(batch_hr, batch_lr, state, schedule))


def _batch_indices(state: TrainState, size: int) -> torch.Tensor:
    batch = state.config.batch
    if batch <= size:
        return torch.randperm(size, generator=state.generator)[:batch]
    return torch.randint(0, size, (batch,), generator=state.generator)


def load_prerequisite(stage: Stage, resume: Optional[Union[str, Path]]) -> Optional[Checkpoint]:
    allowed = PREREQUISITES[stage]
    if resume is None:
        if stage not in FRESH_START:
            raise PrerequisiteError(stage.value, f"needs a checkpoint from stage "
                                                 f"{' or '.join(s.value for s in allowed)} (--resume)")
        return None
    path = Path(resume)
    if not path.exists():
        raise PrerequisiteError(stage.value, f"checkpoint {path} not found")
    checkpoint = read_checkpoint(path)
    if checkpoint.stage not in allowed:
        raise PrerequisiteError(stage.value, f"{path} is a '{checkpoint.stage.value}' checkpoint; "
                                             f"expected {' or '.join(s.value for s in allowed)}")
    return checkpoint


def write_metrics(path: Union[str, Path], rows: List[Tuple[int, str, float, float]]) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "stage", "loss", "wall_ms"])
            for step, stage, loss, wall in rows:
                writer.writerow([step, stage, f"{loss:.8g}", f"{wall:.3f}"])
    except OSError as e:
        raise ControlSRError(f"failed to write metrics {path}: {e}") from e


def save_stage(model: ControlSRModel, state: TrainState, path: Path) -> None:
    write_checkpoint(path, model.to_checkpoint(state.stage, state.store.flags(), state.config.seed))
    dump_config(sidecar_path(path), state.config)


def train_loop(config: RunConfig, stage: Stage, out_dir: Union[str, Path],
               resume: Optional[Union[str, Path]] = None) -> Path:
    """Run one stage for config.iters steps; returns the final checkpoint path"""
    out_dir = Path(out_dir)
    prior = load_prerequisite(stage, resume)
    make_deterministic(config.seed)

    model = ControlSRModel(config)
    if prior is not None:
        model.load_checkpoint(prior)
        if stage is Stage.CONTROL and prior.stage is Stage.BACKBONE:
            model.init_branches_from_backbone()
    model.train()

    state = TrainState.create(model, stage, config)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    pairs = ToyPairs.build(config.dataset_size, config.image_size, config.degrade, config.seed)
    logger.info(f"Training stage {stage.value} for {config.iters} iterations -> {out_dir}")

    rows: List[Tuple[int, str, float, float]] = []
    for _ in range(config.iters):
        start = time.perf_counter()
        hr, lr = pairs.batch(_batch_indices(state, len(pairs)))
        if stage is Stage.VAE:
            loss = pretrain_vae_step(hr, state)
        elif stage is Stage.BACKBONE:
            loss = pretrain_backbone_step(hr, state, schedule)
        else:
            loss = control_step(hr, lr, state, schedule)
        rows.append((state.step, stage.value, loss, (time.perf_counter() - start) * 1000.0))
        if state.step % config.log_every == 0:
            logger.info(f"[{stage.value}] step {state.step}/{config.iters} loss {loss:.5f}")
        if config.checkpoint_every and state.step % config.checkpoint_every == 0 and state.step < config.iters:
            save_stage(model, state, out_dir / f"{stage.value}_step{state.step:06d}.csrk")

    final = out_dir / f"{stage.value}.csrk"
    save_stage(model, state, final)
    write_metrics(out_dir / "metrics.csv", rows)
    logger.info(f"Stage {stage.value} finished after {state.step} steps")
    return final
