"""
ControlSR Model
Assembles the VAE, backbone, condition embedder and control branches from a
RunConfig, and maps the whole model to and from CSRK checkpoints.

Checkpoint names: "vae.*", "unet.*", "cond.*", "dpm.*", "gspm.*".
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn

from src.errors import ValidationError
from src.storage.checkpoint import Checkpoint, Stage, TensorRecord
from src.storage.run_config import RunConfig
from .backbone import ConditionEmbedder, TinyUNet, condition_context, embed_condition
from .control import ControlBranch, ControlSignals, dpm_forward, fuse_control, gspm_forward
from .vae import TinyVAE

logger = logging.getLogger(__name__)


@dataclass
class ControlOutputs:
    """Per-branch signals of one denoising step"""
    dpm: ControlSignals
    gspm: Optional[ControlSignals]
    fused: ControlSignals


class ControlSRModel(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        c = config
        self.vae = TinyVAE(c.vae_widths, c.latent_channels,
                           lora_rank=c.vae_lora_rank if c.use_vae_lora else 0, lora_scale=c.lora_scale)
        self.unet = TinyUNet(c.latent_channels, c.unet_width, c.time_dim, c.cond_dim, c.heads,
                             lora_rank=c.unet_lora_rank if c.use_unet_lora else 0, lora_scale=c.lora_scale)
        self.cond = ConditionEmbedder(max(8, c.unet_width // 2), c.cond_dim)
        branch = dict(latent_channels=c.latent_channels, width=c.unet_width, time_dim=c.time_dim,
                      cond_dim=c.cond_dim, heads=c.heads, key_window=c.key_window,
                      partition=c.dpm_window_partition)
        self.dpm = ControlBranch(attention=True, window_attention=c.cross_attn_enabled, **branch)
        self.gspm = ControlBranch(attention=False, **branch) if c.gspm_enabled else None

    @property
    def scale(self) -> int:
        return self.config.degrade.scale

    def init_branches_from_backbone(self) -> None:
        """ControlNet recipe: branches start as copies of the pretrained encoder"""
        n = self.dpm.copy_encoder(self.unet)
        if self.gspm is not None:
            n += self.gspm.copy_encoder(self.unet)
        logger.info(f"Initialized control branches from backbone ({n} tensors)")

    def latent_lr(self, lr_images: torch.Tensor) -> torch.Tensor:
        """x_lr via the LoRA-adapted VAE encoder"""
        return self.vae.encode_lr(lr_images, self.scale)

    def condition(self, lr_images: torch.Tensor) -> torch.Tensor:
        return embed_condition(lr_images, self.cond)

    def controls(self, x_t: torch.Tensor, x_lr: torch.Tensor, t: torch.Tensor, p: Optional[torch.Tensor],
                 taps: Optional[Dict[str, torch.Tensor]] = None) -> ControlOutputs:
        context = condition_context(self.unet.null_cond, p, x_t.shape[0])
        dpm_out = dpm_forward(x_t, x_lr, t, context, self.dpm, taps)
        gspm_out = gspm_forward(x_t, x_lr, t, self.gspm) if self.gspm is not None else None
        return ControlOutputs(dpm=dpm_out, gspm=gspm_out, fused=fuse_control(dpm_out, gspm_out))

    def eps(self, x_t: torch.Tensor, t: torch.Tensor, x_lr: torch.Tensor, p: Optional[torch.Tensor]) -> torch.Tensor:
        """Controlled noise prediction"""
        return self.unet(x_t, t, self.controls(x_t, x_lr, t, p).fused, p)

    # checkpoint mapping

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        return {name: p for name, p in self.named_parameters()}

    def to_checkpoint(self, stage: Stage, trainable: Dict[str, bool], seed: int) -> Checkpoint:
        records = [TensorRecord(name, p.detach().cpu().to(torch.float32).numpy(), trainable.get(name, False))
                   for name, p in self.named_parameters()]
        return Checkpoint(stage=stage, records=records, rng_seed=seed)

    @torch.no_grad()
    def load_checkpoint(self, checkpoint: Checkpoint) -> List[str]:
        """Copy matching tensors in; returns the model names the checkpoint did not cover"""
        own = self.named_tensors()
        loaded = set()
        for record in checkpoint.records:
            target = own.get(record.name)
            if target is None:
                logger.warning(f"Checkpoint tensor {record.name} has no counterpart; skipped")
                continue
            if tuple(target.shape) != tuple(record.dims):
                if ".lora." in record.name:
                    logger.warning(f"LoRA tensor {record.name} shape {record.dims} != {list(target.shape)}; skipped")
                    continue
                raise ValidationError(
                    f"checkpoint tensor {record.name} shape {record.dims} != model {list(target.shape)}")
            target.copy_(torch.from_numpy(record.data.astype("float32")).to(target))
            loaded.add(record.name)
        missing = sorted(set(own) - loaded)
        logger.info(f"Loaded {len(loaded)} tensors from {checkpoint.stage.value} checkpoint "
                    f"({len(missing)} left at init)")
        return missing
