"""
ControlSR Parameter Store
Named parameter registry with per-stage freeze tables and a freeze audit.

Trainable sets:
    vae       vae.* (adapters excluded)
    backbone  unet.* (adapters excluded)
    control   dpm.*, gspm.*, cond.*, VAE-encoder adapters, UNet adapters
"""
import logging
from typing import Callable, Dict, List

import torch
import torch.nn as nn

from src.errors import FreezeViolation
from src.storage.checkpoint import Stage

logger = logging.getLogger(__name__)


def is_adapter(name: str) -> bool:
    return ".lora." in name


_FREEZE_TABLE: Dict[Stage, Callable[[str], bool]] = {
    Stage.VAE: lambda n: n.startswith("vae.") and not is_adapter(n),
    Stage.BACKBONE: lambda n: n.startswith("unet.") and not is_adapter(n),
    Stage.CONTROL: lambda n: (
        n.startswith(("dpm.", "gspm.", "cond."))
        or (n.startswith("vae.encoder.") and is_adapter(n))
        or (n.startswith("unet.") and is_adapter(n))
    ),
}


def is_trainable(name: str, stage: Stage) -> bool:
    return _FREEZE_TABLE[stage](name)


class ParamStore:
    """Name -> parameter map of one model with trainable flags for the active stage"""

    def __init__(self, model: nn.Module, stage: Stage):
        self.params: Dict[str, nn.Parameter] = dict(model.named_parameters())
        self.stage = stage
        self.apply_stage(stage)

    def apply_stage(self, stage: Stage) -> None:
        self.stage = stage
        for name, p in self.params.items():
            p.requires_grad_(is_trainable(name, stage))
        logger.info(f"Stage {stage.value}: {len(self.trainable_names())} trainable / "
                    f"{len(self.params)} tensors")

    def flags(self) -> Dict[str, bool]:
        return {name: is_trainable(name, self.stage) for name in self.params}

    def trainable_names(self) -> List[str]:
        return [n for n in self.params if is_trainable(n, self.stage)]

    def frozen_names(self) -> List[str]:
        return [n for n in self.params if not is_trainable(n, self.stage)]

    def trainable(self) -> List[nn.Parameter]:
        return [self.params[n] for n in self.trainable_names()]

    def snapshot_frozen(self) -> Dict[str, torch.Tensor]:
        return {n: self.params[n].detach().clone() for n in self.frozen_names()}

    def audit(self, snapshot: Dict[str, torch.Tensor]) -> None:
        """Raise FreezeViolation if any frozen tensor moved since `snapshot`"""
        for name, before in snapshot.items():
            delta = float((self.params[name].detach() - before).abs().max())
            if delta != 0.0:
                raise FreezeViolation(f"frozen tensor {name} changed by {delta:.3g} in stage {self.stage.value}")
