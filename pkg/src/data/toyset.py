"""
ControlSR Toy Pair Set
Fixed, seed-reproducible HR/LR pairs built from synthesized images.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from src.storage.ppm import ImageBuffer, images_to_batch
from src.storage.run_config import DegradeConfig
from .degrade import degrade_image, synth_toy_image

logger = logging.getLogger(__name__)


def image_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, image, purpose)"""
    return np.random.default_rng([seed, index, stream])


@dataclass
class ToyPairs:
    """HR images and their degraded LR counterparts"""
    hr: List[ImageBuffer]
    lr: List[ImageBuffer]

    @classmethod
    def build(cls, count: int, size: int, degrade: DegradeConfig, seed: int) -> "ToyPairs":
        hr = [synth_toy_image(size, image_rng(seed, i, 0)) for i in range(count)]
        lr = [degrade_image(im, degrade, image_rng(degrade.seed + seed, i, 1)) for i, im in enumerate(hr)]
        logger.info(f"Built {count} toy pairs ({size}px HR, x{degrade.scale} LR)")
        return cls(hr=hr, lr=lr)

    def __len__(self) -> int:
        return len(self.hr)

    def batch(self, indices, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
        idx = [int(i) for i in indices]
        return (images_to_batch([self.hr[i] for i in idx], dtype),
                images_to_batch([self.lr[i] for i in idx], dtype))
