"""
ControlSR Tiny VAE
Convolutional autoencoder: RGB (H, W) <-> 4-channel latent (H/8, W/8).
The encoder carries LoRA adapters on every convolution; routing an LR image
through them yields the latent LR embeddings x_lr.
"""
import logging
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.data.resize import resize_tensor
from src.errors import ValidationError
from .lora import LoRAConv2d

logger = logging.getLogger(__name__)

DOWNSCALE = 8


class VaeEncoder(nn.Module):
    """conv_in, three stride-2 stages, conv_out -> (mean, logvar)"""

    def __init__(self, widths: Sequence[int], latent_channels: int, lora_rank: int, lora_scale: float):
        super().__init__()
        w0, w1, w2 = widths
        conv = lambda cin, cout, stride=1: LoRAConv2d(cin, cout, 3, stride=stride, rank=lora_rank, scale=lora_scale)
        self.conv_in = conv(3, w0)
        self.stages = nn.ModuleList()
        for cin, cout in ((w0, w0), (w0, w1), (w1, w2)):
            self.stages.append(nn.ModuleList([conv(cin, cout, stride=2), conv(cout, cout)]))
        self.conv_out = conv(w2, 2 * latent_channels)

    def forward(self, x: torch.Tensor, use_lora: bool) -> Tuple[torch.Tensor, torch.Tensor]:
        h = F.silu(self.conv_in(x, use_lora=use_lora))
        for down, refine in self.stages:
            h = F.silu(down(h, use_lora=use_lora))
            h = F.silu(refine(h, use_lora=use_lora))
        mean, logvar = self.conv_out(h, use_lora=use_lora).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


class VaeDecoder(nn.Module):
    """conv_in, three nearest-upsample stages, conv_out -> RGB"""

    def __init__(self, widths: Sequence[int], latent_channels: int):
        super().__init__()
        w0, w1, w2 = widths
        self.conv_in = nn.Conv2d(latent_channels, w2, 3, padding=1)
        self.stages = nn.ModuleList([
            nn.Conv2d(w2, w1, 3, padding=1),
            nn.Conv2d(w1, w0, 3, padding=1),
            nn.Conv2d(w0, w0, 3, padding=1),
        ])
        self.conv_out = nn.Conv2d(w0, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv_in(z))
        for conv in self.stages:
            h = F.silu(conv(F.interpolate(h, scale_factor=2, mode="nearest")))
        return self.conv_out(h)


class TinyVAE(nn.Module):
    """Deterministic-mean autoencoder with a tiny KL term during pretraining"""

    def __init__(self, widths: Sequence[int] = (32, 64, 128), latent_channels: int = 4,
                 lora_rank: int = 16, lora_scale: float = 1.0):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = VaeEncoder(widths, latent_channels, lora_rank, lora_scale)
        self.decoder = VaeDecoder(widths, latent_channels)

    def moments(self, images: torch.Tensor, use_lora: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValidationError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % DOWNSCALE or w % DOWNSCALE:
            raise ValidationError(f"image dims {h}x{w} must be divisible by {DOWNSCALE}")
        return self.encoder(images, use_lora)

    def encode(self, images: torch.Tensor, use_lora: bool = False) -> torch.Tensor:
        """Latent mean; use_lora routes through the encoder adapters"""
        mean, _ = self.moments(images, use_lora)
        return mean

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[1] != self.latent_channels:
            raise ValidationError(
                f"expected (B, {self.latent_channels}, h, w) latent, got {tuple(latent.shape)}")
        return self.decoder(latent)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """RGB images at 8x the latent size, clamped to [0,1]"""
        return self.decode_raw(latent).clamp(0.0, 1.0)

    def encode_lr(self, lr_images: torch.Tensor, scale: int) -> torch.Tensor:
        """x_lr: bicubic-upsample the LR image onto the HR grid, then encode with LoRA"""
        if scale < 1:
            raise ValidationError(f"scale must be >= 1, got {scale}")
        h, w = lr_images.shape[-2:]
        upsampled = lr_images if scale == 1 else resize_tensor(lr_images, h * scale, w * scale)
        return self.encode(upsampled, use_lora=True)


def kl_term(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) averaged over elements"""
    return -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())
