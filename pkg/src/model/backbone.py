"""
ControlSR Tiny Backbone
Epsilon-prediction UNet over two resolution levels (latent, latent/2) with
timestep embedding, attention at the lowest level, an image-condition
cross-attention slot, LoRA-capable decoder and five control injection points.

Injection points, in encoder order (ControlSignals follow the same order):
    0 conv_in   (width,   L)     1 enc1  (width,   L)
    2 down      (width,   L/2)   3 enc2  (2*width, L/2)
    4 middle    (2*width, L/2)
"""
import logging
import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ValidationError
from .lora import LoRAConv2d, LoRALinear
from .wxattn import attend

logger = logging.getLogger(__name__)

INJECTION_POINTS = 5
ENCODER_PREFIXES = ("time_embed", "conv_in", "enc1", "down", "enc2", "enc2_attn", "mid1", "mid_attn", "mid2")


def norm_groups(channels: int) -> int:
    return math.gcd(channels, 8)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding (B,) -> (B, dim)"""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv twice with an additive timestep projection"""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, lora_rank: int = 0, lora_scale: float = 1.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = LoRAConv2d(in_ch, out_ch, 3, rank=lora_rank, scale=lora_scale)
        self.temb = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(norm_groups(out_ch), out_ch)
        self.conv2 = LoRAConv2d(out_ch, out_ch, 3, rank=lora_rank, scale=lora_scale)
        self.skip = LoRAConv2d(in_ch, out_ch, 1, rank=lora_rank, scale=lora_scale) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class AttentionBlock(nn.Module):
    """Self-attention followed by cross-attention to the condition tokens"""

    def __init__(self, channels: int, cond_dim: int, heads: int, lora_rank: int = 0, lora_scale: float = 1.0):
        super().__init__()
        if channels % heads:
            raise ValidationError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        lin = lambda i, o: LoRALinear(i, o, rank=lora_rank, scale=lora_scale)
        self.norm1 = nn.GroupNorm(norm_groups(channels), channels)
        self.to_qkv = lin(channels, 3 * channels)
        self.proj_self = lin(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.to_q = lin(channels, channels)
        self.to_k = lin(cond_dim, channels)
        self.to_v = lin(cond_dim, channels)
        self.proj_cross = lin(channels, channels)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def _join(self, t: torch.Tensor) -> torch.Tensor:
        b, h, n, d = t.shape
        return t.transpose(1, 2).reshape(b, n, h * d)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        tokens = self.norm1(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q, k, v = self.to_qkv(tokens).chunk(3, dim=-1)
        out, _ = attend(self._split(q), self._split(k), self._split(v))
        h = x.flatten(2).transpose(1, 2) + self.proj_self(self._join(out))

        q = self.to_q(self.norm2(h))
        out, _ = attend(self._split(q), self._split(self.to_k(context)), self._split(self.to_v(context)))
        h = h + self.proj_cross(self._join(out))
        return h.transpose(1, 2).reshape(b, c, hh, ww)


class ConditionEmbedder(nn.Module):
    """Four-layer conv stack + global average pool -> condition vector p.

    Stands in for a pretrained image encoder. The output projection starts at
    zero so p = 0 when control training begins.
    """

    def __init__(self, width: int, cond_dim: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(3, width, 3, padding=1),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
        ])
        self.proj = nn.Linear(2 * width, cond_dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, lr_images: torch.Tensor) -> torch.Tensor:
        h = lr_images
        for conv in self.convs:
            h = F.silu(conv(h))
        return self.proj(h.mean(dim=(2, 3)))


def embed_condition(lr_images: torch.Tensor, embedder: ConditionEmbedder) -> torch.Tensor:
    """ConditionVector p for a batch of LR images, (B, cond_dim)"""
    if lr_images.dim() != 4 or lr_images.shape[1] != 3:
        raise ValidationError(f"expected (B, 3, h, w) LR images, got {tuple(lr_images.shape)}")
    return embedder(lr_images)


def condition_context(null_cond: torch.Tensor, p: Optional[torch.Tensor], batch: int) -> torch.Tensor:
    """Two condition tokens [null, null + p]; p = None means unconditional"""
    null = null_cond.expand(batch, -1)
    cond = null if p is None else null + p
    return torch.stack([null, cond], dim=1)


def inject_control(skip: torch.Tensor, control: torch.Tensor) -> torch.Tensor:
    """skip + c_k"""
    if skip.shape != control.shape:
        raise ValidationError(f"control {tuple(control.shape)} does not match skip {tuple(skip.shape)}")
    return skip + control


class TinyUNet(nn.Module):
    """Two-level epsilon-prediction UNet"""

    def __init__(self, latent_channels: int = 4, width: int = 64, time_dim: int = 128, cond_dim: int = 128,
                 heads: int = 4, lora_rank: int = 16, lora_scale: float = 1.0):
        super().__init__()
        w = width
        self.time_dim = time_dim
        self.time_embed = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.null_cond = nn.Parameter(torch.randn(cond_dim) * 0.02)

        self.conv_in = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.enc1 = ResBlock(w, w, time_dim)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w, 2 * w, time_dim)
        self.enc2_attn = AttentionBlock(2 * w, cond_dim, heads)
        self.mid1 = ResBlock(2 * w, 2 * w, time_dim)
        self.mid_attn = AttentionBlock(2 * w, cond_dim, heads)
        self.mid2 = ResBlock(2 * w, 2 * w, time_dim)

        dec = lambda i, o: ResBlock(i, o, time_dim, lora_rank, lora_scale)
        self.dec1 = dec(4 * w, 2 * w)
        self.dec1_attn = AttentionBlock(2 * w, cond_dim, heads, lora_rank, lora_scale)
        self.dec2 = dec(3 * w, 2 * w)
        self.dec2_attn = AttentionBlock(2 * w, cond_dim, heads, lora_rank, lora_scale)
        self.up = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.dec3 = dec(3 * w, w)
        self.dec4 = dec(2 * w, w)
        self.norm_out = nn.GroupNorm(norm_groups(w), w)
        self.conv_out = nn.Conv2d(w, latent_channels, 3, padding=1)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_embed(timestep_embedding(t, self.time_dim).to(self.null_cond.dtype))

    def skip_shapes(self, latent_shape: Sequence[int]) -> List[torch.Size]:
        b, _, h, w = latent_shape
        c = self.conv_in.out_channels
        return [torch.Size(s) for s in (
            (b, c, h, w), (b, c, h, w), (b, c, h // 2, w // 2), (b, 2 * c, h // 2, w // 2), (b, 2 * c, h // 2, w // 2))]

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, controls: Optional[Sequence[torch.Tensor]] = None,
                p: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x_t.dim() != 4 or x_t.shape[-1] % 2 or x_t.shape[-2] % 2:
            raise ValidationError(f"latent must be (B, C, h, w) with even h, w; got {tuple(x_t.shape)}")
        if controls is not None and len(controls) != INJECTION_POINTS:
            raise ValidationError(f"expected {INJECTION_POINTS} control signals, got {len(controls)}")
        b = x_t.shape[0]
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(b)
        temb = self.embed_time(t)
        context = condition_context(self.null_cond, p, b)

        h0 = self.conv_in(x_t)
        h1 = self.enc1(h0, temb)
        h2 = self.down(h1)
        h3 = self.enc2_attn(self.enc2(h2, temb), context)
        h = self.mid2(self.mid_attn(self.mid1(h3, temb), context), temb)

        skips = [h0, h1, h2, h3]
        if controls is not None:
            h = inject_control(h, controls[4])
            skips = [inject_control(s, c) for s, c in zip(skips, controls[:4])]

        h = self.dec1_attn(self.dec1(torch.cat([h, skips[3]], dim=1), temb), context)
        h = self.dec2_attn(self.dec2(torch.cat([h, skips[2]], dim=1), temb), context)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec3(torch.cat([h, skips[1]], dim=1), temb)
        h = self.dec4(torch.cat([h, skips[0]], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_eps(x_t: torch.Tensor, t, controls: Optional[Sequence[torch.Tensor]], p: Optional[torch.Tensor],
                unet: TinyUNet) -> torch.Tensor:
    """epsilon-hat(x_t, x_c, p, t)"""
    return unet(x_t, t, controls, p)
