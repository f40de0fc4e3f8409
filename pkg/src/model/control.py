"""
ControlSR Control Branches
DPM: trainable copy of the backbone encoder + middle with window
cross-attention against x_lr after each encoder block.
GSPM: the same topology with every attention block removed.
Both tap their features through zero-initialized 1x1 convolutions; the two
signal lists are summed into ControlSignals.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from src.errors import ValidationError
from .backbone import INJECTION_POINTS, AttentionBlock, ResBlock, TinyUNet, timestep_embedding
from .wxattn import WindowCrossAttention

logger = logging.getLogger(__name__)

ControlSignals = List[torch.Tensor]


class ZeroConv(nn.Conv2d):
    """1x1 convolution with weight and bias initialized to zero"""

    def __init__(self, channels: int):
        super().__init__(channels, channels, 1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ControlBranch(nn.Module):
    """Encoder + middle copy producing one signal per injection point.

    attention=False drops every attention block (GSPM);
    window_attention adds WindowCrossAttention after enc1 and after enc2 (DPM).
    """

    def __init__(self, latent_channels: int = 4, width: int = 64, time_dim: int = 128, cond_dim: int = 128,
                 heads: int = 4, attention: bool = True, window_attention: bool = False,
                 key_window: int = 4, partition: bool = True):
        super().__init__()
        w = width
        self.time_dim = time_dim
        self.attention = attention
        self.window_attention = window_attention
        self.time_embed = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.hint = nn.Sequential(
            nn.Conv2d(latent_channels, w, 3, padding=1), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1))

        self.conv_in = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.enc1 = ResBlock(w, w, time_dim)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w, 2 * w, time_dim)
        self.mid1 = ResBlock(2 * w, 2 * w, time_dim)
        self.mid2 = ResBlock(2 * w, 2 * w, time_dim)
        if attention:
            self.enc2_attn = AttentionBlock(2 * w, cond_dim, heads)
            self.mid_attn = AttentionBlock(2 * w, cond_dim, heads)
        if window_attention:
            self.wx1 = WindowCrossAttention(w, latent_channels, heads, key_window, partition)
            self.wx2 = WindowCrossAttention(2 * w, latent_channels, heads, key_window, partition)
        self.zero = nn.ModuleList([ZeroConv(c) for c in (w, w, w, 2 * w, 2 * w)])

    @classmethod
    def from_backbone(cls, unet: TinyUNet, **kwargs) -> "ControlBranch":
        """Build a branch shaped like `unet` and copy its encoder weights"""
        branch = cls(latent_channels=unet.conv_in.in_channels, width=unet.conv_in.out_channels,
                     time_dim=unet.time_dim, cond_dim=unet.null_cond.shape[0],
                     heads=unet.enc2_attn.heads, **kwargs)
        branch.copy_encoder(unet)
        return branch

    @torch.no_grad()
    def copy_encoder(self, unet: TinyUNet) -> int:
        """Copy every tensor whose name and shape also exist in the backbone"""
        source = unet.state_dict()
        own = self.state_dict()
        copied = 0
        for name, tensor in own.items():
            if name in source and source[name].shape == tensor.shape:
                tensor.copy_(source[name])
                copied += 1
        logger.debug(f"Copied {copied} encoder tensors from backbone")
        return copied

    def forward(self, x_t: torch.Tensor, x_lr: torch.Tensor, t: torch.Tensor,
                context: Optional[torch.Tensor] = None,
                taps: Optional[Dict[str, torch.Tensor]] = None) -> ControlSignals:
        if x_t.shape[0] != x_lr.shape[0] or x_t.shape[-2:] != x_lr.shape[-2:]:
            raise ValidationError(
                f"x_t {tuple(x_t.shape)} and x_lr {tuple(x_lr.shape)} must share batch and latent grid")
        if self.attention and context is None:
            raise ValidationError("attention branch needs a condition context")
        b = x_t.shape[0]
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(b)
        temb = self.time_embed(timestep_embedding(t, self.time_dim).to(x_t.dtype))

        h0 = self.conv_in(x_t) + self.hint(x_lr)
        h1 = self.enc1(h0, temb)
        if self.window_attention:
            if taps is not None:
                taps["wx1.pre"] = h1
            h1 = self.wx1(h1, x_lr)
            if taps is not None:
                taps["wx1.post"] = h1
        h2 = self.down(h1)
        h3 = self.enc2(h2, temb)
        if self.attention:
            h3 = self.enc2_attn(h3, context)
        if self.window_attention:
            if taps is not None:
                taps["wx2.pre"] = h3
            h3 = self.wx2(h3, x_lr)
            if taps is not None:
                taps["wx2.post"] = h3
        h = self.mid1(h3, temb)
        if self.attention:
            h = self.mid_attn(h, context)
        h = self.mid2(h, temb)
        return [zero(f) for zero, f in zip(self.zero, (h0, h1, h2, h3, h))]


def dpm_forward(x_t: torch.Tensor, x_lr: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
                dpm: ControlBranch, taps: Optional[Dict[str, torch.Tensor]] = None) -> ControlSignals:
    """Detail-preserving signals; `context` is the [null, null + p] token pair"""
    return dpm(x_t, x_lr, t, context, taps)


def gspm_forward(x_t: torch.Tensor, x_lr: torch.Tensor, t: torch.Tensor, gspm: ControlBranch) -> ControlSignals:
    """Structure-preserving signals; no attention and no condition vector"""
    if gspm.attention or gspm.window_attention:
        raise ValidationError("GSPM branch must not contain attention")
    return gspm(x_t, x_lr, t)


def fuse_control(dpm_out: Sequence[torch.Tensor], gspm_out: Optional[Sequence[torch.Tensor]]) -> ControlSignals:
    """Elementwise sum per injection point"""
    if gspm_out is None:
        return list(dpm_out)
    if len(dpm_out) != len(gspm_out):
        raise ValidationError(f"signal count mismatch: {len(dpm_out)} vs {len(gspm_out)}")
    fused = []
    for k, (a, b) in enumerate(zip(dpm_out, gspm_out)):
        if a.shape != b.shape:
            raise ValidationError(f"signal {k}: shape {tuple(a.shape)} vs {tuple(b.shape)}")
        fused.append(a + b)
    return fused


def check_signals(signals: Sequence[torch.Tensor], unet: TinyUNet, latent_shape) -> None:
    """Signals must match the decoder skip shapes one for one"""
    expected = unet.skip_shapes(latent_shape)
    if len(signals) != INJECTION_POINTS:
        raise ValidationError(f"expected {INJECTION_POINTS} signals, got {len(signals)}")
    for k, (sig, shape) in enumerate(zip(signals, expected)):
        if sig.shape != shape:
            raise ValidationError(f"signal {k}: shape {tuple(sig.shape)}, skip {tuple(shape)}")


def attention_parameter_names(branch: nn.Module) -> List[str]:
    """Names of parameters belonging to attention layers of any kind"""
    return [name for name, _ in branch.named_parameters()
            if name.split(".")[0] in ("enc2_attn", "mid_attn", "wx1", "wx2")]


def window_attention_layers(branch: nn.Module) -> List[Tuple[str, WindowCrossAttention]]:
    return [(name, m) for name, m in branch.named_modules() if isinstance(m, WindowCrossAttention)]
