"""
ControlSR Low-Rank Adaptation
LoRA adapters for linear and 1x1/3x3 convolution layers.

    out = W x + scale * B (A x),   A: (r, in_features), B: (out_features, r)

A ~ N(0, 0.02^2), B = 0 at init, so an adapted layer starts as the frozen one.
For a k x k convolution in_features = in_channels * k * k: A runs as a k x k
convolution with the base layer's stride/padding, B as a 1x1 convolution.
"""
import logging
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ValidationError

logger = logging.getLogger(__name__)

LORA_INIT_STD = 0.02


class LoraAdapter(nn.Module):
    """Low-rank factors A (down) and B (up) for one layer"""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float = 1.0,
                 kernel_size: int = 1, stride: int = 1, padding: int = 0):
        super().__init__()
        if rank < 1 or rank > min(in_features, out_features):
            raise ValidationError(
                f"LoRA rank {rank} must be in [1, min({in_features}, {out_features})]")
        self.rank = rank
        self.scale = scale
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.A = nn.Parameter(torch.empty(rank, in_features))
        self.B = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.A, std=LORA_INIT_STD)

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    def delta(self) -> torch.Tensor:
        """scale * B A, shaped (out_features, in_features)"""
        return self.scale * (self.B @ self.A)


def lora_apply(base_out: torch.Tensor, x: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """base_out + scale * B(A(x)); x is (..., in) for linear layers, (B, C, H, W) for convolutions"""
    if x.dim() == 4:
        k = adapter.kernel_size
        if x.shape[1] * k * k != adapter.in_features:
            raise ValidationError(
                f"LoRA expects {adapter.in_features} input features, got {x.shape[1]} channels x {k}x{k}")
        down = F.conv2d(x, adapter.A.view(adapter.rank, x.shape[1], k, k),
                        stride=adapter.stride, padding=adapter.padding)
        up = F.conv2d(down, adapter.B.view(adapter.out_features, adapter.rank, 1, 1))
    else:
        if x.shape[-1] != adapter.in_features:
            raise ValidationError(f"LoRA expects {adapter.in_features} input features, got {x.shape[-1]}")
        up = F.linear(F.linear(x, adapter.A), adapter.B)
    if up.shape != base_out.shape:
        raise ValidationError(f"LoRA output {tuple(up.shape)} does not match base output {tuple(base_out.shape)}")
    return base_out + adapter.scale * up


def lora_merge(weight: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """W + scale * B A reshaped to W. Merging twice adds the update twice."""
    if weight.shape[0] != adapter.out_features or weight[0].numel() != adapter.in_features:
        raise ValidationError(
            f"weight {tuple(weight.shape)} incompatible with adapter "
            f"({adapter.out_features} x {adapter.in_features})")
    return weight + adapter.delta().reshape(weight.shape).to(weight)


def _effective_rank(rank: int, in_features: int, out_features: int) -> int:
    return max(0, min(rank, in_features, out_features))


class LoRALinear(nn.Module):
    """nn.Linear with an optional adapter; rank 0 means no adapter"""

    def __init__(self, in_features: int, out_features: int, rank: int = 0, scale: float = 1.0, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        r = _effective_rank(rank, in_features, out_features)
        self.lora: Optional[LoraAdapter] = LoraAdapter(in_features, out_features, r, scale) if r else None
        self.merged = False

    def forward(self, x: torch.Tensor, use_lora: bool = True) -> torch.Tensor:
        out = self.base(x)
        if self.lora is not None and use_lora and not self.merged:
            out = lora_apply(out, x, self.lora)
        return out

    @torch.no_grad()
    def merge(self) -> None:
        if self.lora is None or self.merged:
            return
        self.base.weight.copy_(lora_merge(self.base.weight, self.lora))
        self.merged = True


class LoRAConv2d(nn.Module):
    """nn.Conv2d with an optional adapter; rank 0 means no adapter"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, rank: int = 0, scale: float = 1.0):
        super().__init__()
        padding = kernel_size // 2 if padding is None else padding
        self.base = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)
        in_features = in_channels * kernel_size * kernel_size
        r = _effective_rank(rank, in_features, out_channels)
        self.lora: Optional[LoraAdapter] = LoraAdapter(
            in_features, out_channels, r, scale, kernel_size=kernel_size, stride=stride, padding=padding
        ) if r else None
        self.merged = False

    def forward(self, x: torch.Tensor, use_lora: bool = True) -> torch.Tensor:
        out = self.base(x)
        if self.lora is not None and use_lora and not self.merged:
            out = lora_apply(out, x, self.lora)
        return out

    @torch.no_grad()
    def merge(self) -> None:
        if self.lora is None or self.merged:
            return
        self.base.weight.copy_(lora_merge(self.base.weight, self.lora))
        self.merged = True


LoRALayer = Union[LoRALinear, LoRAConv2d]


def adapted_layers(module: nn.Module):
    """All LoRA-capable layers below `module` that carry an adapter"""
    return [m for m in module.modules() if isinstance(m, (LoRALinear, LoRAConv2d)) and m.lora is not None]
