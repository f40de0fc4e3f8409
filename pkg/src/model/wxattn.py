"""
ControlSR Window Cross-Attention
Window partition/merge and window-based cross-attention from diffusion
features (queries, window side S) to latent LR embeddings (keys/values,
window side s), with a relative position bias aligned across the two grids.

    out = x_d + proj( Softmax(Q K^T / sqrt(d_k) + B) V )
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ValidationError

logger = logging.getLogger(__name__)


def window_partition(x: torch.Tensor, side: int) -> torch.Tensor:
    """(B, C, H, W) -> (B * N, side^2, C); windows and positions row-major"""
    b, c, h, w = x.shape
    if side < 1 or h % side or w % side:
        raise ValidationError(f"feature {h}x{w} not divisible by window side {side}")
    x = x.reshape(b, c, h // side, side, w // side, side)
    x = x.permute(0, 2, 4, 3, 5, 1)  # (B, nH, nW, side, side, C)
    return x.reshape(b * (h // side) * (w // side), side * side, c)


def window_merge(windows: torch.Tensor, side: int, height: int, width: int) -> torch.Tensor:
    """(B * N, side^2, C) -> (B, C, H, W); exact inverse of window_partition"""
    if side < 1 or height % side or width % side:
        raise ValidationError(f"feature {height}x{width} not divisible by window side {side}")
    n_windows = (height // side) * (width // side)
    bn, tokens, c = windows.shape
    if tokens != side * side or bn % n_windows:
        raise ValidationError(
            f"{bn} windows of {tokens} tokens inconsistent with {height}x{width} / side {side}")
    b = bn // n_windows
    x = windows.reshape(b, height // side, width // side, side, side, c)
    x = x.permute(0, 5, 1, 3, 2, 4)  # (B, C, nH, side, nW, side)
    return x.reshape(b, c, height, width)


@lru_cache(maxsize=64)
def aligned_index(S: int, s: int) -> Tuple[np.ndarray, np.ndarray]:
    """Table row/column indices (S^2, s^2) for the aligned relative bias"""
    q = np.arange(S)
    # query coordinate on the key grid, rounded half up
    mapped = np.floor(q * s / S + 0.5).astype(np.int64)
    k = np.arange(s)
    delta = np.clip(k[None, :] - mapped[:, None], -(s - 1), s - 1) + (s - 1)  # (S, s)
    return _grid(delta, S, s, axis="y"), _grid(delta, S, s, axis="x")


def _grid(delta: np.ndarray, S: int, s: int, axis: str) -> np.ndarray:
    # delta[i, ki] is the offset along one axis; expand to (qy, qx, ky, kx)
    if axis == "y":
        full = np.broadcast_to(delta[:, None, :, None], (S, S, s, s))
    else:
        full = np.broadcast_to(delta[None, :, None, :], (S, S, s, s))
    return np.ascontiguousarray(full).reshape(S * S, s * s)


def aligned_bias(table: torch.Tensor, S: int, s: int) -> torch.Tensor:
    """B[q, k] = table[dy + s - 1, dx + s - 1] for query windows of side S, key windows of side s.

    Query (i, j) maps to key-grid coordinates (round(i*s/S), round(j*s/S)); the
    offset to each key position is clamped to [-(s-1), s-1]. `table` is
    (2s-1, 2s-1) or (heads, 2s-1, 2s-1); the result is (S^2, s^2) or
    (heads, S^2, s^2).
    """
    if table.shape[-2:] != (2 * s - 1, 2 * s - 1):
        raise ValidationError(f"bias table {tuple(table.shape)} does not match key window side {s}")
    rows, cols = aligned_index(S, s)
    rows = torch.from_numpy(rows).to(table.device)
    cols = torch.from_numpy(cols).to(table.device)
    return table[..., rows, cols]


@dataclass(frozen=True)
class WindowSpec:
    """Query window side S, key window side s, window count N"""
    S: int
    s: int
    N: int

    @classmethod
    def resolve(cls, feature_hw: Tuple[int, int], lr_hw: Tuple[int, int], key_window: int,
                partition: bool = True) -> "WindowSpec":
        """Pick S so the feature grid and the LR grid yield the same N"""
        (fh, fw), (lh, lw) = feature_hw, lr_hw
        if fh != fw or lh != lw:
            raise ValidationError(f"square grids required, got feature {fh}x{fw}, LR {lh}x{lw}")
        s = lh if not partition else min(key_window, lh)
        if lh % s:
            raise ValidationError(f"LR latent side {lh} not divisible by key window {s}")
        per_side = lh // s
        if fh % per_side:
            raise ValidationError(f"feature side {fh} cannot hold {per_side} windows per side")
        return cls(S=fh // per_side, s=s, N=per_side * per_side)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
           bias: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """softmax(q k^T / sqrt(d) + bias) v over (..., tokens, d); returns (out, weights)"""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    weights = logits.softmax(dim=-1)
    return weights @ v, weights


class WindowCrossAttention(nn.Module):
    """Pre-norm window cross-attention from features to x_lr with residual"""

    def __init__(self, channels: int, lr_channels: int, heads: int, key_window: int, partition: bool = True):
        super().__init__()
        if channels % heads:
            raise ValidationError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.key_window = key_window
        self.partition = partition
        self.norm = nn.GroupNorm(math.gcd(channels, 8), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(lr_channels, channels)
        self.to_v = nn.Linear(lr_channels, channels)
        self.proj = nn.Linear(channels, channels)
        # (heads, 2s-1, 2s-1); with partition off the table grows with the LR grid
        self.bias_table = nn.Parameter(torch.zeros(heads, 2 * key_window - 1, 2 * key_window - 1))

    def spec(self, x_d: torch.Tensor, x_lr: torch.Tensor) -> WindowSpec:
        return WindowSpec.resolve(tuple(x_d.shape[-2:]), tuple(x_lr.shape[-2:]),
                                  self.key_window, self.partition)

    def _table(self, s: int) -> torch.Tensor:
        side = self.bias_table.shape[-1]
        if 2 * s - 1 == side:
            return self.bias_table
        if 2 * s - 1 < side:
            # smaller key window: central crop keeps offsets aligned
            off = (side - (2 * s - 1)) // 2
            return self.bias_table[:, off:off + 2 * s - 1, off:off + 2 * s - 1]
        # larger key window: offsets beyond the table reuse the edge entries
        pad = (2 * s - 1 - side) // 2
        return F.pad(self.bias_table.unsqueeze(0), (pad, pad, pad, pad), mode="replicate").squeeze(0)

    def forward(self, x_d: torch.Tensor, x_lr: torch.Tensor, return_weights: bool = False):
        if x_d.shape[0] != x_lr.shape[0]:
            raise ValidationError(f"batch mismatch: features {x_d.shape[0]}, x_lr {x_lr.shape[0]}")
        spec = self.spec(x_d, x_lr)
        b, c, h, w = x_d.shape
        d = c // self.heads

        q = window_partition(self.to_q(self.norm(x_d).permute(0, 2, 3, 1)).permute(0, 3, 1, 2), spec.S)
        lr_tokens = x_lr.permute(0, 2, 3, 1)
        k = window_partition(self.to_k(lr_tokens).permute(0, 3, 1, 2), spec.s)
        v = window_partition(self.to_v(lr_tokens).permute(0, 3, 1, 2), spec.s)

        def heads(t):  # (BN, L, C) -> (BN, heads, L, d)
            return t.reshape(t.shape[0], t.shape[1], self.heads, d).transpose(1, 2)

        bias = aligned_bias(self._table(spec.s), spec.S, spec.s)  # (heads, S^2, s^2)
        out, weights = attend(heads(q), heads(k), heads(v), bias)
        out = out.transpose(1, 2).reshape(q.shape[0], q.shape[1], c)
        out = self.proj(out)
        out = x_d + window_merge(out, spec.S, h, w)
        return (out, weights) if return_weights else out
