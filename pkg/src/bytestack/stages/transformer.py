"""Pre-norm causal Transformer decoder stage."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from bytestack.numerics import softmax_causal_masked
from bytestack.stages.layers import FeedForward, RMSNorm


def rotary_tables(length: int, head_dim: int, base: float = 10000.0, dtype=torch.float32):
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = torch.outer(torch.arange(length, dtype=torch.float64), inv_freq)
    angles = torch.cat([angles, angles], dim=-1)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([-x2, x1], dim=-1)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return x * cos + rotate_half(x) * sin


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, rotary: bool = False, dropout: float = 0.0):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.rotary = rotary
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.proj = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k_, p, d = x.shape
        q, k, v = self.qkv(x).view(k_, p, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if self.rotary:
            cos, sin = rotary_tables(p, self.head_dim, dtype=x.dtype)
            q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = softmax_causal_masked(scores) @ v
        out = out.transpose(1, 2).reshape(k_, p, d)
        return self.drop(self.proj(out))


class TransformerBlock(nn.Module):
    def __init__(self, width, heads, ff_mult, dropout, rotary):
        super().__init__()
        self.norm1 = RMSNorm(width)
        self.attn = CausalSelfAttention(width, heads, rotary, dropout)
        self.norm2 = RMSNorm(width)
        self.ff = FeedForward(width, ff_mult, dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TransformerStage(nn.Module):
    """(K, P, D) -> (K, P, D); position t attends to positions <= t only."""

    def __init__(self, width: int, layers: int, heads: int = 2, ff_mult: int = 2,
                 dropout: float = 0.0, rotary: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(width, heads, ff_mult, dropout, rotary) for _ in range(layers)
        )
        self.norm = RMSNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)
