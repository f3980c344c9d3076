"""Layers shared by both stage families."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from bytestack.numerics import rms_norm


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.up = nn.Linear(width, width * mult)
        self.down = nn.Linear(width * mult, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.down(F.silu(self.up(x))))


class RMSNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.eps = eps

    def forward(self, x):
        return rms_norm(x, self.gain, self.eps)
