"""Diagonal state space models: discretization, scans, the LTI kernel, and
the selective (input-dependent) stage block.

Shapes: inputs are (K, P, D) - K independent sequences of length P with D
channels. Every channel carries ``N`` diagonal states, so per-step
coefficients are (K, P, D, N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from bytestack.numerics import cumulative_scan
from bytestack.stages.layers import FeedForward, RMSNorm

_SERIES_CUTOFF = 1e-6


def zoh_discretize(a, b, delta):
    """Zero-order hold for a diagonal system: returns (a_bar, b_bar).

    a_bar = exp(delta a); b_bar = (delta a)^-1 (exp(delta a) - 1) delta b.
    Works on floats or tensors. Below |delta a| < 1e-6 the ratio
    (e^z - 1)/z is replaced by its series 1 + z/2 + z^2/6.
    """
    tensors = [v for v in (a, b, delta) if isinstance(v, torch.Tensor)]
    if tensors:
        a, b, delta = (torch.as_tensor(v, dtype=tensors[0].dtype) for v in (a, b, delta))
        z = delta * a
        small = z.abs() < _SERIES_CUTOFF
        safe = torch.where(small, torch.ones_like(z), z)
        ratio = torch.where(small, 1 + z / 2 + z * z / 6, torch.expm1(safe) / safe)
        return torch.exp(z), ratio * delta * b
    z = delta * a
    ratio = 1 + z / 2 + z * z / 6 if abs(z) < _SERIES_CUTOFF else math.expm1(z) / z
    return math.exp(z), ratio * delta * b


@dataclass
class LtiParams:
    """Discrete, time-invariant parameters: a_bar, b_bar, c are (D, N); d is (D,)."""

    a_bar: torch.Tensor
    b_bar: torch.Tensor
    c: torch.Tensor
    d: torch.Tensor

    @classmethod
    def from_continuous(cls, a, b, c, d, delta) -> "LtiParams":
        a_bar, b_bar = zoh_discretize(a, b, delta.unsqueeze(-1) if delta.dim() == 1 else delta)
        return cls(a_bar, b_bar, c, d)


def _lti_coefficients(x: torch.Tensor, p: LtiParams):
    k, length, _ = x.shape
    a = p.a_bar.expand(k, length, *p.a_bar.shape)
    bx = p.b_bar * x.unsqueeze(-1)
    c = p.c.expand(k, length, *p.c.shape)
    return a, bx, c


def _readout(h: torch.Tensor, c: torch.Tensor, d: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return (h * c).sum(-1) + d * x


def scan_sequential(a: torch.Tensor, bx: torch.Tensor) -> torch.Tensor:
    """h_t = a_t h_{t-1} + bx_t along axis 1, one step at a time."""
    h = torch.zeros_like(bx[:, 0])
    states = []
    for t in range(bx.shape[1]):
        h = a[:, t] * h + bx[:, t]
        states.append(h)
    return torch.stack(states, dim=1)


def scan_associative(a: torch.Tensor, bx: torch.Tensor) -> torch.Tensor:
    return cumulative_scan(a, bx, dim=1)


def ssm_scan_sequential(x: torch.Tensor, params, mode: str = "selective") -> torch.Tensor:
    a, bx, c, d = _coefficients(x, params, mode)
    return _readout(scan_sequential(a, bx), c, d, x)


def ssm_scan_associative(x: torch.Tensor, params, mode: str = "selective") -> torch.Tensor:
    a, bx, c, d = _coefficients(x, params, mode)
    return _readout(scan_associative(a, bx), c, d, x)


def _coefficients(x, params, mode):
    if mode == "lti":
        if not isinstance(params, LtiParams):
            raise TypeError("lti mode needs LtiParams")
        a, bx, c = _lti_coefficients(x, params)
        return a, bx, c, params.d
    if mode == "selective":
        if not isinstance(params, SelectiveSSM):
            raise TypeError("selective mode needs a SelectiveSSM")
        a, bx, c = params.coefficients(x)
        return a, bx, c, params.d
    raise ValueError(f"unknown scan mode {mode!r}")


def ssm_kernel_lti(params: LtiParams, length: int) -> torch.Tensor:
    """Convolution kernel K[d, j] = sum_n c a_bar^j b_bar, shape (D, length)."""
    if not isinstance(params, LtiParams):
        raise TypeError("the convolution kernel exists only for time-invariant parameters")
    j = torch.arange(length, dtype=params.a_bar.dtype)
    powers = params.a_bar.unsqueeze(-1) ** j  # (D, N, L)
    return (params.c.unsqueeze(-1) * powers * params.b_bar.unsqueeze(-1)).sum(1)


def causal_conv(kernel: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """y[k, t, d] = sum_{j<=t} kernel[d, j] x[k, t-j, d]."""
    k, length, dim = x.shape
    signal = x.permute(0, 2, 1).reshape(1, k * dim, length)
    signal = F.pad(signal, (length - 1, 0))
    weight = kernel[:, :length].flip(-1).repeat(k, 1).unsqueeze(1)
    y = F.conv1d(signal, weight, groups=k * dim)
    return y.reshape(k, dim, length).permute(0, 2, 1)


def ssm_convolve_lti(x: torch.Tensor, params: LtiParams) -> torch.Tensor:
    kernel = ssm_kernel_lti(params, x.shape[1])
    return causal_conv(kernel, x) + params.d * x


class SelectiveSSM(nn.Module):
    """Diagonal selective SSM: delta_t, B_t and C_t are projections of x_t.

    a_bar_t = exp(delta_t a) (exact ZOH); b_bar_t = delta_t B_t (first order).
    """

    def __init__(self, width: int, state_size: int = 16, scan: str = "associative"):
        super().__init__()
        self.width = width
        self.state_size = state_size
        self.scan = scan
        self.log_a = nn.Parameter(torch.log(torch.arange(1, state_size + 1, dtype=torch.float32)).repeat(width, 1))
        self.d = nn.Parameter(torch.ones(width))
        self.to_delta = nn.Linear(width, width)
        self.to_b = nn.Linear(width, state_size, bias=False)
        self.to_c = nn.Linear(width, state_size, bias=False)
        self.reset_delta_bias()

    @torch.no_grad()
    def reset_delta_bias(self) -> None:
        # softplus^-1 of step sizes spread log-uniformly over [1e-3, 1e-1]
        dt = torch.exp(torch.linspace(math.log(1e-3), math.log(1e-1), self.width))
        self.to_delta.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    @property
    def a(self) -> torch.Tensor:
        return -torch.exp(self.log_a)

    def coefficients(self, x: torch.Tensor):
        delta = F.softplus(self.to_delta(x)).unsqueeze(-1)  # (K, P, D, 1)
        a_bar = torch.exp(delta * self.a)
        bx = delta * self.to_b(x).unsqueeze(-2) * x.unsqueeze(-1)
        c = self.to_c(x).unsqueeze(-2)
        return a_bar, bx, c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a_bar, bx, c = self.coefficients(x)
        h = scan_associative(a_bar, bx) if self.scan == "associative" else scan_sequential(a_bar, bx)
        return _readout(h, c, self.d, x)


class SsmBlock(nn.Module):
    def __init__(self, width, state_size, ff_mult, dropout, scan):
        super().__init__()
        self.norm1 = RMSNorm(width)
        self.ssm = SelectiveSSM(width, state_size, scan)
        self.out = nn.Linear(width, width)
        self.norm2 = RMSNorm(width)
        self.ff = FeedForward(width, ff_mult, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.out(self.ssm(self.norm1(x))))
        return x + self.ff(self.norm2(x))


class SsmStage(nn.Module):
    """Stack of pre-norm selective-SSM blocks; (K, P, D) -> (K, P, D)."""

    def __init__(self, width: int, layers: int, state_size: int = 16, ff_mult: int = 2,
                 dropout: float = 0.0, scan: str = "associative"):
        super().__init__()
        self.blocks = nn.ModuleList(SsmBlock(width, state_size, ff_mult, dropout, scan) for _ in range(layers))
        self.norm = RMSNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)
