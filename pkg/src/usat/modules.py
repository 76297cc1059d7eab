"""Shared neural building blocks.

All sequence modules use channels-first tensors [batch, channels, time].
Normalization is parameter-light layer norm over channels (no running
stats, so train/eval modes behave identically and runs are deterministic).
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


class _ReverseGradient(torch.autograd.Function):
    """Identity forward; backward multiplies the upstream gradient by -lambda."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float) -> torch.Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Gradient reversal: y == x, dL/dx == -lam * dL/dy exactly."""
    if lam <= 0:
        raise ValueError(f"gradient reversal weight must be positive, got {lam}")
    return _ReverseGradient.apply(x, float(lam))


class ChannelLayerNorm(nn.Module):
    """Layer norm over the channel axis of [B, C, T] tensors; 2*C parameters."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ConvStack(nn.Module):
    """Dilated conv stack with per-layer speaker conditioning bias.

    Each layer: conv(k, dilation 2^i) -> +cond -> channel layer norm -> ReLU.
    Used by the posterior encoder, flow coupling nets, and duration predictor.
    """

    def __init__(
        self,
        channels: int,
        num_layers: int,
        kernel: int = 5,
        cond_dim: int | None = None,
    ):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.cond_projs = nn.ModuleList() if cond_dim else None
        for i in range(num_layers):
            dilation = 2 ** i
            pad = (kernel - 1) * dilation // 2
            self.convs.append(
                nn.Conv1d(channels, channels, kernel, padding=pad, dilation=dilation))
            self.norms.append(ChannelLayerNorm(channels))
            if cond_dim:
                self.cond_projs.append(nn.Linear(cond_dim, channels))

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = conv(x)
            if self.cond_projs is not None and cond is not None:
                h = h + self.cond_projs[i](cond).unsqueeze(-1)
            x = F.relu(norm(h))
        return x


class GatedConvStack(nn.Module):
    """Dilated residual stack of gated units, tanh(f) * sigmoid(g).

    Conditioning enters additively inside both gate halves, so its effect on
    the output is multiplicative in the features: strong enough to carry
    speaker identity into the flow couplings. Layer i dilates by 2^i.
    """

    def __init__(
        self,
        channels: int,
        num_layers: int,
        kernel: int = 5,
        cond_dim: int | None = None,
    ):
        super().__init__()
        self.convs = nn.ModuleList()
        self.res_projs = nn.ModuleList()
        self.cond_projs = nn.ModuleList() if cond_dim else None
        for i in range(num_layers):
            dilation = 2 ** i
            pad = (kernel - 1) * dilation // 2
            self.convs.append(nn.Conv1d(
                channels, 2 * channels, kernel, padding=pad, dilation=dilation))
            self.res_projs.append(nn.Conv1d(channels, channels, 1))
            if cond_dim:
                self.cond_projs.append(nn.Linear(cond_dim, 2 * channels))

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        for i, (conv, res) in enumerate(zip(self.convs, self.res_projs)):
            h = conv(x)
            if self.cond_projs is not None and cond is not None:
                h = h + self.cond_projs[i](cond).unsqueeze(-1)
            f, g = h.chunk(2, dim=1)
            x = x + res(torch.tanh(f) * torch.sigmoid(g))
        return x


class Res2Block(nn.Module):
    """Two-scale residual conv block: split channels, chain a dilated conv
    through the second half, merge with 1x1 convs, add the input back."""

    def __init__(self, channels: int, kernel: int = 3, dilation: int = 1):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError("Res2Block needs an even channel count")
        half = channels // 2
        pad = (kernel - 1) * dilation // 2
        self.pre = nn.Conv1d(channels, channels, 1)
        self.branch = nn.Conv1d(half, half, kernel, padding=pad, dilation=dilation)
        self.post = nn.Conv1d(channels, channels, 1)
        self.norm = ChannelLayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.pre(x))
        a, b = h.chunk(2, dim=1)
        b = F.relu(self.branch(b))
        h = self.post(torch.cat([a, b], dim=1))
        return F.relu(self.norm(h + x))


class AttentiveStatsPooling(nn.Module):
    """Attention-weighted mean and standard deviation over time.

    [B, C, T] -> [B, 2*C]; weights come from a small bottleneck scorer and
    are softmax-normalized over the time axis.
    """

    def __init__(self, channels: int, bottleneck: int = 64):
        super().__init__()
        self.pre = nn.Conv1d(channels, bottleneck, 1)
        self.score = nn.Conv1d(bottleneck, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = torch.softmax(self.score(torch.tanh(self.pre(x))), dim=-1)
        mean = torch.sum(x * w, dim=-1)
        var = torch.sum(x * x * w, dim=-1) - mean * mean
        std = torch.sqrt(torch.clamp(var, min=1e-8))
        return torch.cat([mean, std], dim=1)
