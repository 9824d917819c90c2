"""Attention block combining channel, spatial and point-wise attention.

Tensors are NCHW. For an input ``F_in`` of C channels:

* channel attention: ``Ca = sigmoid(MLP(maxpool + avgpool))``, ``CA = Ca * F_in``
* spatial attention: two varied-receptive-field branches on ``CA`` (C/4
  channels each), concatenated, 3x3 conv to one channel, ``SA = Sa * F_in``
* point attention: ``Pa = sigmoid(conv1x1(relu(conv1x1(F_in))))``, ``PA = Pa * F_in``

Variants select which terms are summed at the output:

====== ==========================
a      ``F_in`` (no attention)
b      ``SA + PA``
c      ``F_in + SA + PA`` (default)
d      ``F_in + PA + CA + SA``
====== ==========================
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

VARIANTS = ("a", "b", "c", "d")


@dataclass(frozen=True)
class AbmConfig:
    variant: str = "c"
    compression_ratio: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown ABM variant {self.variant!r}")
        if self.compression_ratio < 1:
            raise ValueError("compression_ratio must be >= 1")

    def check_channels(self, channels: int) -> None:
        if channels % 4 or channels % self.compression_ratio:
            raise ValueError(
                f"channels={channels} must be divisible by 4 and by n={self.compression_ratio}"
            )


@dataclass
class AttentionOutputs:
    Ca: torch.Tensor
    Sa: torch.Tensor
    Pa: torch.Tensor
    CA: torch.Tensor
    SA: torch.Tensor
    PA: torch.Tensor
    V1: torch.Tensor
    V2: torch.Tensor


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, ratio: int = 16):
        super().__init__()
        if channels % ratio:
            raise ValueError(f"channels={channels} not divisible by n={ratio}")
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels // ratio),
            nn.ReLU(),
            nn.Linear(channels // ratio, channels),
        )

    def forward(self, x):
        pooled = x.amax(dim=(2, 3)) + x.mean(dim=(2, 3))
        ca = torch.sigmoid(self.mlp(pooled))[:, :, None, None]
        return ca, ca * x


class VRecField(nn.Module):
    """Parallel 1x1/3x3/5x5 convs (each C -> C/4, batch-normed), summed, then
    3x3 conv, ReLU, 7x7 conv and a sigmoid."""

    def __init__(self, channels: int):
        super().__init__()
        q = channels // 4
        self.branch1 = nn.Sequential(_conv(channels, q, 1), nn.BatchNorm2d(q))
        self.branch3 = nn.Sequential(_conv(channels, q, 3), nn.BatchNorm2d(q))
        self.branch5 = nn.Sequential(_conv(channels, q, 5), nn.BatchNorm2d(q))
        self.conv3 = _conv(q, q, 3)
        self.conv7 = _conv(q, q, 7)

    def forward(self, x):
        f = self.branch1(x) + self.branch3(x) + self.branch5(x)
        return torch.sigmoid(self.conv7(torch.relu(self.conv3(f))))


class SpatialAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.field1 = VRecField(channels)
        self.field2 = VRecField(channels)
        self.conv = _conv(channels // 2, 1, 3)

    def forward(self, ca_tensor, f_in):
        if ca_tensor.shape != f_in.shape:
            raise ValueError(f"shape mismatch {tuple(ca_tensor.shape)} vs {tuple(f_in.shape)}")
        v1 = self.field1(ca_tensor)
        v2 = self.field2(ca_tensor)
        sa = torch.sigmoid(self.conv(torch.cat([v1, v2], dim=1)))
        return sa, sa * f_in, v1, v2


class PointAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 1)
        self.conv2 = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        pa = torch.sigmoid(self.conv2(torch.relu(self.conv1(x))))
        return pa, pa * x


class ABM(nn.Module):
    def __init__(self, channels: int, config: AbmConfig = AbmConfig()):
        super().__init__()
        config.check_channels(channels)
        self.channels = channels
        self.config = config
        self.channel = ChannelAttention(channels, config.compression_ratio)
        self.spatial = SpatialAttention(channels)
        self.point = PointAttention(channels)

    @property
    def variant(self) -> str:
        return self.config.variant

    def attend(self, x) -> AttentionOutputs:
        ca_map, ca = self.channel(x)
        sa_map, sa, v1, v2 = self.spatial(ca, x)
        pa_map, pa = self.point(x)
        return AttentionOutputs(Ca=ca_map, Sa=sa_map, Pa=pa_map, CA=ca, SA=sa, PA=pa, V1=v1, V2=v2)

    def combine(self, x, att: AttentionOutputs):
        v = self.variant
        if v == "a":
            return x
        if v == "b":
            return att.SA + att.PA
        if v == "c":
            return x + att.SA + att.PA
        return x + att.PA + att.CA + att.SA

    def forward(self, x):
        if self.variant == "a":
            return x
        return self.combine(x, self.attend(x))


def zero_attention_(abm: ABM) -> ABM:
    """Zero every conv/linear weight and bias in the block (all maps become 0.5)."""
    with torch.no_grad():
        for m in abm.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
    return abm
