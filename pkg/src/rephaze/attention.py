"""Spatial and channel attention sub-blocks.

Spatial attention pools over channels with a per-pixel max, squeezes the
resulting single-channel map through two 1x1 convolutions and a sigmoid,
and rescales the input per pixel.  Channel attention pools over space with
a global average, produces one weight per channel the same way, and
rescales the input per channel.  Both masks lie in (0, 1), so neither block
can amplify a feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import ConvParams, channel_max, conv2d, conv_params, global_avg_pool
from .tensor import Tensor, mul, relu, sigmoid

__all__ = [
    "SpatialAttentionParams",
    "ChannelAttentionParams",
    "spatial_attention_params",
    "channel_attention_params",
    "spatial_attention",
    "channel_attention",
]


@dataclass
class SpatialAttentionParams:
    """Two 1x1 convolutions acting on the channel-max map: 1 -> hidden -> 1."""

    conv1: ConvParams
    conv2: ConvParams

    def __post_init__(self):
        if self.conv1.in_channels != 1 or self.conv2.out_channels != 1:
            raise ConfigError("spatial attention squeezes a 1-channel map back to 1 channel")
        if self.conv1.out_channels != self.conv2.in_channels:
            raise ConfigError("hidden widths of the two convolutions must match")

    @property
    def hidden(self) -> int:
        return self.conv1.out_channels

    def n_parameters(self) -> int:
        return self.conv1.n_parameters() + self.conv2.n_parameters()


@dataclass
class ChannelAttentionParams:
    """Squeeze-and-excite pair of 1x1 convolutions: C -> C/ratio -> C."""

    conv1: ConvParams
    conv2: ConvParams
    ratio: int

    def __post_init__(self):
        c = self.conv1.in_channels
        if self.ratio < 1 or c % self.ratio != 0:
            raise ConfigError(f"channel count {c} must be divisible by ratio {self.ratio}")
        if self.conv1.out_channels != c // self.ratio or self.conv2.out_channels != c:
            raise ConfigError("channel attention must reduce by ratio and expand back")

    @property
    def channels(self) -> int:
        return self.conv1.in_channels

    def n_parameters(self) -> int:
        return self.conv1.n_parameters() + self.conv2.n_parameters()


def spatial_attention_params(hidden: int, rng: np.random.Generator) -> SpatialAttentionParams:
    return SpatialAttentionParams(
        conv1=conv_params(1, hidden, 1, rng),
        conv2=conv_params(hidden, 1, 1, rng),
    )


def channel_attention_params(channels: int, ratio: int, rng: np.random.Generator) -> ChannelAttentionParams:
    if ratio < 1 or channels % ratio != 0:
        raise ConfigError(f"channel count {channels} must be divisible by ratio {ratio}")
    return ChannelAttentionParams(
        conv1=conv_params(channels, channels // ratio, 1, rng),
        conv2=conv_params(channels // ratio, channels, 1, rng),
        ratio=ratio,
    )


def spatial_attention(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Rescale ``x`` by a per-pixel mask in (0, 1) shared across channels."""
    mask = sigmoid(conv2d(relu(conv2d(channel_max(x), p.conv1)), p.conv2))
    return mul(x, mask)


def channel_attention(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Rescale ``x`` by one weight in (0, 1) per channel."""
    weights = sigmoid(conv2d(relu(conv2d(global_avg_pool(x), p.conv1)), p.conv2))
    return mul(x, weights)
