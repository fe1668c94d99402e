"""Pyramid feature extractor tapped at strides 8/16/32 (levels D3/D4/D5).

A plain residual stage stack stands in for a heavier backbone: one stride-2
stem conv plus four stride-2 stages, with taps after the stride-8/16/32
stages.  The same instance runs either as a 6-channel early-fusion encoder or
as a 3-channel siamese branch pair with one shared weight store.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .nn import Conv2d, Module, ResidualBlock

LEVELS = ("D3", "D4", "D5")
STRIDES = {"D3": 8, "D4": 16, "D5": 32}

# (c3, c4, c5) channel profiles at the three taps.
TOY_CHANNELS = (16, 32, 64)
REFERENCE_CHANNELS = (128, 256, 512)
PROFILES = {"toy": TOY_CHANNELS, "reference": REFERENCE_CHANNELS}


@dataclass
class FeatureMap:
    """One pyramid level: its name, pixel stride, and (C, H, W) activations."""

    level: str
    stride: int
    data: T.Tensor

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown pyramid level {self.level}")
        if self.stride != STRIDES[self.level]:
            raise ConfigError(
                f"{self.level} must have stride {STRIDES[self.level]}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    channels: tuple[int, int, int] = TOY_CHANNELS
    depth: int = 1

    def __post_init__(self):
        if self.in_channels not in (3, 6):
            raise ConfigError("encoder input must have 3 or 6 channels")
        c3, c4, c5 = self.channels
        if not (c3 < c4 < c5):
            raise ConfigError("channel profile must be strictly increasing")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")


class _Stage(Module):
    """Stride-2 downsampling conv followed by `depth` residual blocks."""

    def __init__(self, c_in, c_out, depth, rng, dtype):
        self.down = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1, dtype=dtype)
        self.blocks = [ResidualBlock(c_out, rng, dtype) for _ in range(depth)]

    def __call__(self, x):
        x = T.silu(self.down(x))
        for block in self.blocks:
            x = block(x)
        return x


class PyramidEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        c3, c4, c5 = cfg.channels
        stem_ch = max(4, c3 // 2)
        self.stem = Conv2d(cfg.in_channels, stem_ch, 3, rng, stride=2,
                           padding=1, dtype=dtype)
        self.stage4 = _Stage(stem_ch, stem_ch, cfg.depth, rng, dtype)
        self.stage8 = _Stage(stem_ch, c3, cfg.depth, rng, dtype)
        self.stage16 = _Stage(c3, c4, cfg.depth, rng, dtype)
        self.stage32 = _Stage(c4, c5, cfg.depth, rng, dtype)

    def encode(self, image: T.Tensor, include_d3: bool = True) -> list[FeatureMap]:
        """Run the trunk and tap D3/D4/D5 (or D4/D5 when D3 is dropped)."""
        c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise InputError(
                f"encoder expects {self.cfg.in_channels} channels, got {c}")
        if h % 32 or w % 32:
            raise InputError(f"image dims must be divisible by 32, got {h}x{w}")
        x = T.silu(self.stem(image))
        x = self.stage4(x)
        d3 = self.stage8(x)
        d4 = self.stage16(d3)
        d5 = self.stage32(d4)
        maps = []
        if include_d3:
            maps.append(FeatureMap("D3", 8, d3))
        maps.append(FeatureMap("D4", 16, d4))
        maps.append(FeatureMap("D5", 32, d5))
        return maps

    def encode_siamese(self, pre: T.Tensor, post: T.Tensor,
                       include_d3: bool = True):
        """Two forward passes through the one shared weight store."""
        if self.cfg.in_channels != 3:
            raise ConfigError("siamese encoding requires a 3-channel encoder")
        if pre.shape != post.shape:
            raise InputError(
                f"pre/post dims differ: {pre.shape} vs {post.shape}")
        return (self.encode(pre, include_d3), self.encode(post, include_d3))
