"""Combining pre- and post-event information ahead of the detection neck.

Three strategies, selected by `VariantConfig`:

* early fusion: channel-concatenate the two images into a 6-channel input;
* siamese fusion: per level, concatenate [pre | post | pre - post];
* optional asymmetric cross-attention that refines the post features from
  the pre features (queries = pre, keys/values = post) before fusing.

The attention output re-enters through a zero-initialized 1x1 projection, so
at initialization every attention variant is exactly the plain siamese model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import LEVELS, FeatureMap
from .errors import ConfigError
from .nn import Conv2d, Module

FUSION_MODES = ("early_fusion", "siamese")
COMPRESSION_RATIOS = (8, 64)


def canonical_hash(payload: dict) -> str:
    """sha256 hex of the canonical JSON encoding of `payload`."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class VariantConfig:
    """The ablation switchboard.

    Every benchmark row is a pure configuration of this object: early fusion,
    siamese, attention level sets, shift augmentation, channel compression,
    and D3 removal.
    """

    fusion_mode: str = "siamese"
    attention_levels: tuple[str, ...] = ()
    attention_channel_reduction: int = 4
    compression_ratio: int | None = None
    drop_d3: bool = False
    shift_augmentation: bool = False

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        levels = tuple(self.attention_levels)
        object.__setattr__(self, "attention_levels", levels)
        for lv in levels:
            if lv not in LEVELS:
                raise ConfigError(f"unknown attention level {lv!r}")
        if len(set(levels)) != len(levels):
            raise ConfigError("duplicate attention levels")
        if self.compression_ratio is not None \
                and self.compression_ratio not in COMPRESSION_RATIOS:
            raise ConfigError(
                f"compression ratio must be one of {COMPRESSION_RATIOS}")
        if self.attention_channel_reduction < 1:
            raise ConfigError("attention channel reduction must be >= 1")
        if self.fusion_mode == "early_fusion":
            if levels or self.compression_ratio is not None or self.drop_d3:
                raise ConfigError(
                    "early fusion forbids attention, compression, and D3 removal")
        if self.drop_d3 and "D3" in levels:
            raise ConfigError("cannot attend on a dropped D3 level")

    @property
    def retained_levels(self) -> tuple[str, ...]:
        return ("D4", "D5") if self.drop_d3 else LEVELS

    def to_dict(self) -> dict:
        return {
            "fusion_mode": self.fusion_mode,
            "attention_levels": list(self.attention_levels),
            "attention_channel_reduction": self.attention_channel_reduction,
            "compression_ratio": self.compression_ratio,
            "drop_d3": self.drop_d3,
            "shift_augmentation": self.shift_augmentation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        return cls(
            fusion_mode=d.get("fusion_mode", "siamese"),
            attention_levels=tuple(d.get("attention_levels", ())),
            attention_channel_reduction=d.get("attention_channel_reduction", 4),
            compression_ratio=d.get("compression_ratio"),
            drop_d3=d.get("drop_d3", False),
            shift_augmentation=d.get("shift_augmentation", False),
        )

    def hash(self) -> str:
        return canonical_hash(self.to_dict())


def fuse_early(pre: T.Tensor, post: T.Tensor) -> T.Tensor:
    """[pre; post] channel concatenation: the 6-channel encoder input."""
    if pre.shape != post.shape:
        raise ConfigError(f"pre/post dims differ: {pre.shape} vs {post.shape}")
    if pre.shape[0] != 3:
        raise ConfigError("early fusion expects 3-channel images")
    return T.concat([pre, post], axis=0)


class CrossAttention(Module):
    """Single-head scaled dot-product attention, pre as queries.

    Q/K/V come from 1x1 convs that cut channels by `reduction`; the attended
    map returns through a zero-initialized 1x1 conv and is added to the post
    features, so the module is an exact no-op until trained.
    """

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator,
                 dtype=np.float32):
        if channels % reduction:
            raise ConfigError(
                f"channels {channels} not divisible by reduction {reduction}")
        self.reduced = channels // reduction
        self.q_proj = Conv2d(channels, self.reduced, 1, rng, dtype=dtype)
        self.k_proj = Conv2d(channels, self.reduced, 1, rng, dtype=dtype)
        self.v_proj = Conv2d(channels, self.reduced, 1, rng, dtype=dtype)
        self.out_proj = Conv2d(self.reduced, channels, 1, rng, dtype=dtype,
                               zero_init=True)

    def attention_weights(self, pre: T.Tensor, post: T.Tensor) -> T.Tensor:
        """The (N, N) row-stochastic attention matrix (N = H*W)."""
        cr = self.reduced
        n = pre.shape[1] * pre.shape[2]
        q = T.transpose2d(T.reshape(self.q_proj(pre), (cr, n)))
        k = T.reshape(self.k_proj(post), (cr, n))
        scores = T.matmul(q, k) * (1.0 / np.sqrt(cr))
        return T.softmax_rows(scores)

    def __call__(self, pre_f: FeatureMap, post_f: FeatureMap) -> FeatureMap:
        if pre_f.level != post_f.level:
            raise ConfigError("cross-attention needs matching pyramid levels")
        if pre_f.data.shape != post_f.data.shape:
            raise ConfigError("cross-attention needs matching feature shapes")
        c, h, w = post_f.data.shape
        n = h * w
        weights = self.attention_weights(pre_f.data, post_f.data)
        v = T.transpose2d(T.reshape(self.v_proj(post_f.data), (self.reduced, n)))
        attended = T.reshape(T.transpose2d(T.matmul(weights, v)),
                             (self.reduced, h, w))
        refined = post_f.data + self.out_proj(attended)
        return FeatureMap(post_f.level, post_f.stride, refined)


class TemporalFusion(Module):
    """Per-level siamese fusion with optional cross-attention refinement."""

    def __init__(self, cfg: VariantConfig, level_channels: dict[str, int],
                 rng: np.random.Generator, dtype=np.float32):
        if cfg.fusion_mode != "siamese":
            raise ConfigError("TemporalFusion applies to the siamese mode only")
        self.cfg = cfg
        self.attention = {
            level: CrossAttention(level_channels[level],
                                  cfg.attention_channel_reduction, rng, dtype)
            for level in cfg.attention_levels
        }

    def named_parameters(self, prefix: str = ""):
        for level in sorted(self.attention):
            yield from self.attention[level].named_parameters(
                f"{prefix}attention.{level}.")

    def fuse(self, pyr_pre: list[FeatureMap],
             pyr_post: list[FeatureMap]) -> list[FeatureMap]:
        """Build [pre | post' | pre - post'] per retained level."""
        if [m.level for m in pyr_pre] != [m.level for m in pyr_post]:
            raise ConfigError("pre/post pyramids have mismatched levels")
        fused = []
        for pre_f, post_f in zip(pyr_pre, pyr_post):
            if pre_f.level in self.attention:
                post_f = self.attention[pre_f.level](pre_f, post_f)
            stack = T.concat(
                [pre_f.data, post_f.data, pre_f.data - post_f.data], axis=0)
            fused.append(FeatureMap(pre_f.level, pre_f.stride, stack))
        return fused
