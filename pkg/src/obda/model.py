"""End-to-end bi-temporal detector assembled from the pipeline pieces.

One object owns the encoder (shared across siamese branches), the optional
latent codec, the optional cross-attention fusion, the FPN neck, and the
detection head.  The monolithic forward pass and the ground/on-board split
(`ground_encode` + `onboard_detect`) execute the same arithmetic, so with
quantization disabled the two are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import LatentCodec
from .detector import DetectionHead, FPN, HeadOutput
from .encoder import EncoderConfig, FeatureMap, PROFILES, PyramidEncoder
from .errors import ConfigError, InputError
from .fusion import TemporalFusion, VariantConfig, canonical_hash, fuse_early
from .nn import Module

HEAD_WIDTHS = {"toy": 64, "reference": 128}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switchboard: variant plus encoder profile and head width.

    `channels` / `head_width` default from the profile; explicit overrides
    exist for gradient-check builds on very small shapes.
    """

    variant: VariantConfig
    profile: str = "toy"
    depth: int = 1
    channels_override: tuple[int, int, int] | None = None
    head_width_override: int | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")

    @property
    def channels(self) -> tuple[int, int, int]:
        return self.channels_override or PROFILES[self.profile]

    @property
    def head_width(self) -> int:
        return self.head_width_override or HEAD_WIDTHS[self.profile]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.to_dict(),
            "profile": self.profile,
            "depth": self.depth,
            "channels_override": list(self.channels_override)
            if self.channels_override else None,
            "head_width_override": self.head_width_override,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        co = d.get("channels_override")
        return cls(VariantConfig.from_dict(d["variant"]),
                   d.get("profile", "toy"), d.get("depth", 1),
                   tuple(co) if co else None, d.get("head_width_override"))

    def hash(self) -> str:
        return canonical_hash(self.to_dict())


class BiTemporalModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        variant = cfg.variant
        rng = np.random.default_rng(seed)
        c3, c4, c5 = cfg.channels
        level_channels = {"D3": c3, "D4": c4, "D5": c5}
        retained = variant.retained_levels
        self.retained_channels = {lv: level_channels[lv] for lv in retained}

        if variant.fusion_mode == "early_fusion":
            self.encoder = PyramidEncoder(
                EncoderConfig(6, cfg.channels, cfg.depth), rng, dtype)
            self.codec = None
            self.fusion = None
            fpn_in = dict(self.retained_channels)
        else:
            self.encoder = PyramidEncoder(
                EncoderConfig(3, cfg.channels, cfg.depth), rng, dtype)
            self.codec = LatentCodec(self.retained_channels,
                                     variant.compression_ratio, rng, dtype)
            self.fusion = TemporalFusion(variant, self.retained_channels,
                                         rng, dtype)
            fpn_in = {lv: 3 * c for lv, c in self.retained_channels.items()}
        self.fpn = FPN(fpn_in, cfg.head_width, rng, dtype)
        self.head = DetectionHead(cfg.head_width, rng, dtype)

    # -- image plumbing ------------------------------------------------------

    def _to_tensor(self, image: np.ndarray) -> T.Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise InputError("images must be (3, H, W)")
        return T.Tensor((image - 0.5).astype(self.dtype))

    def _include_d3(self) -> bool:
        return not self.cfg.variant.drop_d3

    # -- forward passes ------------------------------------------------------

    def forward(self, pre: np.ndarray, post: np.ndarray,
                quantize: bool = True) -> HeadOutput:
        """Monolithic pass over one pre/post pair.

        `quantize` routes the pre-branch latents through the straight-through
        int8 quantizer, mirroring what the uplink does to them.
        """
        variant = self.cfg.variant
        pre_t, post_t = self._to_tensor(pre), self._to_tensor(post)
        if variant.fusion_mode == "early_fusion":
            pyramid = self.encoder.encode(fuse_early(pre_t, post_t))
            return self.head(self.fpn(pyramid))
        pyr_pre, pyr_post = self.encoder.encode_siamese(
            pre_t, post_t, include_d3=self._include_d3())
        latent = self.codec.compress(pyr_pre)
        if quantize:
            latent = self.codec.quantize_pyramid(latent)
        widened = self.codec.expand(latent)
        fused = self.fusion.fuse(widened, pyr_post)
        return self.head(self.fpn(fused))

    def ground_encode(self, pre: np.ndarray) -> dict[str, np.ndarray]:
        """Ground-side half: compressed (not yet quantized) latent maps."""
        if self.cfg.variant.fusion_mode == "early_fusion":
            raise ConfigError("early fusion has no ground/on-board split")
        with T.no_grad():
            pyramid = self.encoder.encode(self._to_tensor(pre),
                                          include_d3=self._include_d3())
            latent = self.codec.compress(pyramid)
        return {fm.level: fm.data.data.astype(np.float32) for fm in latent}

    def onboard_detect(self, latent_maps: dict[str, np.ndarray],
                       post: np.ndarray) -> HeadOutput:
        """On-board half: dequantized latents + fresh post image -> head."""
        if self.cfg.variant.fusion_mode == "early_fusion":
            raise ConfigError("early fusion has no ground/on-board split")
        expected = [lv for lv in ("D3", "D4", "D5")
                    if lv in self.retained_channels]
        if sorted(latent_maps) != sorted(expected):
            raise InputError(
                f"latent levels {sorted(latent_maps)} do not match the model's "
                f"retained levels {expected}")
        strides = {"D3": 8, "D4": 16, "D5": 32}
        latent = [FeatureMap(lv, strides[lv],
                             T.Tensor(latent_maps[lv].astype(self.dtype)))
                  for lv in expected]
        widened = self.codec.expand(latent)
        pyr_post = self.encoder.encode(self._to_tensor(post),
                                       include_d3=self._include_d3())
        fused = self.fusion.fuse(widened, pyr_post)
        return self.head(self.fpn(fused))


def pad_to_stride(image: np.ndarray, stride: int = 32) -> np.ndarray:
    """Zero-pad bottom/right so H and W are stride multiples.

    Shift cropping produces arbitrary sizes; padding keeps the pixel origin
    fixed so box coordinates are unaffected.
    """
    _, h, w = image.shape
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))
