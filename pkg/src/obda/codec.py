"""Ground-side latent compression, int8 quantization, and the uplink packet.

The pre-disaster pyramid is optionally squeezed channel-wise by a trained 1x1
conv (ratio 8 or 64), quantized to int8 with one symmetric scale per level
map, and serialized into a self-describing little-endian packet with a CRC32
trailer.  The on-board side dequantizes and expands back to detector widths
through the symmetric 1x1 projection.

Packet wire format (version 1):

    magic "OBDA" | version u8 | config_hash 8 B | tile_id u16 len + UTF-8
    | geo_tag i32 x, i32 y | level count u8
    | per level: tag u8 (3/4/5), channels u16, height u16, width u16,
      quant_scale f32, payload C*H*W int8
    | CRC32 u32 of all preceding bytes

Version 2 is identical except the payload is raw little-endian float32
(4 bytes per element) and quant_scale is fixed at 1.0; it exists so the
ground/on-board split can be exercised with quantization disabled.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import LEVELS, STRIDES, FeatureMap
from .errors import ConfigError, IntegrityError, NumericError
from .nn import Conv2d, Module

MAGIC = b"OBDA"
VERSION_INT8 = 1
VERSION_F32 = 2
_LEVEL_TAG = {"D3": 3, "D4": 4, "D5": 5}
_TAG_LEVEL = {v: k for k, v in _LEVEL_TAG.items()}


def quantize(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric linear int8 quantization of one map.

    scale = max|v| / 127 (1.0 for an all-zero map); payload is int8 in
    [-127, 127].  Dequantization error is at most scale/2 per element.
    """
    if not np.isfinite(values).all():
        raise NumericError("cannot quantize non-finite values")
    max_abs = float(np.abs(values).max()) if values.size else 0.0
    scale = np.float32(1.0) if max_abs == 0.0 else np.float32(max_abs / 127.0)
    q = np.clip(np.round(values / scale), -127, 127).astype(np.int8)
    return q, float(scale)


def dequantize(payload: np.ndarray, scale: float) -> np.ndarray:
    return payload.astype(np.float32) * np.float32(scale)


def compressed_channels(channels: int, ratio: int | None) -> int:
    """Channel count after compression by `ratio` (floor at one channel).

    Ragged divisions with channels > ratio are rejected; profiles narrower
    than the ratio collapse to a single channel.
    """
    if ratio is None:
        return channels
    if channels % ratio == 0:
        return channels // ratio
    if channels > ratio:
        raise ConfigError(
            f"{channels} channels not divisible by compression ratio {ratio}")
    return 1


def latent_size_bytes(channels: tuple[int, int, int] = (128, 256, 512),
                      image_hw: int = 1024, ratio: int | None = None,
                      drop_d3: bool = False) -> int:
    """Exact int8 byte count of the uplinked pyramid (1 byte per element)."""
    if image_hw % 32:
        raise ConfigError("image size must be divisible by 32")
    per_level = dict(zip(LEVELS, channels))
    total = 0
    for level in LEVELS:
        if drop_d3 and level == "D3":
            continue
        side = image_hw // STRIDES[level]
        total += compressed_channels(per_level[level], ratio) * side * side
    return total


def format_mb(num_bytes: int) -> str:
    """Decimal megabytes, 3 significant figures above 1 MB, 2 below."""
    mb = num_bytes / 1e6
    return f"{mb:.3g}" if mb >= 1 else f"{mb:.2g}"


@dataclass
class LatentLevel:
    level: str
    channels: int
    height: int
    width: int
    quant_scale: float
    payload: np.ndarray  # int8 (version 1) or float32 (version 2), C*H*W flat

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown level {self.level}")
        if self.quant_scale <= 0:
            raise ConfigError("quant_scale must be positive")
        if self.payload.size != self.channels * self.height * self.width:
            raise ConfigError("payload length does not match level dims")


@dataclass
class LatentPacket:
    """The uplinked artifact: quantized pre-disaster pyramid plus metadata."""

    tile_id: str
    geo_tag: tuple[int, int]
    levels: list[LatentLevel]
    config_hash: bytes
    version: int = VERSION_INT8

    def __post_init__(self):
        if len(self.config_hash) != 8:
            raise ConfigError("config_hash must be exactly 8 bytes")
        if self.version not in (VERSION_INT8, VERSION_F32):
            raise ConfigError(f"unknown packet version {self.version}")


def pack(packet: LatentPacket) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<B", packet.version)
    out += packet.config_hash
    tid = packet.tile_id.encode("utf-8")
    out += struct.pack("<H", len(tid)) + tid
    out += struct.pack("<ii", *packet.geo_tag)
    out += struct.pack("<B", len(packet.levels))
    for lv in packet.levels:
        out += struct.pack("<BHHHf", _LEVEL_TAG[lv.level], lv.channels,
                           lv.height, lv.width, lv.quant_scale)
        if packet.version == VERSION_INT8:
            out += lv.payload.astype("<i1").tobytes()
        else:
            out += lv.payload.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("truncated latent packet")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(data: bytes) -> LatentPacket:
    """Parse and CRC-verify a packed latent packet."""
    if len(data) < 4 + 1 + 8 + 2 + 8 + 1 + 4:
        raise IntegrityError("latent packet too short")
    body, (crc_stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise IntegrityError("latent packet CRC mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise IntegrityError("bad latent packet magic")
    (version,) = r.unpack("<B")
    if version not in (VERSION_INT8, VERSION_F32):
        raise IntegrityError(f"unsupported packet version {version}")
    config_hash = r.take(8)
    (tid_len,) = r.unpack("<H")
    tile_id = r.take(tid_len).decode("utf-8")
    geo = r.unpack("<ii")
    (n_levels,) = r.unpack("<B")
    levels = []
    for _ in range(n_levels):
        tag, c, h, w, scale = r.unpack("<BHHHf")
        if tag not in _TAG_LEVEL:
            raise IntegrityError(f"unknown level tag {tag}")
        count = c * h * w
        if version == VERSION_INT8:
            payload = np.frombuffer(r.take(count), dtype="<i1").copy()
        else:
            payload = np.frombuffer(r.take(4 * count), dtype="<f4").copy()
        levels.append(LatentLevel(_TAG_LEVEL[tag], c, h, w, scale, payload))
    if r.pos != len(body):
        raise IntegrityError("trailing bytes in latent packet")
    return LatentPacket(tile_id, (geo[0], geo[1]), levels, config_hash, version)


def packet_from_maps(maps: dict[str, np.ndarray], tile_id: str,
                     geo_tag: tuple[int, int], config_hash: bytes,
                     quantized: bool = True) -> LatentPacket:
    """Seal ground-side (compressed) latent maps into a packet."""
    levels = []
    for level in LEVELS:
        if level not in maps:
            continue
        arr = maps[level]
        c, h, w = arr.shape
        if quantized:
            payload, scale = quantize(arr)
            levels.append(LatentLevel(level, c, h, w, scale, payload.reshape(-1)))
        else:
            levels.append(LatentLevel(level, c, h, w, 1.0,
                                      arr.astype(np.float32).reshape(-1)))
    version = VERSION_INT8 if quantized else VERSION_F32
    return LatentPacket(tile_id, geo_tag, levels, config_hash, version)


def maps_from_packet(packet: LatentPacket) -> dict[str, np.ndarray]:
    """Dequantized (C, H, W) float32 maps keyed by level."""
    out = {}
    for lv in packet.levels:
        shaped = lv.payload.reshape(lv.channels, lv.height, lv.width)
        if packet.version == VERSION_INT8:
            out[lv.level] = dequantize(shaped, lv.quant_scale)
        else:
            out[lv.level] = shaped.astype(np.float32)
    return out


class LatentCodec(Module):
    """Trained 1x1 compressor/expander pair, one per retained level.

    With ratio None the codec is an exact pass-through (no parameters); the
    packetizer still quantizes in that case, matching the uncompressed row of
    the size table.
    """

    def __init__(self, level_channels: dict[str, int], ratio: int | None,
                 rng: np.random.Generator, dtype=np.float32):
        self.ratio = ratio
        self.level_channels = dict(level_channels)
        self.compressors: dict[str, Conv2d] = {}
        self.expanders: dict[str, Conv2d] = {}
        if ratio is not None:
            for level, c in level_channels.items():
                cc = compressed_channels(c, ratio)
                self.compressors[level] = Conv2d(c, cc, 1, rng, dtype=dtype)
                self.expanders[level] = Conv2d(cc, c, 1, rng, dtype=dtype)

    def named_parameters(self, prefix: str = ""):
        for level in sorted(self.compressors):
            yield from self.compressors[level].named_parameters(
                f"{prefix}compress.{level}.")
            yield from self.expanders[level].named_parameters(
                f"{prefix}expand.{level}.")

    def compress(self, pyramid: list[FeatureMap]) -> list[FeatureMap]:
        if self.ratio is None:
            return pyramid
        out = []
        for fm in pyramid:
            squeezed = self.compressors[fm.level](fm.data)
            out.append(FeatureMap(fm.level, fm.stride, squeezed))
        return out

    def expand(self, pyramid: list[FeatureMap]) -> list[FeatureMap]:
        if self.ratio is None:
            return pyramid
        out = []
        for fm in pyramid:
            widened = self.expanders[fm.level](fm.data)
            out.append(FeatureMap(fm.level, fm.stride, widened))
        return out

    def quantize_pyramid(self, pyramid: list[FeatureMap]) -> list[FeatureMap]:
        """In-graph straight-through quantization of each level map."""
        return [FeatureMap(fm.level, fm.stride, T.quantize_ste(fm.data))
                for fm in pyramid]
