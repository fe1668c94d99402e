"""Uplink/downlink/compute budget for an observation scenario.

All arithmetic is exact (integers and rationals); rounding happens only when
a report is formatted for display.  A detection record on the downlink is 25
bytes: an 8-byte tile id hash, four float32 box coordinates, and one class
byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .codec import format_mb, latent_size_bytes
from .encoder import REFERENCE_CHANNELS
from .errors import ConfigError

DETECTION_RECORD_BYTES = 25


@dataclass(frozen=True)
class BudgetScenario:
    area_km2: float = 100.0
    gsd_m_per_px: float = 0.8
    tile_size: int = 1024
    bytes_per_px: int = 3
    throughput_mpix_s: float = 100.0
    compression_ratio: int | None = None
    drop_d3: bool = False
    channels: tuple[int, int, int] = REFERENCE_CHANNELS

    def __post_init__(self):
        for name in ("area_km2", "gsd_m_per_px", "tile_size", "bytes_per_px",
                     "throughput_mpix_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.tile_size % 32:
            raise ConfigError("tile_size must be divisible by 32")


@dataclass
class BudgetReport:
    scenario: BudgetScenario
    pixels: Fraction
    raw_uplink_bytes: int
    tiles: int
    latent_bytes_per_tile: int
    latent_uplink_bytes: int
    inference_seconds: Fraction
    downlink_bytes_per_detection: int = DETECTION_RECORD_BYTES

    def downlink_bytes(self, n_detections: int) -> int:
        return n_detections * self.downlink_bytes_per_detection

    def to_dict(self) -> dict:
        return {
            "area_km2": self.scenario.area_km2,
            "gsd_m_per_px": self.scenario.gsd_m_per_px,
            "pixels": float(self.pixels),
            "raw_uplink_bytes": self.raw_uplink_bytes,
            "raw_uplink_mb": format_mb(self.raw_uplink_bytes),
            "tiles": self.tiles,
            "latent_bytes_per_tile": self.latent_bytes_per_tile,
            "latent_uplink_bytes": self.latent_uplink_bytes,
            "latent_uplink_mb": format_mb(self.latent_uplink_bytes),
            "inference_seconds": float(self.inference_seconds),
            "downlink_bytes_per_detection": self.downlink_bytes_per_detection,
            "compression_ratio": self.scenario.compression_ratio,
            "drop_d3": self.scenario.drop_d3,
        }


def compute_budget(scenario: BudgetScenario) -> BudgetReport:
    """Exact pixel / byte / second accounting for one scenario."""
    gsd = Fraction(str(scenario.gsd_m_per_px))
    area_m2 = Fraction(str(scenario.area_km2)) * 1_000_000
    pixels = area_m2 / (gsd * gsd)
    raw_bytes = pixels * scenario.bytes_per_px
    if raw_bytes.denominator != 1:
        raw_bytes = Fraction(math.ceil(raw_bytes))
    tiles = math.ceil(pixels / (scenario.tile_size ** 2))
    per_tile = latent_size_bytes(scenario.channels, scenario.tile_size,
                                 scenario.compression_ratio, scenario.drop_d3)
    throughput = Fraction(str(scenario.throughput_mpix_s)) * 1_000_000
    return BudgetReport(
        scenario=scenario,
        pixels=pixels,
        raw_uplink_bytes=int(raw_bytes),
        tiles=tiles,
        latent_bytes_per_tile=per_tile,
        latent_uplink_bytes=tiles * per_tile,
        inference_seconds=pixels / throughput,
    )
