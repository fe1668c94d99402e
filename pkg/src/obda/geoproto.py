"""The spatial-shift contract between pre- and post-disaster imagery.

Training: a random integer displacement is applied to the post image only,
both images are cropped to their spatial intersection, and boxes that are not
fully inside the intersection are discarded.  Annotations always stay in the
pre-disaster pixel frame.

Evaluation: a sweep over shift magnitudes is scored on one fixed spatial
support per shift direction, computed from the maximum magnitude, so every
magnitude in a direction's sweep sees the same pixel region and bit-identical
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

# Four diagonal shift directions (sign of dx, sign of dy).
DIAGONAL_DIRECTIONS = ((1, 1), (1, -1), (-1, 1), (-1, -1))

DEFAULT_MAX_SHIFT = 150


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned building box with a 4-way damage label, pre frame."""

    box: tuple[float, float, float, float]
    damage_class: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise InputError(f"annotation box {self.box} has no area")
        if self.damage_class not in (0, 1, 2, 3):
            raise InputError(f"damage class {self.damage_class} out of range")


@dataclass
class ScenePair:
    """Co-registered pre/post images plus annotations in the pre frame.

    `support` records which rectangle of the original pre frame the (possibly
    cropped) images cover; `applied_shift` is the post-image displacement that
    produced this pair.
    """

    pre: np.ndarray   # (3, H, W) float32
    post: np.ndarray  # (3, H, W) float32
    annotations: list[BoxAnnotation]
    applied_shift: tuple[int, int] = (0, 0)
    support: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.pre.shape != self.post.shape or self.pre.ndim != 3:
            raise InputError("pre/post must be equal-shaped (3, H, W) arrays")
        if self.support is None:
            self.support = (0, 0, self.pre.shape[2], self.pre.shape[1])

    @property
    def height(self) -> int:
        return self.pre.shape[1]

    @property
    def width(self) -> int:
        return self.pre.shape[2]


def _box_inside(box, w: int, h: int) -> bool:
    x0, y0, x1, y1 = box
    return x0 >= 0 and y0 >= 0 and x1 <= w and y1 <= h


def apply_shift(pair: ScenePair, dx: int, dy: int) -> ScenePair:
    """Translate the post image by (dx, dy) pixels and crop to the overlap.

    A post pixel (x, y) lands at pre-frame position (x + dx, y + dy).  Both
    images are cropped to the intersection of the pre frame with the shifted
    post frame; boxes not fully inside the intersection are dropped, and the
    survivors are re-expressed with the intersection origin at (0, 0).
    """
    h, w = pair.height, pair.width
    if abs(dx) >= w or abs(dy) >= h:
        raise InputError(f"shift ({dx}, {dy}) leaves no overlap on {w}x{h}")
    x_lo, x_hi = max(0, dx), w + min(0, dx)
    y_lo, y_hi = max(0, dy), h + min(0, dy)
    pre = pair.pre[:, y_lo:y_hi, x_lo:x_hi].copy()
    post = pair.post[:, y_lo - dy:y_hi - dy, x_lo - dx:x_hi - dx].copy()
    kept = []
    for ann in pair.annotations:
        x0, y0, x1, y1 = ann.box
        if x0 >= x_lo and y0 >= y_lo and x1 <= x_hi and y1 <= y_hi:
            kept.append(BoxAnnotation((x0 - x_lo, y0 - y_lo,
                                       x1 - x_lo, y1 - y_lo),
                                      ann.damage_class))
    sx0, sy0 = pair.support[0] + x_lo, pair.support[1] + y_lo
    return ScenePair(pre, post, kept, applied_shift=(dx, dy),
                     support=(sx0, sy0, sx0 + (x_hi - x_lo),
                              sy0 + (y_hi - y_lo)))


def shift_augment(pair: ScenePair, rng: np.random.Generator,
                  max_shift: int = DEFAULT_MAX_SHIFT) -> ScenePair:
    """Training-time misregistration: uniform [0, max_shift] per axis,
    random sign per axis, applied to the post image only."""
    if max_shift >= min(pair.height, pair.width):
        raise InputError("max_shift must be smaller than the image")
    dx = int(rng.integers(0, max_shift + 1))
    dy = int(rng.integers(0, max_shift + 1))
    sx = 1 if rng.integers(0, 2) else -1
    sy = 1 if rng.integers(0, 2) else -1
    return apply_shift(pair, sx * dx, sy * dy)


@dataclass
class FixedSupportEvalSet:
    """Frozen evaluation set for a shift-robustness sweep.

    The support of each (pair, direction) cell is the intersection induced by
    the maximum magnitude along that direction; every smaller magnitude is
    evaluated on exactly that pixel region with exactly that annotation list.
    """

    pairs: list[ScenePair]
    magnitudes: tuple[int, ...]
    directions: tuple[tuple[int, int], ...]
    _frozen: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mags = tuple(sorted(self.magnitudes))
        if mags != tuple(self.magnitudes):
            raise ConfigError("magnitudes must be sorted ascending")
        if not self.directions:
            raise ConfigError("at least one shift direction is required")
        for sx, sy in self.directions:
            if sx not in (-1, 1) or sy not in (-1, 1):
                raise ConfigError("directions are (sign, sign) pairs")
        self.max_magnitude = max(self.magnitudes)
        for pair in self.pairs:
            if self.max_magnitude >= min(pair.height, pair.width):
                raise InputError("max shift magnitude exceeds image size")
        # Freeze supports and annotation sets at the maximum displacement.
        for pi, pair in enumerate(self.pairs):
            h, w = pair.height, pair.width
            for d in self.directions:
                dx = d[0] * self.max_magnitude
                dy = d[1] * self.max_magnitude
                ref = apply_shift(pair, dx, dy)
                rect = (max(0, dx), max(0, dy), w + min(0, dx), h + min(0, dy))
                self._frozen[(pi, d)] = (ref.support, ref.annotations, rect)

    def annotations(self, pair_index: int,
                    direction: tuple[int, int]) -> list[BoxAnnotation]:
        return list(self._frozen[(pair_index, direction)][1])

    def support(self, pair_index: int,
                direction: tuple[int, int]) -> tuple[int, int, int, int]:
        return self._frozen[(pair_index, direction)][0]

    def instance(self, pair_index: int, direction: tuple[int, int],
                 magnitude: int) -> ScenePair:
        """The pair shifted by `magnitude` along `direction`, cropped to the
        direction's fixed support, with the frozen annotation list."""
        if magnitude not in self.magnitudes:
            raise ConfigError(f"magnitude {magnitude} not part of this sweep")
        pair = self.pairs[pair_index]
        support, annotations, rect = self._frozen[(pair_index, direction)]
        x_lo, y_lo, x_hi, y_hi = rect
        dx, dy = direction[0] * magnitude, direction[1] * magnitude
        pre = pair.pre[:, y_lo:y_hi, x_lo:x_hi].copy()
        post = pair.post[:, y_lo - dy:y_hi - dy, x_lo - dx:x_hi - dx].copy()
        return ScenePair(pre, post, list(annotations),
                         applied_shift=(dx, dy), support=support)


def fixed_support_eval_set(pairs: list[ScenePair], magnitudes, directions
                           = DIAGONAL_DIRECTIONS) -> FixedSupportEvalSet:
    return FixedSupportEvalSet(list(pairs), tuple(magnitudes),
                               tuple(tuple(d) for d in directions))
