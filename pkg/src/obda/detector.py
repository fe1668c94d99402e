"""FPN neck, anchor-free detection head, decoding, NMS, and the training loss.

The head predicts, per pyramid cell: an objectness logit, four damage-class
logits, and a box as cell-relative center offsets plus log-scale width and
height.  Boxes live in the pre-disaster pixel frame.  Ground truth is
assigned to the single cell containing its center, at the level whose stride
is closest to sqrt(box area) / 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FeatureMap
from .errors import ConfigError, ProtocolError
from .geoproto import BoxAnnotation
from .nn import Conv2d, Module

DAMAGE_CLASS_NAMES = ("no_damage", "minor", "major", "destroyed")
NUM_CLASSES = 4


@dataclass
class Detection:
    """A scored building prediction in pre-disaster pixel coordinates."""

    box: tuple[float, float, float, float]
    damage_class: int
    objectness: float
    class_scores: np.ndarray
    confidence: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ConfigError(f"degenerate detection box {self.box}")


@dataclass
class HeadLevel:
    level: str
    stride: int
    obj: T.Tensor  # (1, H, W) logits
    cls: T.Tensor  # (4, H, W) logits
    box: T.Tensor  # (4, H, W): dx, dy, log_w, log_h


@dataclass
class HeadOutput:
    levels: list[HeadLevel]

    def strides(self) -> list[int]:
        return [lv.stride for lv in self.levels]


class FPN(Module):
    """Top-down aggregation: 1x1 laterals, nearest 2x upsampling, 3x3 smooth."""

    def __init__(self, in_channels: dict[str, int], head_width: int,
                 rng: np.random.Generator, dtype=np.float32):
        if not in_channels:
            raise ConfigError("FPN needs at least one input level")
        self.head_width = head_width
        self.lateral: dict[str, Conv2d] = {}
        self.smooth: dict[str, Conv2d] = {}
        for level, c in in_channels.items():
            self.lateral[level] = Conv2d(c, head_width, 1, rng, dtype=dtype)
            self.smooth[level] = Conv2d(head_width, head_width, 3, rng,
                                        padding=1, dtype=dtype)

    def named_parameters(self, prefix: str = ""):
        for level in sorted(self.lateral):
            yield from self.lateral[level].named_parameters(
                f"{prefix}lateral.{level}.")
            yield from self.smooth[level].named_parameters(
                f"{prefix}smooth.{level}.")

    def __call__(self, fused: list[FeatureMap]) -> list[FeatureMap]:
        if not fused:
            raise ConfigError("empty pyramid")
        laterals = [self.lateral[fm.level](fm.data) for fm in fused]
        merged = [None] * len(fused)
        merged[-1] = laterals[-1]
        for i in range(len(fused) - 2, -1, -1):
            merged[i] = laterals[i] + T.upsample2x(merged[i + 1])
        return [FeatureMap(fm.level, fm.stride, self.smooth[fm.level](m))
                for fm, m in zip(fused, merged)]


class DetectionHead(Module):
    """Shared decoupled head applied at every pyramid level."""

    def __init__(self, head_width: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.cls_stem = Conv2d(head_width, head_width, 1, rng, dtype=dtype)
        self.reg_stem = Conv2d(head_width, head_width, 1, rng, dtype=dtype)
        self.obj_out = Conv2d(head_width, 1, 1, rng, dtype=dtype)
        self.cls_out = Conv2d(head_width, NUM_CLASSES, 1, rng, dtype=dtype)
        self.box_out = Conv2d(head_width, 4, 1, rng, dtype=dtype)

    def __call__(self, pyramid: list[FeatureMap]) -> HeadOutput:
        levels = []
        for fm in pyramid:
            cls_feat = T.silu(self.cls_stem(fm.data))
            reg_feat = T.silu(self.reg_stem(fm.data))
            levels.append(HeadLevel(
                level=fm.level,
                stride=fm.stride,
                obj=self.obj_out(reg_feat),
                cls=self.cls_out(cls_feat),
                box=self.box_out(reg_feat),
            ))
        return HeadOutput(levels)


# -- target assignment ----------------------------------------------------------


def assign_level(box: tuple[float, float, float, float],
                 strides: list[int]) -> int:
    """Stride whose value is closest to sqrt(box area)/4; ties go finer."""
    x0, y0, x1, y1 = box
    target = np.sqrt((x1 - x0) * (y1 - y0)) / 4.0
    ordered = sorted(strides)
    best = min(ordered, key=lambda s: abs(s - target))
    return best


def encode_box(box, stride: int) -> tuple[int, int, float, float, float, float]:
    """Cell index plus (dx, dy, log_w, log_h) that decode back to `box`."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    j, i = int(cx // stride), int(cy // stride)
    dx = cx / stride - (j + 0.5)
    dy = cy / stride - (i + 0.5)
    lw = float(np.log((x1 - x0) / stride))
    lh = float(np.log((y1 - y0) / stride))
    return i, j, dx, dy, lw, lh


@dataclass
class _Positive:
    flat_idx: int
    damage_class: int
    box: tuple[float, float, float, float]
    dx: float
    dy: float
    lw: float
    lh: float
    jj: float  # cell center x in cells
    ii: float  # cell center y in cells


def assign_targets(gt: list[BoxAnnotation],
                   head: HeadOutput) -> dict[str, list[_Positive]]:
    """One positive cell per ground-truth box; first box keeps a shared cell."""
    strides = head.strides()
    shapes = {lv.level: lv.obj.shape[1:] for lv in head.levels}
    by_stride = {lv.stride: lv.level for lv in head.levels}
    positives: dict[str, list[_Positive]] = {lv.level: [] for lv in head.levels}
    taken: set[tuple[str, int]] = set()
    for ann in gt:
        stride = assign_level(ann.box, strides)
        level = by_stride[stride]
        h, w = shapes[level]
        x0, y0, x1, y1 = ann.box
        if x0 < 0 or y0 < 0 or x1 > w * stride or y1 > h * stride:
            raise ProtocolError(
                f"ground-truth box {ann.box} outside the {w*stride}x{h*stride} "
                "support; shift cropping must filter annotations first")
        i, j, dx, dy, lw, lh = encode_box(ann.box, stride)
        i, j = min(i, h - 1), min(j, w - 1)
        flat = i * w + j
        if (level, flat) in taken:
            continue
        taken.add((level, flat))
        positives[level].append(_Positive(flat, ann.damage_class, ann.box,
                                          dx, dy, lw, lh, j + 0.5, i + 0.5))
    return positives


# -- loss -----------------------------------------------------------------------


def detection_loss(head: HeadOutput, gt: list[BoxAnnotation]):
    """BCE objectness (all cells) + class CE + (1 - IoU) box loss (positives).

    The three terms are averaged over their own supports and summed with unit
    weights.  Returns (scalar loss tensor, per-term breakdown dict).
    """
    positives = assign_targets(gt, head)
    dtype = head.levels[0].obj.dtype

    bce_sum = None
    total_cells = 0
    ce_sum = None
    iou_sum = None
    n_pos = 0
    for lv in head.levels:
        _, h, w = lv.obj.shape
        pos = positives[lv.level]
        obj_target = np.zeros((1, h, w), dtype=dtype)
        for p in pos:
            obj_target.reshape(-1)[p.flat_idx] = 1.0
        level_bce = T.tsum(T.bce_with_logits(lv.obj, obj_target))
        bce_sum = level_bce if bce_sum is None else bce_sum + level_bce
        total_cells += h * w

        if not pos:
            continue
        idx = np.array([p.flat_idx for p in pos], dtype=np.int64)
        labels = np.array([p.damage_class for p in pos], dtype=np.int64)
        cls_rows = T.transpose2d(T.gather_cells(lv.cls, idx))  # (n, 4)
        level_ce = T.tsum(T.cross_entropy_rows(cls_rows, labels))
        ce_sum = level_ce if ce_sum is None else ce_sum + level_ce

        box_rows = T.gather_cells(lv.box, idx)  # (4, n)
        dx, dy = T.take_row(box_rows, 0), T.take_row(box_rows, 1)
        lw, lh = T.take_row(box_rows, 2), T.take_row(box_rows, 3)
        s = float(lv.stride)
        jj = np.array([p.jj for p in pos], dtype=dtype)
        ii = np.array([p.ii for p in pos], dtype=dtype)
        cx = (dx + jj) * s
        cy = (dy + ii) * s
        bw = T.exp(lw) * s
        bh = T.exp(lh) * s
        px0, px1 = cx - bw * 0.5, cx + bw * 0.5
        py0, py1 = cy - bh * 0.5, cy + bh * 0.5
        gx0 = np.array([p.box[0] for p in pos], dtype=dtype)
        gy0 = np.array([p.box[1] for p in pos], dtype=dtype)
        gx1 = np.array([p.box[2] for p in pos], dtype=dtype)
        gy1 = np.array([p.box[3] for p in pos], dtype=dtype)
        iw = T.maximum(T.minimum(px1, gx1) - T.maximum(px0, gx0), 0.0)
        ih = T.maximum(T.minimum(py1, gy1) - T.maximum(py0, gy0), 0.0)
        inter = iw * ih
        union = bw * bh + (gx1 - gx0) * (gy1 - gy0) - inter
        iou = inter / union
        level_iou = T.tsum(-iou) + float(len(pos))  # sum of (1 - IoU)
        iou_sum = level_iou if iou_sum is None else iou_sum + level_iou
        n_pos += len(pos)

    obj_term = bce_sum * (1.0 / total_cells)
    total = obj_term
    breakdown = {"objectness": float(obj_term.data), "classification": 0.0,
                 "box": 0.0, "positives": n_pos}
    if n_pos:
        cls_term = ce_sum * (1.0 / n_pos)
        box_term = iou_sum * (1.0 / n_pos)
        total = total + cls_term + box_term
        breakdown["classification"] = float(cls_term.data)
        breakdown["box"] = float(box_term.data)
    breakdown["total"] = float(total.data)
    return total, breakdown


# -- decoding -------------------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms_classwise(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; never drops a class's top detection."""
    kept: list[Detection] = []
    for cls in range(NUM_CLASSES):
        group = [d for d in dets if d.damage_class == cls]
        group.sort(key=lambda d: -d.confidence)
        chosen: list[Detection] = []
        for d in group:
            if all(box_iou(d.box, k.box) <= iou_threshold for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    kept.sort(key=lambda d: -d.confidence)
    return kept


def decode(head: HeadOutput, conf_threshold: float = 0.25,
           nms_iou: float = 0.65, max_candidates: int = 300) -> list[Detection]:
    """Head logits -> thresholded, NMS-filtered detections (confidence desc).

    At most `max_candidates` cells (by confidence) enter NMS; untrained or
    low-threshold runs would otherwise flood it.
    """
    if not (0.0 < conf_threshold < 1.0 and 0.0 < nms_iou < 1.0):
        raise ConfigError("thresholds must lie in (0, 1)")
    dets: list[Detection] = []
    for lv in head.levels:
        _, h, w = lv.obj.shape
        obj = _sigmoid_np(lv.obj.data[0])
        cls_prob = _softmax_np(lv.cls.data, axis=0)
        best_cls = cls_prob.argmax(axis=0)
        conf = obj * cls_prob.max(axis=0)
        ys, xs = np.nonzero(conf >= conf_threshold)
        s = float(lv.stride)
        for i, j in zip(ys, xs):
            dx, dy, lw, lh = lv.box.data[:, i, j]
            cx = (j + 0.5 + dx) * s
            cy = (i + 0.5 + dy) * s
            bw = s * np.exp(lw)
            bh = s * np.exp(lh)
            if bw <= 0 or bh <= 0:
                continue
            dets.append(Detection(
                box=(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2),
                damage_class=int(best_cls[i, j]),
                objectness=float(obj[i, j]),
                class_scores=cls_prob[:, i, j].copy(),
                confidence=float(conf[i, j]),
            ))
    if len(dets) > max_candidates:
        dets.sort(key=lambda d: -d.confidence)
        dets = dets[:max_candidates]
    return nms_classwise(dets, nms_iou)
