"""Experiment orchestration: training, evaluation, sweeps, and the split.

Every artifact a run produces (checkpoint, reports, packets, sweep tables)
embeds the experiment config hash, and consumers refuse artifacts whose hash
does not match their own config, so numbers are always traceable to an exact
variant and artifacts from different configs cannot be silently mixed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import tensor as T
from .budget import BudgetScenario, compute_budget
from .datasets import SyntheticManifest, SyntheticSceneSpec, \
    make_synthetic_manifest
from .detector import DAMAGE_CLASS_NAMES, Detection, decode, detection_loss
from .errors import ConfigError, InputError, IntegrityError, NumericError
from .fusion import VariantConfig, canonical_hash
from .geoproto import DIAGONAL_DIRECTIONS, ScenePair, fixed_support_eval_set, \
    shift_augment
from .metrics import EvalReport, evaluate_detections
from .model import BiTemporalModel, ModelConfig, pad_to_stride
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    step_size: float = 0.02
    momentum: float = 0.9
    schedule: str = "cosine"
    steps: int = 1500
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.step_size <= 0 or self.steps < 1:
            raise ConfigError("bad optimizer settings")

    def to_dict(self) -> dict:
        return {"step_size": self.step_size, "momentum": self.momentum,
                "schedule": self.schedule, "steps": self.steps,
                "clip_norm": self.clip_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    manifest_path: str | None = None
    seed: int = 0
    out_dir: str = "runs/experiment"
    augment_max_shift: int = 150
    eval_conf_threshold: float = 0.05
    nms_iou: float = 0.65
    val_interval: int = 500
    val_scene_cap: int = 16

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "manifest_path": self.manifest_path,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "augment_max_shift": self.augment_max_shift,
            "eval_conf_threshold": self.eval_conf_threshold,
            "nms_iou": self.nms_iou,
            "val_interval": self.val_interval,
            "val_scene_cap": self.val_scene_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            model=ModelConfig.from_dict(d["model"]),
            optimizer=OptimizerConfig.from_dict(
                d.get("optimizer", OptimizerConfig().to_dict())),
            manifest_path=d.get("manifest_path"),
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", "runs/experiment"),
            augment_max_shift=d.get("augment_max_shift", 150),
            eval_conf_threshold=d.get("eval_conf_threshold", 0.05),
            nms_iou=d.get("nms_iou", 0.65),
            val_interval=d.get("val_interval", 500),
            val_scene_cap=d.get("val_scene_cap", 16),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def hash(self) -> str:
        # out_dir is a filesystem detail, not an experiment identity.
        d = self.to_dict()
        d.pop("out_dir")
        return canonical_hash(d)

    def hash_bytes(self) -> bytes:
        return bytes.fromhex(self.hash()[:16])


class MomentumSGD:
    """Momentum gradient descent with cosine decay and global-norm clipping."""

    def __init__(self, params: list[T.Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in params]

    def learning_rate(self, step: int) -> float:
        if self.cfg.schedule == "constant":
            return self.cfg.step_size
        progress = step / max(1, self.cfg.steps)
        return self.cfg.step_size * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, step_index: int) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = 1.0
        if norm > self.cfg.clip_norm:
            scale = self.cfg.clip_norm / norm
        lr = self.learning_rate(step_index)
        mu = self.cfg.momentum
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= mu
            v += g * scale
            p.data = p.data - (lr * v).astype(p.data.dtype)


# -- scene plumbing ---------------------------------------------------------------


def _pad_pair(pair: ScenePair) -> tuple[np.ndarray, np.ndarray]:
    return pad_to_stride(pair.pre), pad_to_stride(pair.post)


def _load_scenes(manifest: SyntheticManifest, seeds) -> list[ScenePair]:
    return [manifest.scene(s) for s in seeds]


def run_inference(model: BiTemporalModel, pair: ScenePair,
                  conf_threshold: float, nms_iou: float,
                  quantize: bool = True) -> list[Detection]:
    pre, post = _pad_pair(pair)
    with T.no_grad():
        head = model.forward(pre, post, quantize=quantize)
    return decode(head, conf_threshold, nms_iou)


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    config: ExperimentConfig
    checkpoint_path: Path
    losses: list[float]
    val_rows: list[dict]


def train(config: ExperimentConfig, manifest: SyntheticManifest | None = None,
          model: BiTemporalModel | None = None) -> TrainResult:
    """End-to-end gradient training of every component, deterministically.

    All randomness (init, scene order, augmentation) derives from the config
    seed, so one config gives one loss curve.
    """
    if manifest is None:
        if config.manifest_path is None:
            raise InputError("no dataset manifest configured")
        manifest = SyntheticManifest.load(config.manifest_path)
    if model is None:
        model = BiTemporalModel(config.model, seed=config.seed)

    seq = np.random.SeedSequence(config.seed)
    order_rng, aug_rng = [np.random.default_rng(s) for s in seq.spawn(2)]

    train_pairs = _load_scenes(manifest, manifest.split.train)
    if not train_pairs:
        raise InputError("training split is empty")
    val_pairs = _load_scenes(
        manifest, manifest.split.val[:config.val_scene_cap])

    params = model.parameters()
    optimizer = MomentumSGD(params, config.optimizer)
    variant = config.model.variant
    losses: list[float] = []
    val_rows: list[dict] = []
    epoch_order: list[int] = []

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(config.optimizer.steps):
        if not epoch_order:
            epoch_order = list(order_rng.permutation(len(train_pairs)))
        pair = train_pairs[epoch_order.pop()]
        if variant.shift_augmentation:
            pair = shift_augment(pair, aug_rng, config.augment_max_shift)
        pre, post = _pad_pair(pair)

        model.zero_grad()
        try:
            head = model.forward(pre, post, quantize=True)
            loss, breakdown = detection_loss(head, pair.annotations)
        except NumericError as e:
            raise NumericError(f"training diverged at step {step}: {e}") from e
        loss.backward()
        optimizer.step(step)
        losses.append(float(loss.data))

        if config.val_interval and (step + 1) % config.val_interval == 0 \
                and val_pairs:
            report = evaluate_pairs(config, model, val_pairs)
            val_rows.append({"step": step + 1, "map50": report.map50,
                             "loss": losses[-1]})
            log.info("step %d loss %.4f val mAP@0.5 %.3f", step + 1,
                     losses[-1], report.map50)

    checkpoint_path = out_dir / "checkpoint"
    save_checkpoint(checkpoint_path, model, config.hash(),
                    extra={"experiment": config.to_dict()})
    (out_dir / "loss_curve.csv").write_text(
        "step,loss\n" + "\n".join(f"{i},{v:.6f}" for i, v in enumerate(losses))
        + "\n")
    (out_dir / "train_log.json").write_text(json.dumps({
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "final_loss": losses[-1],
        "initial_loss": losses[0],
        "val": val_rows,
    }, indent=2))
    return TrainResult(config, checkpoint_path, losses, val_rows)


def load_model(config: ExperimentConfig, checkpoint_path: str | Path
               ) -> BiTemporalModel:
    model = BiTemporalModel(config.model, seed=config.seed)
    load_checkpoint(checkpoint_path, model, expect_hash=config.hash())
    return model


# -- evaluation -------------------------------------------------------------------


def evaluate_pairs(config: ExperimentConfig, model: BiTemporalModel,
                   pairs: list[ScenePair], quantize: bool = True,
                   shift_magnitude: int | None = None,
                   shift_direction=None) -> EvalReport:
    scene_dets, scene_gts = [], []
    for pair in pairs:
        dets = run_inference(model, pair, config.eval_conf_threshold,
                             config.nms_iou, quantize=quantize)
        scene_dets.append(dets)
        scene_gts.append(pair.annotations)
    return evaluate_detections(scene_dets, scene_gts,
                               shift_magnitude=shift_magnitude,
                               shift_direction=shift_direction)


@dataclass
class SweepResult:
    config_hash: str
    magnitudes: tuple[int, ...]
    directions: tuple[tuple[int, int], ...]
    cells: list[EvalReport]         # one per (magnitude, direction)
    rows: list[dict]                # one per magnitude, direction-averaged

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "magnitudes": list(self.magnitudes),
            "directions": [list(d) for d in self.directions],
            "cells": [c.to_dict() for c in self.cells],
            "rows": self.rows,
        }

    def to_csv(self) -> str:
        lines = ["shift_magnitude,direction,map50,loc_f1,cls_acc"]
        for cell in self.cells:
            dx, dy = cell.shift_direction
            acc = ("" if cell.classification_accuracy is None
                   else f"{cell.classification_accuracy:.6f}")
            lines.append(f"{cell.shift_magnitude},{dx:+d}{dy:+d},"
                         f"{cell.map50:.6f},{cell.localization_f1:.6f},{acc}")
        return "\n".join(lines) + "\n"


def sweep_shift(config: ExperimentConfig, model: BiTemporalModel,
                pairs: list[ScenePair], magnitudes,
                directions=DIAGONAL_DIRECTIONS,
                quantize: bool = True) -> SweepResult:
    """Fixed-support robustness sweep, direction-averaged per magnitude."""
    eval_set = fixed_support_eval_set(pairs, magnitudes, directions)
    cells: list[EvalReport] = []
    rows: list[dict] = []
    for magnitude in eval_set.magnitudes:
        per_direction: list[EvalReport] = []
        for direction in eval_set.directions:
            shifted = [eval_set.instance(i, direction, magnitude)
                       for i in range(len(pairs))]
            report = evaluate_pairs(config, model, shifted, quantize=quantize,
                                    shift_magnitude=magnitude,
                                    shift_direction=direction)
            per_direction.append(report)
            cells.append(report)
        accs = [r.classification_accuracy for r in per_direction
                if r.classification_accuracy is not None]
        rows.append({
            "shift_magnitude": magnitude,
            "map50": sum(r.map50 for r in per_direction) / len(per_direction),
            "loc_f1": sum(r.localization_f1 for r in per_direction)
            / len(per_direction),
            "cls_acc": sum(accs) / len(accs) if accs else None,
        })
    return SweepResult(config.hash(), eval_set.magnitudes,
                       eval_set.directions, cells, rows)


# -- ground / on-board split ------------------------------------------------------


def encode_latent(config: ExperimentConfig, model: BiTemporalModel,
                  pre_image: np.ndarray, tile_id: str,
                  geo_tag: tuple[int, int] = (0, 0),
                  quantize: bool = True) -> bytes:
    """Ground-side command: pre image -> sealed latent packet bytes."""
    maps = model.ground_encode(pad_to_stride(pre_image))
    packet = codec_mod.packet_from_maps(maps, tile_id, geo_tag,
                                        config.hash_bytes(),
                                        quantized=quantize)
    return codec_mod.pack(packet)


def detect_from_packet(config: ExperimentConfig, model: BiTemporalModel,
                       packet_bytes: bytes, post_image: np.ndarray,
                       conf_threshold: float | None = None,
                       nms_iou: float | None = None):
    """On-board command: packet + post image -> (tile_id, detections)."""
    packet = codec_mod.unpack(packet_bytes)
    if packet.config_hash != config.hash_bytes():
        raise IntegrityError(
            "latent packet was produced by a different experiment config")
    maps = codec_mod.maps_from_packet(packet)
    with T.no_grad():
        head = model.onboard_detect(maps, pad_to_stride(post_image))
    dets = decode(head,
                  config.eval_conf_threshold if conf_threshold is None
                  else conf_threshold,
                  config.nms_iou if nms_iou is None else nms_iou)
    return packet.tile_id, dets


def detections_to_jsonl(tile_id: str, dets: list[Detection]) -> str:
    """The simulated downlink product: one JSON record per detection."""
    lines = []
    for d in dets:
        lines.append(json.dumps({
            "tile_id": tile_id,
            "box": [round(float(v), 3) for v in d.box],
            "class": DAMAGE_CLASS_NAMES[d.damage_class],
            "confidence": round(float(d.confidence), 6),
        }))
    return "\n".join(lines) + ("\n" if lines else "")


def export_patches(image: np.ndarray, dets: list[Detection], out_dir: Path,
                   tile_id: str, pad: int = 8) -> list[Path]:
    """PNG crops of detected boxes, padded by `pad` pixels."""
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    _, h, w = image.shape
    paths = []
    for k, d in enumerate(dets):
        x0 = max(0, int(math.floor(d.box[0])) - pad)
        y0 = max(0, int(math.floor(d.box[1])) - pad)
        x1 = min(w, int(math.ceil(d.box[2])) + pad)
        y1 = min(h, int(math.ceil(d.box[3])) + pad)
        crop = (image[:, y0:y1, x0:x1].transpose(1, 2, 0) * 255).clip(0, 255)
        path = out_dir / f"{tile_id}_det{k:03d}_{DAMAGE_CLASS_NAMES[d.damage_class]}.png"
        Image.fromarray(crop.astype(np.uint8)).save(path)
        paths.append(path)
    return paths


# -- the ablation matrix ----------------------------------------------------------

ABLATION_VARIANTS: dict[str, VariantConfig] = {
    "EF": VariantConfig(fusion_mode="early_fusion"),
    "S": VariantConfig(),
    "S+A": VariantConfig(attention_levels=("D4", "D5")),
    "S+A+D3": VariantConfig(attention_levels=("D3", "D4", "D5")),
    "S+Aug": VariantConfig(shift_augmentation=True),
    "S+A+Aug": VariantConfig(attention_levels=("D4", "D5"),
                             shift_augmentation=True),
    "S+A+Aug+Comp8": VariantConfig(attention_levels=("D4", "D5"),
                                   shift_augmentation=True,
                                   compression_ratio=8),
    "S+A+Aug+Comp64": VariantConfig(attention_levels=("D4", "D5"),
                                    shift_augmentation=True,
                                    compression_ratio=64),
    "S+A+Aug+Comp64-D3": VariantConfig(attention_levels=("D4", "D5"),
                                       shift_augmentation=True,
                                       compression_ratio=64, drop_d3=True),
}


def ablation_matrix(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """All benchmark rows derived from one base config; only the variant
    fields differ, honoring 'identical optimization settings'."""
    out = {}
    for name, variant in ABLATION_VARIANTS.items():
        model_cfg = ModelConfig(variant, base.model.profile, base.model.depth)
        out[name] = ExperimentConfig(
            model=model_cfg,
            optimizer=base.optimizer,
            manifest_path=base.manifest_path,
            seed=base.seed,
            out_dir=str(Path(base.out_dir) / name.replace("+", "_")),
            augment_max_shift=base.augment_max_shift,
            eval_conf_threshold=base.eval_conf_threshold,
            nms_iou=base.nms_iou,
            val_interval=base.val_interval,
            val_scene_cap=base.val_scene_cap,
        )
    return out


def default_synthetic_manifest(path: str | Path, n_scenes: int = 320,
                               image_size: int = 256, base_seed: int = 0,
                               post_shift=None) -> SyntheticManifest:
    spec = SyntheticSceneSpec(image_size=image_size,
                              post_shift=tuple(post_shift) if post_shift
                              else None)
    manifest = make_synthetic_manifest(spec, n_scenes, base_seed)
    manifest.save(path)
    return manifest


def budget_report(scenario: BudgetScenario) -> dict:
    return compute_budget(scenario).to_dict()
