"""Command-line entry point.

Subcommands: train, eval, sweep-shift, budget, encode-latent, detect,
gen-data, ablate.  Every command takes a JSON experiment config via
--config; exit codes signal the failure category (see errors.py).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .budget import BudgetScenario
from .datasets import SyntheticManifest, generate_scene
from .errors import InputError, ObdaError
from .geoproto import DIAGONAL_DIRECTIONS


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _save_image(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = (image.transpose(1, 2, 0) * 255).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _test_pairs(cfg: harness.ExperimentConfig, cap: int | None = None):
    if cfg.manifest_path is None:
        raise InputError("config has no dataset manifest")
    manifest = SyntheticManifest.load(cfg.manifest_path)
    seeds = manifest.split.test if cap is None else manifest.split.test[:cap]
    return [manifest.scene(s) for s in seeds]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = harness.train(cfg)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"initial loss {result.losses[0]:.4f} -> final "
          f"{result.losses[-1]:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = harness.load_model(cfg, args.checkpoint)
    pairs = _test_pairs(cfg, args.max_scenes)
    report = harness.evaluate_pairs(cfg, model, pairs)
    payload = {"config_hash": cfg.hash(), "report": report.to_dict()}
    out = Path(args.out or Path(cfg.out_dir) / "eval_report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2))
    print(f"mAP@0.5 {report.map50:.4f}  loc-F1 {report.localization_f1:.4f}"
          f"  -> {out}")
    return 0


def cmd_sweep_shift(args) -> int:
    cfg = _load_config(args)
    model = harness.load_model(cfg, args.checkpoint)
    pairs = _test_pairs(cfg, args.max_scenes)
    magnitudes = sorted(int(m) for m in args.magnitudes.split(","))
    result = harness.sweep_shift(cfg, model, pairs, magnitudes)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_spec = {"magnitudes": magnitudes,
                  "directions": [list(d) for d in DIAGONAL_DIRECTIONS],
                  "seed": cfg.seed}
    payload = {"sweep_spec": sweep_spec, **result.to_dict()}
    (out_dir / "sweep.json").write_text(json.dumps(payload, indent=2))
    (out_dir / "sweep.csv").write_text(result.to_csv())
    for row in result.rows:
        acc = row["cls_acc"]
        print(f"shift {row['shift_magnitude']:4d}  mAP {row['map50']:.4f}  "
              f"locF1 {row['loc_f1']:.4f}  clsAcc "
              f"{'-' if acc is None else f'{acc:.4f}'}")
    return 0


def cmd_budget(args) -> int:
    scenario = BudgetScenario(
        area_km2=args.area_km2,
        gsd_m_per_px=args.gsd,
        tile_size=args.tile_size,
        bytes_per_px=args.bytes_per_px,
        throughput_mpix_s=args.throughput,
        compression_ratio=args.ratio,
        drop_d3=args.drop_d3,
    )
    report = harness.budget_report(scenario)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_encode_latent(args) -> int:
    cfg = _load_config(args)
    model = harness.load_model(cfg, args.checkpoint)
    pre = _load_image(args.pre_image)
    blob = harness.encode_latent(cfg, model, pre, args.tile_id,
                                 (args.geo_x, args.geo_y),
                                 quantize=not args.no_quantize)
    Path(args.out).write_bytes(blob)
    print(f"packet: {args.out} ({len(blob)} bytes)")
    return 0


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    model = harness.load_model(cfg, args.checkpoint)
    post = _load_image(args.post_image)
    blob = Path(args.packet).read_bytes()
    tile_id, dets = harness.detect_from_packet(
        cfg, model, blob, post, conf_threshold=args.conf_threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(harness.detections_to_jsonl(tile_id, dets))
    if args.patches:
        harness.export_patches(post, dets, Path(args.patches), tile_id)
    print(f"{len(dets)} detections -> {out}")
    return 0


def cmd_gen_data(args) -> int:
    manifest = harness.default_synthetic_manifest(
        args.out, n_scenes=args.scenes, image_size=args.image_size,
        base_seed=args.base_seed)
    print(f"manifest: {args.out} ({args.scenes} scenes, "
          f"{len(manifest.split.train)}/{len(manifest.split.val)}/"
          f"{len(manifest.split.test)} train/val/test)")
    if args.render:
        render_dir = Path(args.render)
        render_dir.mkdir(parents=True, exist_ok=True)
        for seed in manifest.seeds:
            pair = generate_scene(manifest.spec, seed)
            _save_image(render_dir / f"scene{seed:05d}_pre_disaster.png",
                        pair.pre)
            _save_image(render_dir / f"scene{seed:05d}_post_disaster.png",
                        pair.post)
        print(f"rendered PNGs -> {render_dir}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(args)
    matrix = harness.ablation_matrix(base)
    rows = {name: c.to_dict() for name, c in matrix.items()}
    if args.emit_configs:
        out_dir = Path(args.emit_configs)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, c in matrix.items():
            (out_dir / f"{name.replace('+', '_')}.json").write_text(
                json.dumps(c.to_dict(), indent=2))
        print(f"wrote {len(matrix)} variant configs -> {out_dir}")
        return 0
    results = {}
    for name, cfg in matrix.items():
        if args.only and name not in args.only.split(","):
            continue
        print(f"== {name} ==")
        result = harness.train(cfg)
        model = harness.load_model(cfg, result.checkpoint_path)
        pairs = _test_pairs(cfg, args.max_scenes)
        report = harness.evaluate_pairs(cfg, model, pairs)
        results[name] = {"config_hash": cfg.hash(),
                         "map50": report.map50,
                         "loc_f1": report.localization_f1,
                         "cls_acc": report.classification_accuracy}
        print(f"   mAP@0.5 {report.map50:.4f}")
    out = Path(base.out_dir) / "ablation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2))
    print(f"ablation table -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="obda",
        description="Bi-temporal building damage assessment pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="train a variant end to end")
    add_config(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    add_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--max-scenes", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep-shift", help="fixed-support robustness sweep")
    add_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--magnitudes", default="0,16,32,64",
                    help="comma-separated shift magnitudes in pixels")
    sp.add_argument("--max-scenes", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_sweep_shift)

    sp = sub.add_parser("budget", help="uplink/downlink/compute budget")
    sp.add_argument("--area-km2", type=float, default=100.0)
    sp.add_argument("--gsd", type=float, default=0.8)
    sp.add_argument("--tile-size", type=int, default=1024)
    sp.add_argument("--bytes-per-px", type=int, default=3)
    sp.add_argument("--throughput", type=float, default=100.0,
                    help="MPixels/s of on-board inference")
    sp.add_argument("--ratio", type=int, default=None, choices=(8, 64))
    sp.add_argument("--drop-d3", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_budget)

    sp = sub.add_parser("encode-latent",
                        help="ground side: image -> latent packet")
    add_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pre-image", required=True)
    sp.add_argument("--tile-id", required=True)
    sp.add_argument("--geo-x", type=int, default=0)
    sp.add_argument("--geo-y", type=int, default=0)
    sp.add_argument("--no-quantize", action="store_true",
                    help="raw float32 payload (packet version 2)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_encode_latent)

    sp = sub.add_parser("detect",
                        help="on-board side: packet + post image -> products")
    add_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--packet", required=True)
    sp.add_argument("--post-image", required=True)
    sp.add_argument("--conf-threshold", type=float, default=0.25)
    sp.add_argument("--patches", default=None,
                    help="directory for PNG crops of detections")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_detect)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=320)
    sp.add_argument("--image-size", type=int, default=256)
    sp.add_argument("--base-seed", type=int, default=0)
    sp.add_argument("--render", default=None,
                    help="also render scene PNGs to this directory")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("ablate", help="run or emit the benchmark matrix")
    add_config(sp)
    sp.add_argument("--only", default=None,
                    help="comma-separated subset of variant names")
    sp.add_argument("--max-scenes", type=int, default=None)
    sp.add_argument("--emit-configs", default=None,
                    help="write per-variant configs here instead of training")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ObdaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
