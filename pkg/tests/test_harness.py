"""Harness: budget arithmetic, training determinism, sweeps, CLI contracts."""

import dataclasses
import json

import numpy as np
import pytest

from obda import cli, harness
from obda.budget import BudgetScenario, compute_budget
from obda.datasets import SyntheticSceneSpec, make_synthetic_manifest
from obda.errors import IntegrityError, NumericError
from obda.fusion import VariantConfig
from obda.model import ModelConfig

MICRO = dict(channels_override=(4, 8, 16), head_width_override=8)


def micro_config(tmp_path, variant=None, steps=40, image_size=96,
                 n_scenes=10, seed=0, **overrides):
    manifest_path = tmp_path / "manifest.json"
    if not manifest_path.exists():
        spec = SyntheticSceneSpec(image_size=image_size,
                                  building_count_range=(2, 4),
                                  building_size_range=(14, 30))
        make_synthetic_manifest(spec, n_scenes, 0).save(manifest_path)
    model = ModelConfig(variant or VariantConfig(), "toy", **MICRO)
    opt = harness.OptimizerConfig(step_size=0.01, steps=steps,
                                  clip_norm=10.0)
    return harness.ExperimentConfig(
        model=model, optimizer=opt, manifest_path=str(manifest_path),
        seed=seed, out_dir=str(tmp_path / "run"), augment_max_shift=16,
        val_interval=0, **overrides)


class TestBudget:
    def test_reference_scenario_exact(self):
        report = compute_budget(BudgetScenario(compression_ratio=64))
        assert report.raw_uplink_bytes == 468_750_000
        assert report.pixels == 156_250_000
        assert report.tiles == 150
        assert report.latent_bytes_per_tile == 57_344
        assert report.latent_uplink_bytes == 8_601_600
        assert float(report.inference_seconds) == 1.5625

    def test_consistency_with_published_roundings(self):
        report = compute_budget(BudgetScenario(compression_ratio=64))
        assert 400e6 <= report.raw_uplink_bytes <= 500e6  # "approximately 450 MB"
        assert report.latent_uplink_bytes < 10e6          # "less than 10 MB"
        assert 1.0 <= report.inference_seconds <= 2.0     # "one to two seconds"

    def test_downlink_record_size(self):
        report = compute_budget(BudgetScenario())
        assert report.downlink_bytes(1000) == 25_000

    def test_rational_pixel_arithmetic(self):
        # 1 km^2 at 0.3 m/px is not an integer pixel count; stays rational.
        report = compute_budget(BudgetScenario(area_km2=1.0, gsd_m_per_px=0.3))
        assert report.pixels * 9 == 100_000_000


class TestAblationMatrix:
    def test_nine_rows_with_distinct_hashes(self, tmp_path):
        base = micro_config(tmp_path)
        matrix = harness.ablation_matrix(base)
        assert set(matrix) == {"EF", "S", "S+A", "S+A+D3", "S+Aug",
                               "S+A+Aug", "S+A+Aug+Comp8", "S+A+Aug+Comp64",
                               "S+A+Aug+Comp64-D3"}
        hashes = {c.hash() for c in matrix.values()}
        assert len(hashes) == 9
        out_dirs = {c.out_dir for c in matrix.values()}
        assert len(out_dirs) == 9

    def test_only_variant_fields_vary(self, tmp_path):
        base = micro_config(tmp_path)
        for cfg in harness.ablation_matrix(base).values():
            assert cfg.optimizer == base.optimizer
            assert cfg.seed == base.seed
            assert cfg.manifest_path == base.manifest_path


class TestTraining:
    def test_loss_decreases_through_quantized_codec(self, tmp_path):
        cfg = micro_config(tmp_path, VariantConfig(compression_ratio=8),
                           steps=200, image_size=96)
        result = harness.train(cfg)
        early = float(np.mean(result.losses[:20]))
        late = float(np.mean(result.losses[-20:]))
        assert late < early

    def test_bitwise_deterministic_loss_curve(self, tmp_path):
        cfg_a = micro_config(tmp_path, steps=25)
        cfg_b = dataclasses.replace(cfg_a, out_dir=str(tmp_path / "run_b"))
        assert cfg_a.hash() == cfg_b.hash()
        res_a = harness.train(cfg_a)
        res_b = harness.train(cfg_b)
        assert res_a.losses == res_b.losses

    def test_seed_changes_curve(self, tmp_path):
        cfg_a = micro_config(tmp_path, steps=15)
        cfg_b = dataclasses.replace(cfg_a, seed=1,
                                    out_dir=str(tmp_path / "run_b"))
        assert harness.train(cfg_a).losses != harness.train(cfg_b).losses

    def test_artifacts_embed_config_hash(self, tmp_path):
        cfg = micro_config(tmp_path, steps=5)
        harness.train(cfg)
        sidecar = json.loads((tmp_path / "run" / "checkpoint.json").read_text())
        assert sidecar["config_hash"] == cfg.hash()
        log = json.loads((tmp_path / "run" / "train_log.json").read_text())
        assert log["config_hash"] == cfg.hash()
        assert (tmp_path / "run" / "loss_curve.csv").read_text() \
            .startswith("step,loss")

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_aborts_with_numeric_error(self, tmp_path):
        cfg = micro_config(tmp_path, steps=60)
        cfg = dataclasses.replace(
            cfg, optimizer=harness.OptimizerConfig(step_size=1e9, steps=60,
                                                   clip_norm=1e12))
        with pytest.raises(NumericError):
            harness.train(cfg)

    def test_augmented_training_runs(self, tmp_path):
        cfg = micro_config(tmp_path, VariantConfig(shift_augmentation=True),
                           steps=12)
        result = harness.train(cfg)
        assert len(result.losses) == 12


class TestSweep:
    def build_trained(self, tmp_path, variant=None, steps=10):
        cfg = micro_config(tmp_path, variant, steps=steps)
        result = harness.train(cfg)
        model = harness.load_model(cfg, result.checkpoint_path)
        manifest = harness.SyntheticManifest.load(cfg.manifest_path)
        pairs = [manifest.scene(s) for s in manifest.split.test]
        return cfg, model, pairs

    def test_sweep_rows_and_csv(self, tmp_path):
        cfg, model, pairs = self.build_trained(tmp_path)
        result = harness.sweep_shift(cfg, model, pairs, (0, 8, 16))
        assert [r["shift_magnitude"] for r in result.rows] == [0, 8, 16]
        assert len(result.cells) == 12  # 3 magnitudes x 4 directions
        csv = result.to_csv()
        header, *lines = csv.strip().split("\n")
        assert header == "shift_magnitude,direction,map50,loc_f1,cls_acc"
        assert len(lines) == 12
        assert result.config_hash == cfg.hash()

    def test_zero_magnitude_sweep_equals_eval_on_max_support(self, tmp_path):
        cfg, model, pairs = self.build_trained(tmp_path)
        result = harness.sweep_shift(cfg, model, pairs, (0,),
                                     directions=((1, 1),))
        from obda.geoproto import fixed_support_eval_set
        es = fixed_support_eval_set(pairs, (0,), ((1, 1),))
        shifted = [es.instance(i, (1, 1), 0) for i in range(len(pairs))]
        direct = harness.evaluate_pairs(cfg, model, shifted)
        assert result.cells[0].map50 == direct.map50
        assert result.cells[0].localization_f1 == direct.localization_f1


class TestGroundOnboardCommands:
    def test_packet_roundtrip_and_hash_guard(self, tmp_path, rng):
        cfg = micro_config(tmp_path, VariantConfig(compression_ratio=8),
                           steps=4)
        result = harness.train(cfg)
        model = harness.load_model(cfg, result.checkpoint_path)
        pre = rng.uniform(0, 1, (3, 96, 96)).astype(np.float32)
        post = rng.uniform(0, 1, (3, 96, 96)).astype(np.float32)
        blob = harness.encode_latent(cfg, model, pre, "tile-1", (5, 9))
        tile_id, dets = harness.detect_from_packet(cfg, model, blob, post)
        assert tile_id == "tile-1"

        # Flipping one payload byte must abort with a CRC failure.
        corrupted = bytearray(blob)
        corrupted[len(blob) // 2] ^= 0x01
        with pytest.raises(IntegrityError):
            harness.detect_from_packet(cfg, model, bytes(corrupted), post)

        # A packet from a different config is rejected by hash.
        other_cfg = dataclasses.replace(cfg, seed=123)
        with pytest.raises(IntegrityError):
            harness.detect_from_packet(other_cfg, model, blob, post)

    def test_jsonl_product_format(self):
        from tests.conftest import make_detection
        text = harness.detections_to_jsonl(
            "t7", [make_detection((1, 2, 3, 4), 2, 0.75)])
        row = json.loads(text.strip())
        assert row == {"tile_id": "t7", "box": [1.0, 2.0, 3.0, 4.0],
                       "class": "major", "confidence": 0.75}


class TestCli:
    def run(self, *argv):
        return cli.main(list(argv))

    def test_gen_data_and_budget(self, tmp_path, capsys):
        manifest = tmp_path / "m.json"
        assert self.run("gen-data", "--out", str(manifest), "--scenes", "10",
                        "--image-size", "96") == 0
        assert manifest.exists()
        assert self.run("budget", "--ratio", "64") == 0
        out = capsys.readouterr().out
        assert "468750000" in out and "8601600" in out

    def test_train_eval_sweep_cycle(self, tmp_path, capsys):
        manifest = tmp_path / "m.json"
        spec = SyntheticSceneSpec(image_size=96, building_count_range=(2, 4),
                                  building_size_range=(14, 30))
        make_synthetic_manifest(spec, 10, 0).save(manifest)
        cfg = harness.ExperimentConfig(
            model=ModelConfig(VariantConfig(), "toy", **MICRO),
            optimizer=harness.OptimizerConfig(step_size=0.01, steps=6),
            manifest_path=str(manifest), out_dir=str(tmp_path / "run"),
            val_interval=0)
        cfg_path = tmp_path / "config.json"
        cfg.save(cfg_path)

        assert self.run("train", "--config", str(cfg_path)) == 0
        ckpt = tmp_path / "run" / "checkpoint"
        assert self.run("eval", "--config", str(cfg_path),
                        "--checkpoint", str(ckpt)) == 0
        assert (tmp_path / "run" / "eval_report.json").exists()
        assert self.run("sweep-shift", "--config", str(cfg_path),
                        "--checkpoint", str(ckpt),
                        "--magnitudes", "0,8") == 0
        assert (tmp_path / "run" / "sweep.csv").exists()
        sweep = json.loads((tmp_path / "run" / "sweep.json").read_text())
        assert sweep["config_hash"] == cfg.hash()
        assert sweep["sweep_spec"]["magnitudes"] == [0, 8]

    def test_encode_detect_cycle_and_crc_exit_code(self, tmp_path):
        from PIL import Image

        manifest = tmp_path / "m.json"
        spec = SyntheticSceneSpec(image_size=96, building_count_range=(2, 4),
                                  building_size_range=(14, 30))
        manifest_obj = make_synthetic_manifest(spec, 6, 0)
        manifest_obj.save(manifest)
        cfg = harness.ExperimentConfig(
            model=ModelConfig(VariantConfig(compression_ratio=8), "toy",
                              **MICRO),
            optimizer=harness.OptimizerConfig(step_size=0.01, steps=4),
            manifest_path=str(manifest), out_dir=str(tmp_path / "run"),
            val_interval=0)
        cfg_path = tmp_path / "config.json"
        cfg.save(cfg_path)
        assert self.run("train", "--config", str(cfg_path)) == 0

        pair = manifest_obj.scene(manifest_obj.seeds[0])
        for name, img in (("pre.png", pair.pre), ("post.png", pair.post)):
            arr = (img.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(arr).save(tmp_path / name)

        ckpt = str(tmp_path / "run" / "checkpoint")
        packet = tmp_path / "tile.obda"
        assert self.run("encode-latent", "--config", str(cfg_path),
                        "--checkpoint", ckpt,
                        "--pre-image", str(tmp_path / "pre.png"),
                        "--tile-id", "tile-0", "--out", str(packet)) == 0
        dets_path = tmp_path / "dets.jsonl"
        assert self.run("detect", "--config", str(cfg_path),
                        "--checkpoint", ckpt, "--packet", str(packet),
                        "--post-image", str(tmp_path / "post.png"),
                        "--conf-threshold", "0.05",
                        "--patches", str(tmp_path / "patches"),
                        "--out", str(dets_path)) == 0
        assert dets_path.exists()

        blob = bytearray(packet.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        packet.write_bytes(bytes(blob))
        code = self.run("detect", "--config", str(cfg_path),
                        "--checkpoint", ckpt, "--packet", str(packet),
                        "--post-image", str(tmp_path / "post.png"),
                        "--out", str(dets_path))
        assert code == IntegrityError.exit_code

    def test_ablate_emit_configs(self, tmp_path):
        manifest = tmp_path / "m.json"
        spec = SyntheticSceneSpec(image_size=96)
        make_synthetic_manifest(spec, 6, 0).save(manifest)
        cfg = harness.ExperimentConfig(
            model=ModelConfig(VariantConfig(), "toy", **MICRO),
            manifest_path=str(manifest), out_dir=str(tmp_path / "run"))
        cfg_path = tmp_path / "config.json"
        cfg.save(cfg_path)
        out_dir = tmp_path / "variants"
        assert self.run("ablate", "--config", str(cfg_path),
                        "--emit-configs", str(out_dir)) == 0
        assert len(list(out_dir.glob("*.json"))) == 9
