"""Detector: FPN coupling, decode arithmetic, NMS, loss behavior."""

import numpy as np
import pytest

from obda import tensor as T
from obda.detector import DetectionHead, FPN, HeadLevel, HeadOutput, \
    assign_level, decode, detection_loss, encode_box, nms_classwise
from obda.encoder import FeatureMap
from obda.errors import ConfigError, ProtocolError
from obda.geoproto import BoxAnnotation
from tests.conftest import make_detection


def head_from_arrays(levels):
    """levels: list of (name, stride, obj, cls, box) numpy arrays."""
    return HeadOutput([
        HeadLevel(name, stride, T.Tensor(obj), T.Tensor(cls), T.Tensor(box))
        for name, stride, obj, cls, box in levels])


def empty_head(shapes=(("D3", 8, 8), ("D4", 16, 4), ("D5", 32, 2)),
               obj_logit=-10.0, dtype=np.float64):
    levels = []
    for name, stride, hw in shapes:
        levels.append((name, stride,
                       np.full((1, hw, hw), obj_logit, dtype=dtype),
                       np.zeros((4, hw, hw), dtype=dtype),
                       np.zeros((4, hw, hw), dtype=dtype)))
    return head_from_arrays(levels)


class TestFPN:
    def make_fused(self, rng, levels=("D3", "D4", "D5"), dtype=np.float32):
        strides = {"D3": 8, "D4": 16, "D5": 32}
        sizes = {"D3": 8, "D4": 4, "D5": 2}
        chans = {"D3": 12, "D4": 24, "D5": 48}
        return [FeatureMap(lv, strides[lv],
                           T.Tensor(rng.standard_normal(
                               (chans[lv], sizes[lv], sizes[lv])).astype(dtype)))
                for lv in levels]

    def test_three_level_output(self, rng):
        fused = self.make_fused(rng)
        fpn = FPN({"D3": 12, "D4": 24, "D5": 48}, 16, np.random.default_rng(0))
        out = fpn(fused)
        assert [m.channels for m in out] == [16, 16, 16]
        assert [m.level for m in out] == ["D3", "D4", "D5"]

    def test_two_level_output(self, rng):
        fused = self.make_fused(rng, levels=("D4", "D5"))
        fpn = FPN({"D4": 24, "D5": 48}, 16, np.random.default_rng(0))
        assert [m.level for m in fpn(fused)] == ["D4", "D5"]

    def test_top_down_coupling(self, rng):
        fused = self.make_fused(rng)
        fpn = FPN({"D3": 12, "D4": 24, "D5": 48}, 16, np.random.default_rng(0))
        base = fpn(fused)
        zeroed = list(fused)
        zeroed[2] = FeatureMap("D5", 32, T.Tensor(
            np.zeros_like(fused[2].data.data)))
        perturbed = fpn(zeroed)
        for a, b in zip(base[:2], perturbed[:2]):
            assert not np.array_equal(a.data.data, b.data.data)

    def test_empty_pyramid_rejected(self):
        fpn = FPN({"D4": 8}, 4, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            fpn([])


class TestAssignment:
    def test_level_by_box_scale(self):
        strides = [8, 16, 32]
        assert assign_level((0, 0, 24, 24), strides) == 8    # 24/4 = 6
        assert assign_level((0, 0, 64, 64), strides) == 16   # 64/4 = 16
        assert assign_level((0, 0, 200, 200), strides) == 32
        # Tie at sqrt(area)/4 = 12 goes to the finer stride.
        assert assign_level((0, 0, 48, 48), strides) == 8

    def test_clamped_to_available_levels(self):
        assert assign_level((0, 0, 10, 10), [16, 32]) == 16

    def test_encode_decode_box_consistency(self):
        box = (33.0, 17.5, 61.0, 46.5)
        for stride in (8, 16, 32):
            i, j, dx, dy, lw, lh = encode_box(box, stride)
            cx = (j + 0.5 + dx) * stride
            cy = (i + 0.5 + dy) * stride
            w = stride * np.exp(lw)
            h = stride * np.exp(lh)
            out = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            assert np.allclose(out, box, atol=1e-4)


class TestDecode:
    def test_all_negative_objectness_decodes_empty(self):
        assert decode(empty_head(), 0.25, 0.65) == []

    def test_hand_evaluated_cell(self):
        head = empty_head(shapes=(("D4", 16, 4),))
        lv = head.levels[0]
        lv.obj.data[0, 1, 2] = 10.0
        lv.cls.data[:, 1, 2] = [12.0, 0.0, 0.0, 0.0]
        det = decode(head, 0.25, 0.65)
        assert len(det) == 1
        assert np.allclose(det[0].box, (32.0, 16.0, 48.0, 32.0), atol=1e-5)
        assert det[0].damage_class == 0

    def test_nms_suppresses_duplicate(self):
        a = make_detection((10, 10, 30, 30), 1, 0.9)
        b = make_detection((10, 10, 30, 30), 1, 0.8)
        kept = nms_classwise([a, b], 0.65)
        assert len(kept) == 1 and kept[0].confidence == 0.9

    def test_nms_keeps_distinct_classes(self):
        a = make_detection((10, 10, 30, 30), 1, 0.9)
        b = make_detection((10, 10, 30, 30), 2, 0.8)
        assert len(nms_classwise([a, b], 0.65)) == 2

    def test_nms_never_increases_count(self, rng):
        from tests.conftest import random_boxes
        for seed in range(20):
            r = np.random.default_rng(seed)
            boxes = random_boxes(r, 12)
            dets = [make_detection(b, int(r.integers(0, 4)),
                                   float(r.uniform(0.1, 1)))
                    for b in boxes]
            kept = nms_classwise(dets, 0.5)
            assert len(kept) <= len(dets)
            for cls in range(4):
                group = [d for d in dets if d.damage_class == cls]
                if group:
                    top = max(group, key=lambda d: d.confidence)
                    assert any(k.confidence == top.confidence
                               and k.damage_class == cls for k in kept)

    def test_thresholds_validated(self):
        with pytest.raises(ConfigError):
            decode(empty_head(), 0.0, 0.65)
        with pytest.raises(ConfigError):
            decode(empty_head(), 0.5, 1.0)

    def test_sorted_by_confidence(self):
        head = empty_head(shapes=(("D4", 16, 4),))
        lv = head.levels[0]
        lv.obj.data[0, 0, 0] = 2.0
        lv.obj.data[0, 3, 3] = 4.0
        lv.cls.data[0] = 6.0
        dets = decode(head, 0.1, 0.65)
        confs = [d.confidence for d in dets]
        assert confs == sorted(confs, reverse=True)


class TestLoss:
    def test_no_gt_near_perfect_negative(self):
        loss, breakdown = detection_loss(empty_head(), [])
        assert float(loss.data) < 1e-3
        assert breakdown["positives"] == 0

    def test_perfect_prediction_loss_vanishes(self):
        box = (32.0, 16.0, 48.0, 32.0)
        gt = [BoxAnnotation(box, 2)]
        head = empty_head(shapes=(("D3", 8, 8), ("D4", 16, 4), ("D5", 32, 2)),
                          obj_logit=-40.0)
        stride = assign_level(box, [8, 16, 32])
        lv = next(l for l in head.levels if l.stride == stride)
        i, j, dx, dy, lw, lh = encode_box(box, stride)
        lv.obj.data[0, i, j] = 40.0
        lv.cls.data[:, i, j] = [-40, -40, 40, -40]
        lv.box.data[:, i, j] = [dx, dy, lw, lh]
        loss, breakdown = detection_loss(head, gt)
        assert float(loss.data) < 1e-6
        assert breakdown["positives"] == 1

    def test_loss_is_nonnegative(self, rng):
        for seed in range(10):
            r = np.random.default_rng(seed)
            head = empty_head()
            for lv in head.levels:
                lv.obj.data += r.standard_normal(lv.obj.shape)
                lv.cls.data += r.standard_normal(lv.cls.shape)
                lv.box.data += 0.3 * r.standard_normal(lv.box.shape)
            gt = [BoxAnnotation((8.0 * k + 2, 10.0, 8.0 * k + 9, 20.0),
                                int(r.integers(0, 4))) for k in range(3)]
            loss, _ = detection_loss(head, gt)
            assert float(loss.data) >= 0.0

    def test_gt_outside_support_is_protocol_error(self):
        head = empty_head(shapes=(("D4", 16, 4),))  # 64x64 support
        with pytest.raises(ProtocolError):
            detection_loss(head, [BoxAnnotation((50.0, 50.0, 70.0, 70.0), 0)])

    @pytest.mark.parametrize("seed", range(10))
    def test_loss_gradient_wrt_head_inputs(self, seed):
        # Box values are seeded near the encoded targets but offset so the
        # predicted box straddles exactly one ground-truth edge per axis:
        # every coordinate of the positive cells then has a live gradient
        # (a nested box would make dx/dy exactly flat, where the relative
        # finite-difference error is dominated by float noise).
        rng = np.random.default_rng(seed)
        gt = [BoxAnnotation((6.0, 9.0, 20.0, 25.0), 1),
              BoxAnnotation((30.0, 34.0, 58.0, 60.0), 3)]

        o3 = rng.standard_normal((1, 8, 8))
        c3 = rng.standard_normal((4, 8, 8))
        b3 = 0.02 * rng.standard_normal((4, 8, 8))
        o4 = rng.standard_normal((1, 4, 4))
        c4 = rng.standard_normal((4, 4, 4))
        b4 = 0.02 * rng.standard_normal((4, 4, 4))
        o5 = rng.standard_normal((1, 2, 2))
        c5 = rng.standard_normal((4, 2, 2))
        b5 = 0.02 * rng.standard_normal((4, 2, 2))
        maps = {8: b3, 16: b4, 32: b5}
        for ann in gt:
            stride = assign_level(ann.box, [8, 16, 32])
            i, j, dx, dy, lw, lh = encode_box(ann.box, stride)
            w = ann.box[2] - ann.box[0]
            h = ann.box[3] - ann.box[1]
            off_x = ((w - w * np.exp(-0.3)) / 2 + 2.0) / stride
            off_y = ((h - h * np.exp(-0.3)) / 2 + 2.0) / stride
            maps[stride][:, i, j] += [dx + off_x, dy + off_y,
                                      lw - 0.3, lh - 0.3]

        def build(which, x):
            arrays = {"obj": T.Tensor(o3), "cls": T.Tensor(c3),
                      "box": T.Tensor(b3)}
            arrays[which] = x
            return HeadOutput([HeadLevel("D3", 8, arrays["obj"],
                                         arrays["cls"], arrays["box"]),
                               HeadLevel("D4", 16, T.Tensor(o4), T.Tensor(c4),
                                         T.Tensor(b4)),
                               HeadLevel("D5", 32, T.Tensor(o5), T.Tensor(c5),
                                         T.Tensor(b5))])

        for which, base in (("obj", o3), ("cls", c3), ("box", b3)):
            err = T.grad_check(
                lambda x: detection_loss(build(which, x), gt)[0],
                T.Tensor(base.copy()))
            assert err < 1e-4, which


class TestDecodeEncodeConsistency:
    def test_exactly_encoded_gt_decodes_back(self, rng):
        boxes = [(12.0, 20.0, 34.0, 44.0), (70.0, 10.0, 120.0, 58.0)]
        head = empty_head(shapes=(("D3", 8, 16), ("D4", 16, 8), ("D5", 32, 4)),
                          obj_logit=-30.0)
        for k, box in enumerate(boxes):
            stride = assign_level(box, [8, 16, 32])
            lv = next(l for l in head.levels if l.stride == stride)
            i, j, dx, dy, lw, lh = encode_box(box, stride)
            lv.obj.data[0, i, j] = 30.0
            lv.cls.data[:, i, j] = -30.0
            lv.cls.data[k, i, j] = 30.0
            lv.box.data[:, i, j] = [dx, dy, lw, lh]
        dets = decode(head, 0.25, 0.65)
        assert len(dets) == 2
        for det in dets:
            best = min(boxes, key=lambda b: abs(b[0] - det.box[0]))
            assert np.allclose(det.box, best, atol=1e-4)


class TestHeadModule:
    def test_shared_head_over_levels(self, rng):
        head = DetectionHead(8, np.random.default_rng(0))
        pyramid = [FeatureMap("D4", 16, T.Tensor(
                       rng.standard_normal((8, 4, 4)).astype("f4"))),
                   FeatureMap("D5", 32, T.Tensor(
                       rng.standard_normal((8, 2, 2)).astype("f4")))]
        out = head(pyramid)
        assert [lv.obj.shape for lv in out.levels] == [(1, 4, 4), (1, 2, 2)]
        assert [lv.cls.shape for lv in out.levels] == [(4, 4, 4), (4, 2, 2)]
        assert [lv.box.shape for lv in out.levels] == [(4, 4, 4), (4, 2, 2)]
