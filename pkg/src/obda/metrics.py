"""Object-level scoring: matching, AP, localization F1, class accuracy.

Matching is greedy by detection confidence (each detection takes the
highest-IoU unmatched ground truth at or above the IoU threshold).  AP uses
all-point interpolation of the precision envelope; mAP averages the four
damage classes, skipping classes with no ground truth.  Localization F1 is
class-agnostic and maximized over the detection confidence threshold;
classification accuracy is measured on the class-agnostic matched set only.

The `oracle_*` functions are deliberately naive re-implementations (fresh
matching per threshold, pure-python loops) kept as independent cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError

# Detections and ground truths are any objects exposing `.box` (+ detections:
# `.confidence`, `.damage_class`; ground truths: `.damage_class`).

NUM_CLASSES = 4


def iou(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    for box in (a, b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise InputError(f"degenerate box {box}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


@dataclass
class MatchPair:
    det_index: int
    gt_index: int
    iou: float
    det: object
    gt: object


@dataclass
class MatchResult:
    pairs: list[MatchPair]
    unmatched_dets: list[int]
    unmatched_gts: list[int]


def greedy_match(dets, gts, iou_threshold: float = 0.5,
                 class_aware: bool = False) -> MatchResult:
    """Confidence-descending greedy assignment, one use per ground truth.

    Ties on IoU break toward the lower ground-truth index; the confidence
    sort is stable, so equal-confidence detections keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = [False] * len(gts)
    pairs: list[MatchPair] = []
    unmatched_dets: list[int] = []
    for di in order:
        det = dets[di]
        best_gi, best_iou = -1, 0.0
        for gi, gt in enumerate(gts):
            if taken[gi]:
                continue
            if class_aware and det.damage_class != gt.damage_class:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_threshold and v > best_iou:
                best_gi, best_iou = gi, v
        if best_gi >= 0:
            taken[best_gi] = True
            pairs.append(MatchPair(di, best_gi, best_iou, det, gts[best_gi]))
        else:
            unmatched_dets.append(di)
    unmatched_gts = [gi for gi, t in enumerate(taken) if not t]
    return MatchResult(pairs, unmatched_dets, unmatched_gts)


def _as_scenes(dets, gts):
    """Accept flat single-scene lists or per-scene lists of lists."""
    flat_d = not dets or not isinstance(dets[0], list)
    flat_g = not gts or not isinstance(gts[0], list)
    if flat_d and flat_g:
        return [list(dets)], [list(gts)]
    if not flat_d and not flat_g:
        if len(dets) != len(gts):
            raise InputError("detection and ground-truth scene counts differ")
        return [list(d) for d in dets], [list(g) for g in gts]
    raise InputError("mixed flat and per-scene inputs")


def _global_order(scene_dets):
    """(scene, det) indices over all scenes, confidence descending, stable."""
    entries = [(si, di) for si, ds in enumerate(scene_dets)
               for di in range(len(ds))]
    return sorted(entries, key=lambda e: -scene_dets[e[0]][e[1]].confidence)


def _tp_flags(scene_dets, scene_gts, iou_threshold, class_filter=None,
              class_aware=False):
    """Greedy TP/FP flags in global confidence order (prefix-stable)."""
    if class_filter is not None:
        scene_dets = [[d for d in ds if d.damage_class == class_filter]
                      for ds in scene_dets]
        scene_gts = [[g for g in gs if g.damage_class == class_filter]
                     for gs in scene_gts]
    order = _global_order(scene_dets)
    taken = [[False] * len(gs) for gs in scene_gts]
    flags, confs = [], []
    for si, di in order:
        det = scene_dets[si][di]
        best_gi, best_iou = -1, 0.0
        for gi, gt in enumerate(scene_gts[si]):
            if taken[si][gi]:
                continue
            if class_aware and det.damage_class != gt.damage_class:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_threshold and v > best_iou:
                best_gi, best_iou = gi, v
        if best_gi >= 0:
            taken[si][best_gi] = True
            flags.append(True)
        else:
            flags.append(False)
        confs.append(det.confidence)
    n_gt = sum(len(gs) for gs in scene_gts)
    return flags, confs, n_gt


def average_precision(dets, gts, damage_class: int,
                      iou_threshold: float = 0.5) -> float:
    """All-point-interpolated AP for one damage class."""
    scene_dets, scene_gts = _as_scenes(dets, gts)
    flags, _, n_gt = _tp_flags(scene_dets, scene_gts, iou_threshold,
                               class_filter=damage_class)
    if n_gt == 0:
        return 0.0
    tp = fp = 0
    points = []  # (recall, precision) after each detection
    for is_tp in flags:
        tp += int(is_tp)
        fp += int(not is_tp)
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    best_future = 0.0
    # Walk right-to-left accumulating the precision envelope.
    envelope = [0.0] * len(points)
    for i in range(len(points) - 1, -1, -1):
        best_future = max(best_future, points[i][1])
        envelope[i] = best_future
    for (recall, _), env in zip(points, envelope):
        ap += (recall - prev_recall) * env
        prev_recall = recall
    return ap


def mean_average_precision(dets, gts, iou_threshold: float = 0.5) -> float:
    """Unweighted class mean of AP; classes without ground truth are skipped."""
    scene_dets, scene_gts = _as_scenes(dets, gts)
    aps = []
    for cls in range(NUM_CLASSES):
        if sum(1 for gs in scene_gts for g in gs if g.damage_class == cls) == 0:
            continue
        aps.append(average_precision(scene_dets, scene_gts, cls,
                                     iou_threshold))
    return sum(aps) / len(aps) if aps else 0.0


def _sweep_f1(flags, confs, n_gt):
    """Best F1 over unique-confidence cuts of a greedy TP/FP sequence."""
    best_f1, best_thr = 0.0, 1.0
    tp = 0
    k = 0
    n = len(flags)
    while k < n:
        conf = confs[k]
        while k < n and confs[k] == conf:
            tp += int(flags[k])
            k += 1
        precision = tp / k
        recall = tp / n_gt if n_gt else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        if f1 > best_f1:
            best_f1, best_thr = f1, conf
    return best_f1, best_thr


def localization_f1(dets, gts, iou_threshold: float = 0.5
                    ) -> tuple[float, float]:
    """Class-agnostic max F1 over the confidence sweep, and its threshold."""
    scene_dets, scene_gts = _as_scenes(dets, gts)
    flags, confs, n_gt = _tp_flags(scene_dets, scene_gts, iou_threshold)
    if not flags or n_gt == 0:
        return 0.0, 1.0
    return _sweep_f1(flags, confs, n_gt)


def classification_accuracy(match: MatchResult) -> float | None:
    """Fraction of matched pairs with the correct damage class.

    Returns None (an absent value, not zero) when nothing matched.
    """
    if not match.pairs:
        return None
    correct = sum(1 for p in match.pairs
                  if p.det.damage_class == p.gt.damage_class)
    return correct / len(match.pairs)


# -- report -----------------------------------------------------------------------


@dataclass
class EvalReport:
    map50: float
    localization_f1: float
    localization_threshold: float
    classification_accuracy: float | None
    micro: dict
    macro: dict
    per_class: dict
    n_detections: int
    n_ground_truth: int
    zero_predictions: bool
    shift_magnitude: int | None = None
    shift_direction: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["shift_direction"] = (list(self.shift_direction)
                                if self.shift_direction else None)
        return d


def _prf(tp: int, n_det: int, n_gt: int):
    precision = tp / n_det if n_det else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


def evaluate_detections(dets, gts, iou_threshold: float = 0.5,
                        shift_magnitude: int | None = None,
                        shift_direction=None) -> EvalReport:
    """Full report: mAP, swept localization F1, accuracy, micro/macro P/R/F1.

    The P/R/F1 operating point is the confidence threshold that maximizes the
    class-aware micro F1; both micro and macro aggregates are reported.
    Classification accuracy is taken on the class-agnostic matched set at the
    localization-optimal threshold.
    """
    scene_dets, scene_gts = _as_scenes(dets, gts)
    map50 = mean_average_precision(scene_dets, scene_gts, iou_threshold)
    loc_f1, loc_thr = localization_f1(scene_dets, scene_gts, iou_threshold)

    # Class-agnostic matching at the localization operating point.
    matches = [greedy_match([d for d in ds if d.confidence >= loc_thr], gs,
                            iou_threshold, class_aware=False)
               for ds, gs in zip(scene_dets, scene_gts)]
    all_pairs = [p for m in matches for p in m.pairs]
    cls_acc = classification_accuracy(
        MatchResult(all_pairs, [], [])) if all_pairs else None

    # Class-aware micro sweep chooses the P/R/F1 operating point.
    flags, confs, n_gt = _tp_flags(scene_dets, scene_gts, iou_threshold,
                                   class_aware=True)
    if flags and n_gt:
        _, op_thr = _sweep_f1(flags, confs, n_gt)
    else:
        op_thr = 0.0
    kept = [[d for d in ds if d.confidence >= op_thr] for ds in scene_dets]
    per_class = {}
    micro_tp = micro_det = 0
    for cls in range(NUM_CLASSES):
        cls_flags, _, cls_gt = _tp_flags(kept, scene_gts, iou_threshold,
                                         class_filter=cls)
        tp = sum(cls_flags)
        n_det = len(cls_flags)
        micro_tp += tp
        micro_det += n_det
        if cls_gt == 0 and n_det == 0:
            continue
        p, r, f1 = _prf(tp, n_det, cls_gt)
        per_class[cls] = {"precision": p, "recall": r, "f1": f1,
                          "n_gt": cls_gt, "n_det": n_det}
    macro = {}
    if per_class:
        for key in ("precision", "recall", "f1"):
            macro[key] = sum(v[key] for v in per_class.values()) / len(per_class)
    mp, mr, mf = _prf(micro_tp, micro_det, n_gt)
    micro = {"precision": mp, "recall": mr, "f1": mf, "threshold": op_thr}

    n_detections = sum(len(ds) for ds in scene_dets)
    return EvalReport(
        map50=map50,
        localization_f1=loc_f1,
        localization_threshold=loc_thr,
        classification_accuracy=cls_acc,
        micro=micro,
        macro=macro,
        per_class=per_class,
        n_detections=n_detections,
        n_ground_truth=sum(len(gs) for gs in scene_gts),
        zero_predictions=n_detections == 0,
        shift_magnitude=shift_magnitude,
        shift_direction=tuple(shift_direction) if shift_direction else None,
    )


# -- brute-force oracles ------------------------------------------------------------


def _oracle_iou(a, b) -> float:
    left, top = max(a[0], b[0]), max(a[1], b[1])
    right, bottom = min(a[2], b[2]), min(a[3], b[3])
    if right <= left or bottom <= top:
        return 0.0
    inter = (right - left) * (bottom - top)
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def oracle_greedy_match(dets, gts, iou_threshold: float = 0.5,
                        class_aware: bool = False) -> MatchResult:
    """Literal restatement of the matching rule, kept independent on purpose."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    used: set[int] = set()
    pairs: list[MatchPair] = []
    unmatched: list[int] = []
    for di in order:
        candidates = []
        for gi in range(len(gts)):
            if gi in used:
                continue
            if class_aware and dets[di].damage_class != gts[gi].damage_class:
                continue
            v = _oracle_iou(dets[di].box, gts[gi].box)
            if v >= iou_threshold:
                candidates.append((v, -gi))
        if candidates:
            v, neg_gi = max(candidates)
            gi = -neg_gi
            used.add(gi)
            pairs.append(MatchPair(di, gi, v, dets[di], gts[gi]))
        else:
            unmatched.append(di)
    return MatchResult(pairs, unmatched,
                       [gi for gi in range(len(gts)) if gi not in used])


def oracle_average_precision(dets, gts, damage_class: int,
                             iou_threshold: float = 0.5) -> float:
    """AP by re-matching every top-k prefix of the sorted detection list."""
    scene_dets, scene_gts = _as_scenes(dets, gts)
    cls_dets = [[d for d in ds if d.damage_class == damage_class]
                for ds in scene_dets]
    cls_gts = [[g for g in gs if g.damage_class == damage_class]
               for gs in scene_gts]
    n_gt = sum(len(gs) for gs in cls_gts)
    if n_gt == 0:
        return 0.0
    order = _global_order(cls_dets)
    points = []
    for k in range(1, len(order) + 1):
        prefix = order[:k]
        per_scene = [[] for _ in cls_dets]
        for si, di in prefix:
            per_scene[si].append(cls_dets[si][di])
        tp = sum(len(oracle_greedy_match(ds, gs, iou_threshold).pairs)
                 for ds, gs in zip(per_scene, cls_gts))
        points.append((tp / n_gt, tp / k))
    ap = 0.0
    prev = 0.0
    for i, (recall, _) in enumerate(points):
        envelope = max(p for _, p in points[i:])
        ap += (recall - prev) * envelope
        prev = recall
    return ap


def oracle_localization_sweep(dets, gts, iou_threshold: float = 0.5
                              ) -> tuple[float, float]:
    """Exhaustive F1 evaluation at every distinct confidence value."""
    scene_dets, scene_gts = _as_scenes(dets, gts)
    n_gt = sum(len(gs) for gs in scene_gts)
    confs = sorted({d.confidence for ds in scene_dets for d in ds},
                   reverse=True)
    best_f1, best_thr = 0.0, 1.0
    for thr in confs:
        kept = [[d for d in ds if d.confidence >= thr] for ds in scene_dets]
        tp = sum(len(oracle_greedy_match(ds, gs, iou_threshold).pairs)
                 for ds, gs in zip(kept, scene_gts))
        n_det = sum(len(ds) for ds in kept)
        p, r, f1 = _prf(tp, n_det, n_gt)
        if f1 > best_f1:
            best_f1, best_thr = f1, thr
    return best_f1, best_thr
