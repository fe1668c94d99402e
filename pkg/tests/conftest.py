import numpy as np
import pytest

from obda.detector import Detection
from obda.geoproto import BoxAnnotation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_detection(box, damage_class=0, confidence=0.9):
    scores = np.full(4, (1 - confidence) / 3, dtype=np.float64)
    scores[damage_class] = confidence
    return Detection(box=tuple(float(v) for v in box),
                     damage_class=damage_class,
                     objectness=confidence,
                     class_scores=scores,
                     confidence=float(confidence))


def make_gt(box, damage_class=0):
    return BoxAnnotation(tuple(float(v) for v in box), damage_class)


def random_boxes(rng, n, span=100.0, min_size=4.0, max_size=30.0):
    boxes = []
    for _ in range(n):
        w = rng.uniform(min_size, max_size)
        h = rng.uniform(min_size, max_size)
        x0 = rng.uniform(0, span - w)
        y0 = rng.uniform(0, span - h)
        boxes.append((x0, y0, x0 + w, y0 + h))
    return boxes
