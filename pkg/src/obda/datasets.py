"""Scene sources: a deterministic synthetic generator and xBD-style ingestion.

The generator renders rectangular "buildings" over a textured background and
applies a per-building damage effect to the post image.  Effects are chosen
so that minor/major damage is ambiguous from the post image alone (roof
albedos overlap across buildings), which is exactly what makes the pre-image
latent worth uplinking.

Damage classes: 0 no_damage, 1 minor, 2 major, 3 destroyed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import GenerationError, IngestError, InputError
from .geoproto import BoxAnnotation, ScenePair, apply_shift

log = logging.getLogger(__name__)

DAMAGE_LABEL_MAP = {
    "no-damage": 0,
    "minor-damage": 1,
    "major-damage": 2,
    "destroyed": 3,
}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_size: int = 256
    building_count_range: tuple[int, int] = (5, 9)
    building_size_range: tuple[int, int] = (18, 42)
    class_distribution: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    background_texture_seed: int | None = None
    illumination_jitter: float = 0.02
    post_shift: tuple[int, int] | None = None

    def __post_init__(self):
        if self.image_size % 32:
            raise InputError("image_size must be divisible by 32")
        lo, hi = self.building_count_range
        if not (1 <= lo <= hi):
            raise InputError("bad building_count_range")
        slo, shi = self.building_size_range
        if not (4 <= slo <= shi < self.image_size):
            raise InputError("bad building_size_range")
        if abs(sum(self.class_distribution) - 1.0) > 1e-9:
            raise InputError("class_distribution must sum to 1")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "building_count_range": list(self.building_count_range),
            "building_size_range": list(self.building_size_range),
            "class_distribution": list(self.class_distribution),
            "background_texture_seed": self.background_texture_seed,
            "illumination_jitter": self.illumination_jitter,
            "post_shift": list(self.post_shift) if self.post_shift else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        return cls(
            image_size=d["image_size"],
            building_count_range=tuple(d["building_count_range"]),
            building_size_range=tuple(d["building_size_range"]),
            class_distribution=tuple(d["class_distribution"]),
            background_texture_seed=d.get("background_texture_seed"),
            illumination_jitter=d.get("illumination_jitter", 0.02),
            post_shift=tuple(d["post_shift"]) if d.get("post_shift") else None,
        )


def render_background(spec: SyntheticSceneSpec, seed: int) -> np.ndarray:
    """Low-frequency textured ground, deterministic in (spec, seed)."""
    bg_seed = spec.background_texture_seed
    rng = np.random.default_rng(seed if bg_seed is None else bg_seed + seed)
    n = spec.image_size
    coarse = rng.uniform(0.0, 1.0, size=(3, n // 16, n // 16))
    tex = zoom(coarse, (1, 16, 16), order=1)[:, :n, :n]
    fine = rng.uniform(-0.02, 0.02, size=(3, n, n))
    base = rng.uniform(0.22, 0.34, size=(3, 1, 1))
    bg = base + 0.10 * tex + fine
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def _place_buildings(spec: SyntheticSceneSpec, rng: np.random.Generator):
    n = spec.image_size
    count = int(rng.integers(spec.building_count_range[0],
                             spec.building_count_range[1] + 1))
    slo, shi = spec.building_size_range
    placed: list[tuple[int, int, int, int]] = []
    attempts = 0
    margin = 4
    while len(placed) < count:
        attempts += 1
        if attempts > 1000:
            raise GenerationError(
                f"could not place {count} non-overlapping buildings in "
                f"{n}x{n} after 1000 attempts")
        w = int(rng.integers(slo, shi + 1))
        h = int(rng.integers(slo, shi + 1))
        x0 = int(rng.integers(2, n - w - 2))
        y0 = int(rng.integers(2, n - h - 2))
        box = (x0, y0, x0 + w, y0 + h)
        clear = all(box[2] + margin <= b[0] or b[2] + margin <= box[0] or
                    box[3] + margin <= b[1] or b[3] + margin <= box[1]
                    for b in placed)
        if clear:
            placed.append(box)
    return placed


def generate_scene(spec: SyntheticSceneSpec, seed: int) -> ScenePair:
    """Render one pre/post pair with object-level damage annotations.

    Per-class post effects:
      no_damage  unchanged (modulo global illumination jitter)
      minor      roof brightness shift over the whole footprint
      major      high-variance texture corruption of >= 40% of the box
      destroyed  footprint replaced by background plus rubble speckle
    """
    rng = np.random.default_rng(seed)
    background = render_background(spec, seed)
    pre = background.copy()
    boxes = _place_buildings(spec, rng)
    classes = rng.choice(4, size=len(boxes),
                         p=np.asarray(spec.class_distribution, dtype=np.float64))

    annotations = []
    for box in boxes:
        x0, y0, x1, y1 = box
        # Roof albedo well above the background band, plus mild texture
        # and a darker rim so buildings have edges.
        albedo = rng.uniform(0.55, 0.95, size=(3, 1, 1)).astype(np.float32)
        roof = albedo + rng.uniform(-0.03, 0.03,
                                    size=(3, y1 - y0, x1 - x0)).astype(np.float32)
        pre[:, y0:y1, x0:x1] = np.clip(roof, 0.0, 1.0)
        pre[:, y0, x0:x1] *= 0.7
        pre[:, y1 - 1, x0:x1] *= 0.7
        pre[:, y0:y1, x0] *= 0.7
        pre[:, y0:y1, x1 - 1] *= 0.7

    post = pre.copy()
    for box, cls in zip(boxes, classes):
        x0, y0, x1, y1 = box
        cls = int(cls)
        annotations.append(BoxAnnotation(tuple(float(v) for v in box), cls))
        if cls == 1:  # minor: roof brightness shift
            factor = rng.uniform(0.65, 0.78)
            post[:, y0:y1, x0:x1] *= factor
        elif cls == 2:  # major: corrupt a sub-region of at least 40% area
            w, h = x1 - x0, y1 - y0
            for frac in (0.75, 0.8, 0.9, 1.0):
                cw, ch = max(2, int(w * frac)), max(2, int(h * frac))
                if cw * ch >= 0.4 * w * h:
                    break
            cx0 = x0 + int(rng.integers(0, w - cw + 1))
            cy0 = y0 + int(rng.integers(0, h - ch + 1))
            noise = rng.uniform(0.05, 0.65, size=(3, ch, cw)).astype(np.float32)
            post[:, cy0:cy0 + ch, cx0:cx0 + cw] = noise
        elif cls == 3:  # destroyed: back to ground plus rubble speckle
            post[:, y0:y1, x0:x1] = background[:, y0:y1, x0:x1]
            speckle = rng.uniform(0.0, 1.0, size=(y1 - y0, x1 - x0)) < 0.25
            rubble = rng.uniform(0.35, 0.6, size=(3, y1 - y0, x1 - x0))
            region = post[:, y0:y1, x0:x1]
            post[:, y0:y1, x0:x1] = np.where(speckle[None], rubble, region)

    if spec.illumination_jitter > 0:
        gain = 1.0 + rng.uniform(-spec.illumination_jitter,
                                 spec.illumination_jitter)
        bias = rng.uniform(-spec.illumination_jitter / 2,
                           spec.illumination_jitter / 2)
        post = post * gain + bias
    post = np.clip(post, 0.0, 1.0).astype(np.float32)
    pre = np.clip(pre, 0.0, 1.0).astype(np.float32)

    pair = ScenePair(pre, post, annotations)
    if spec.post_shift is not None:
        pair = apply_shift(pair, *spec.post_shift)
    return pair


# -- xBD-style ingestion ----------------------------------------------------------


def _polygon_to_box(vertices) -> tuple[float, float, float, float]:
    xs = [float(v[0]) for v in vertices]
    ys = [float(v[1]) for v in vertices]
    return (min(xs), min(ys), max(xs), max(ys))


def _read_annotation_file(path: Path) -> list[BoxAnnotation]:
    try:
        doc = json.loads(path.read_text())
        out = []
        for feature in doc["features"]:
            label = feature.get("subtype") or \
                feature.get("properties", {}).get("subtype")
            if label not in DAMAGE_LABEL_MAP:
                continue  # un-classified / unknown labels are dropped
            vertices = feature.get("polygon") or \
                feature.get("properties", {}).get("polygon")
            box = _polygon_to_box(vertices)
            out.append(BoxAnnotation(box, DAMAGE_LABEL_MAP[label]))
        return out
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise IngestError(f"malformed annotation file {path}: {e}") from e


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def ingest_xbd(image_dir: str | Path, annotation_dir: str | Path
               ) -> list[tuple[str, ScenePair]]:
    """Pair `*_pre_disaster.png` / `*_post_disaster.png` scenes with their
    post-event polygon annotations (converted to axis-aligned boxes).

    Tier 3 material is excluded; scenes missing a pair member are skipped
    with a warning.  Returns (scene_id, pair) tuples.
    """
    image_dir, annotation_dir = Path(image_dir), Path(annotation_dir)
    scenes = []
    for pre_path in sorted(image_dir.glob("*_pre_disaster.png")):
        # Tier 3 exclusion: the dataset root or the scene file names it.
        parts = (image_dir.name,) + pre_path.relative_to(image_dir).parts
        if any("tier3" in p.lower() for p in parts):
            continue
        scene_id = pre_path.name[:-len("_pre_disaster.png")]
        post_path = image_dir / f"{scene_id}_post_disaster.png"
        ann_path = annotation_dir / f"{scene_id}_post_disaster.json"
        if not post_path.exists() or not ann_path.exists():
            log.warning("skipping %s: missing pair member", scene_id)
            continue
        annotations = _read_annotation_file(ann_path)
        pre = _load_png(pre_path)
        post = _load_png(post_path)
        scenes.append((scene_id, ScenePair(pre, post, annotations)))
    return scenes


# -- splits and manifests -----------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    fractions: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val),
                "test": list(self.test), "fractions": list(self.fractions)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]),
                   tuple(d["fractions"]))


def make_split(ids, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle + cumulative-floor partition (disjoint, exhaustive)."""
    ids = list(ids)
    if not ids:
        raise InputError("cannot split an empty id list")
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise InputError("fractions must be three values summing to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    c1 = int(np.floor(fractions[0] * n))
    c2 = int(np.floor((fractions[0] + fractions[1]) * n))
    return DatasetSplit(tuple(shuffled[:c1]), tuple(shuffled[c1:c2]),
                        tuple(shuffled[c2:]), tuple(fractions))


@dataclass
class SyntheticManifest:
    """Spec + seeds + split: everything needed to regenerate a dataset."""

    spec: SyntheticSceneSpec
    seeds: tuple[int, ...]
    split: DatasetSplit

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "seeds": list(self.seeds),
                "split": self.split.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticManifest":
        return cls(SyntheticSceneSpec.from_dict(d["spec"]),
                   tuple(d["seeds"]), DatasetSplit.from_dict(d["split"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def scene(self, seed: int) -> ScenePair:
        return generate_scene(self.spec, seed)


def make_synthetic_manifest(spec: SyntheticSceneSpec, n_scenes: int,
                            base_seed: int = 0,
                            fractions=(0.6, 0.2, 0.2)) -> SyntheticManifest:
    seeds = tuple(base_seed + i for i in range(n_scenes))
    split = make_split(list(seeds), fractions, seed=base_seed)
    return SyntheticManifest(spec, seeds, split)
