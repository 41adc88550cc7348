"""Synthetic panoptic scenes and controllably degraded predictions.

Scenes are horizontal stuff bands with rounded-rectangle things painted on top
in z-order. All randomness comes from ``numpy.random.default_rng`` seeded with
``SeedSequence([rng_seed, stream])``; stream 0 drives the ground truth and
stream 1 the degradation. Degradation draws every random number whether or not
the corresponding knob is active, so two specs differing only in one rate see
the same random stream (raising a rate only adds damage, never reshuffles it).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage

from .coco_io import Category, PanopticImage, as_category_index, panoptic_to_semantic_gt, semantic_categories
from .ensemble import SemanticConfidenceMap
from .errors import GenerationError, ValidationError
from .experts import ExpertRouting
from .mask import VOID, LabelMap, ScoredInstance, rle_decode, rle_encode

DEFAULT_CATEGORIES = (
    Category(1, "person", True, (220, 20, 60)),
    Category(2, "bicycle", True, (119, 11, 32)),
    Category(3, "car", True, (0, 0, 142)),
    Category(18, "dog", True, (255, 179, 240)),
    Category(44, "bottle", True, (197, 226, 255)),
    Category(187, "sky-other-merged", False, (70, 130, 180)),
    Category(191, "pavement-merged", False, (96, 96, 96)),
    Category(193, "grass-merged", False, (152, 251, 152)),
    Category(197, "building-other-merged", False, (134, 199, 156)),
)

# person dominates, mirroring the imbalance of real detection data
DEFAULT_THING_WEIGHTS = {1: 0.45, 3: 0.2, 2: 0.35 / 3, 18: 0.35 / 3, 44: 0.35 / 3}
DEFAULT_EXPERTS = {"person": (1,), "car": (3,)}


@dataclass(frozen=True)
class Degradation:
    boundary_erosion_px: int = 0
    false_positive_rate: float = 0.0
    drop_rate: float = 0.0
    score_noise_sigma: float = 0.0
    semantic_flip_rate: float = 0.0
    # single-model bias: non-dominant objects relabeled as the dominant category
    confusion_rate: float = 0.0
    # experts also fire on categories they do not own; routing discards these
    off_category_rate: float = 0.0
    n_semantic_models: int = 3
    semantic_jitter: float = 0.2

    def __post_init__(self):
        for name in ("false_positive_rate", "drop_rate", "semantic_flip_rate", "confusion_rate", "off_category_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.boundary_erosion_px < 0:
            raise ValidationError("boundary_erosion_px must be >= 0")
        if self.score_noise_sigma < 0 or self.semantic_jitter < 0:
            raise ValidationError("noise scales must be >= 0")
        if self.n_semantic_models < 1:
            raise ValidationError("need at least one semantic model")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 640
    height: int = 480
    n_things: int = 6
    rng_seed: int = 0
    categories: tuple = DEFAULT_CATEGORIES
    thing_weights: Optional[Mapping[int, float]] = None
    experts: Mapping[str, tuple] = field(default_factory=lambda: dict(DEFAULT_EXPERTS))
    rest_expert: str = "rest"
    dominant_category: Optional[int] = None
    n_stuff_regions: int = 3
    thing_size: tuple = (0.06, 0.3)
    min_thing_area: int = 16
    stuff_area_min: int = 4096
    max_attempts: int = 50
    degradation: Degradation = Degradation()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("scene dimensions must be positive")
        if self.n_things < 0:
            raise ValidationError("n_things must be >= 0")
        index = as_category_index(self.categories)
        if self.n_things and not any(c.isthing for c in index.values()):
            raise ValidationError("things requested but no thing categories given")
        if not any(not c.isthing for c in index.values()):
            raise ValidationError("need at least one stuff category")

    @property
    def thing_ids(self) -> list[int]:
        return sorted(c.id for c in self.categories if c.isthing)

    @property
    def stuff_ids(self) -> list[int]:
        return sorted(c.id for c in self.categories if not c.isthing)

    @property
    def dominant(self) -> int:
        if self.dominant_category is not None:
            return self.dominant_category
        weights = self.weights()
        return max(self.thing_ids, key=lambda c: (weights[c], -c))

    def weights(self) -> dict[int, float]:
        ids = self.thing_ids
        raw = self.thing_weights
        if raw is None:
            raw = DEFAULT_THING_WEIGHTS if set(ids) == set(DEFAULT_THING_WEIGHTS) else {c: 1.0 for c in ids}
        total = sum(raw.get(c, 0.0) for c in ids)
        return {c: raw.get(c, 0.0) / total for c in ids}

    def routing(self) -> ExpertRouting:
        owned = {name: [c for c in cats if c in self.thing_ids] for name, cats in self.experts.items()}
        return ExpertRouting.build(owned, self.categories, rest=self.rest_expert)

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, rng_seed=seed)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    spec: SceneSpec
    panoptic: PanopticImage
    semantic: LabelMap
    semantic_full: LabelMap  # semantic GT before tiny stuff regions were voided
    instances: tuple


@dataclass
class DegradedPredictions:
    single_model: list
    per_expert: dict
    semantic_maps: list
    routing: ExpertRouting


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def rounded_rect(width: int, height: int, x0: int, y0: int, w: int, h: int, radius: int) -> np.ndarray:
    """Pixels whose centers lie in the ``w`` x ``h`` box with corners rounded by ``radius``.

    With ``radius == 0`` the result is exactly the box, ``w * h`` pixels (clipped
    to the image).
    """
    radius = min(radius, w // 2, h // 2)
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    inside = (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
    if radius > 0:
        cx = np.clip(xs, x0 + radius, x0 + w - radius)
        cy = np.clip(ys, y0 + radius, y0 + h - radius)
        inside &= (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    return inside


def _draw_blob(rng: np.random.Generator, spec: SceneSpec) -> tuple[int, int, int, int, int]:
    short = min(spec.width, spec.height)
    lo = max(1, int(round(spec.thing_size[0] * short)))
    hi = max(lo, int(round(spec.thing_size[1] * short)))
    w = int(min(rng.integers(lo, hi + 1), spec.width))
    h = int(min(rng.integers(lo, hi + 1), spec.height))
    x0 = int(rng.integers(0, spec.width - w + 1))
    y0 = int(rng.integers(0, spec.height - h + 1))
    r = int(rng.integers(0, min(w, h) // 4 + 1))
    return x0, y0, w, h, r


def _stuff_layout(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    stuff = spec.stuff_ids
    n = max(1, min(spec.n_stuff_regions, len(stuff), spec.height))
    cats = rng.choice(stuff, size=n, replace=False)
    cuts = np.sort(rng.choice(np.arange(1, spec.height), size=n - 1, replace=False)) if n > 1 else []
    bounds = np.concatenate(([0], cuts, [spec.height])).astype(int)
    layout = np.empty((spec.height, spec.width), dtype=np.int64)
    for k in range(n):
        layout[bounds[k] : bounds[k + 1]] = cats[k]
    return layout


def generate_gt(spec: SceneSpec) -> SyntheticScene:
    rng = _rng(spec.rng_seed, 0)
    layout = _stuff_layout(rng, spec)
    weights = spec.weights()
    thing_ids = spec.thing_ids
    p = np.array([weights[c] for c in thing_ids]) if thing_ids else None

    for _ in range(spec.max_attempts):
        id_map = np.zeros((spec.height, spec.width), dtype=np.int64)
        cats = []
        for i in range(spec.n_things):
            x0, y0, w, h, r = _draw_blob(rng, spec)
            cats.append(int(rng.choice(thing_ids, p=p)))
            id_map[rounded_rect(spec.width, spec.height, x0, y0, w, h, r)] = i + 1
        visible = np.bincount(id_map.ravel(), minlength=spec.n_things + 1)[1:]
        if (visible >= max(spec.min_thing_area, 1)).all():
            break
    else:
        raise GenerationError(
            f"could not place {spec.n_things} things with >= {spec.min_thing_area} visible pixels "
            f"on {spec.width}x{spec.height} after {spec.max_attempts} attempts"
        )

    category_of = {i + 1: c for i, c in enumerate(cats)}
    free = id_map == VOID
    next_id = spec.n_things + 1
    for cat_id in spec.stuff_ids:
        region = free & (layout == cat_id)
        area = int(region.sum())
        if area == 0 or area < spec.stuff_area_min:
            continue
        id_map[region] = next_id
        category_of[next_id] = cat_id
        next_id += 1

    pan = PanopticImage.from_id_map(id_map, category_of)
    semantic = panoptic_to_semantic_gt(pan, spec.categories)
    full = np.where(semantic.labels == VOID, layout, semantic.labels)
    instances = tuple(
        ScoredInstance(category_of[i + 1], 1.0, rle_encode(id_map == i + 1)) for i in range(spec.n_things)
    )
    return SyntheticScene(spec, pan, semantic, LabelMap(full), instances)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-element erosion; the image border does not count as object boundary."""
    if radius <= 0:
        return mask
    return ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), iterations=radius, border_value=1)


def _blob_instance(spec: SceneSpec, geom, category_id: int, score: float) -> ScoredInstance:
    return ScoredInstance(category_id, score, rle_encode(rounded_rect(spec.width, spec.height, *geom)))


def degrade(scene: SyntheticScene, spec: Optional[SceneSpec] = None) -> DegradedPredictions:
    spec = spec or scene.spec
    deg = spec.degradation
    rng = _rng(spec.rng_seed, 1)
    routing = spec.routing()
    thing_ids = spec.thing_ids
    dominant = spec.dominant if thing_ids else None

    # true detections, with and without the single model's category bias
    clean, biased = [], []
    for inst in scene.instances:
        u_drop, z, u_conf = rng.random(), rng.normal(), rng.random()
        if u_drop < deg.drop_rate:
            continue
        mask = erode(rle_decode(inst.mask), deg.boundary_erosion_px)
        if not mask.any():
            continue
        score = float(np.clip(1.0 - abs(z) * deg.score_noise_sigma, 0.0, 1.0))
        det = ScoredInstance(inst.category_id, score, rle_encode(mask))
        clean.append(det)
        if inst.category_id != dominant and u_conf < deg.confusion_rate:
            det = ScoredInstance(dominant, score, det.mask)
        biased.append(det)

    false_pos = []
    for _ in range(len(scene.instances)):
        u, geom = rng.random(), _draw_blob(rng, spec)
        cat = thing_ids[int(rng.integers(0, len(thing_ids)))]
        score = float(rng.uniform(0.3, 1.0))
        if u < deg.false_positive_rate:
            false_pos.append(_blob_instance(spec, geom, cat, score))

    per_expert = {}
    for expert in routing.experts:
        owned = expert.categories
        foreign = [c for c in thing_ids if c not in owned]
        preds = [d for d in clean + false_pos if d.category_id in owned]
        for _ in range(len(scene.instances)):
            u, geom = rng.random(), _draw_blob(rng, spec)
            pick, score = rng.random(), float(rng.uniform(0.5, 1.0))
            if foreign and u < deg.off_category_rate:
                preds.append(_blob_instance(spec, geom, foreign[int(pick * len(foreign))], score))
        per_expert[expert.name] = preds

    sem_ids = [c.id for c in semantic_categories(spec.categories)]
    k = len(sem_ids)
    truth = np.searchsorted(np.asarray(sem_ids), scene.semantic_full.labels)
    maps = []
    for _ in range(deg.n_semantic_models):
        u = rng.random(truth.shape)
        shift = rng.integers(1, k, size=truth.shape) if k > 1 else np.zeros(truth.shape, np.int64)
        jitter = rng.random((k,) + truth.shape) * deg.semantic_jitter
        label = np.where(u < deg.semantic_flip_rate, (truth + shift) % k, truth)
        probs = jitter
        np.put_along_axis(probs, label[None], np.take_along_axis(probs, label[None], 0) + 1.0, 0)
        probs /= probs.sum(axis=0, keepdims=True)
        maps.append(SemanticConfidenceMap(tuple(sem_ids), probs))

    return DegradedPredictions(biased + false_pos, per_expert, maps, routing)
