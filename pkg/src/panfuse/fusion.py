"""Greedy combination of instance predictions with a semantic label map.

Instances are painted in priority order (score, then mask area, then input
index). An instance whose mask is already claimed by more than
``overlap_threshold`` of its area is dropped; otherwise it takes its unclaimed
pixels. Remaining pixels take the semantic label: each stuff category becomes at
most one segment, small ones are dropped, and merged-thing or VOID pixels stay
VOID.

Segment ids are assigned 1, 2, ... to kept instances in paint order, then to
stuff segments in ascending category id.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coco_io import PanopticImage, SegmentInfo, as_category_index, segment_geometry
from .errors import DimensionMismatch, PanfuseError, ValidationError
from .mask import VOID, LabelMap, ScoredInstance, rle_decode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionParams:
    score_threshold: float = 0.5
    overlap_threshold: float = 0.5
    stuff_area_min: int = 4096

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValidationError(f"score_threshold {self.score_threshold} outside [0, 1]")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValidationError(f"overlap_threshold {self.overlap_threshold} outside [0, 1]")
        if self.stuff_area_min < 0:
            raise ValidationError("stuff_area_min must be >= 0")


@dataclass
class FusionStats:
    images: int = 0
    instances_in: int = 0
    dropped_low_score: int = 0
    dropped_overlap: int = 0
    dropped_stuff: int = 0
    void_pixels: int = 0
    total_pixels: int = 0

    @property
    def dropped_instances(self) -> int:
        return self.dropped_low_score + self.dropped_overlap

    @property
    def void_fraction(self) -> float:
        return self.void_pixels / self.total_pixels if self.total_pixels else 0.0

    def __iadd__(self, other: "FusionStats"):
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def to_json(self) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["dropped_instances"] = self.dropped_instances
        out["void_fraction"] = self.void_fraction
        return out


def paint_order(instances: Sequence[ScoredInstance]) -> list[int]:
    """Indices sorted by score desc, then mask area desc, then input index."""
    return sorted(range(len(instances)), key=lambda i: (-instances[i].score, -instances[i].area, i))


def fuse_with_stats(
    instances: Sequence[ScoredInstance],
    semantic: LabelMap,
    params: FusionParams,
    categories,
) -> tuple[PanopticImage, FusionStats]:
    index = as_category_index(categories)
    height, width = semantic.height, semantic.width
    for inst in instances:
        if (inst.mask.width, inst.mask.height) != (width, height):
            raise DimensionMismatch(
                f"instance mask {inst.mask.width}x{inst.mask.height} vs semantic {width}x{height}"
            )
        cat = index.get(inst.category_id)
        if cat is None:
            raise ValidationError(f"instance has unknown category {inst.category_id}")
        if not cat.isthing:
            raise ValidationError(f"instance has stuff category {inst.category_id} ({cat.name})")

    stats = FusionStats(images=1, instances_in=len(instances), total_pixels=width * height)
    id_map = np.zeros((height, width), dtype=np.int64)
    category_of: dict[int, int] = {}
    next_id = 1

    for i in paint_order(instances):
        inst = instances[i]
        if inst.score < params.score_threshold:
            stats.dropped_low_score += 1
            continue
        mask = rle_decode(inst.mask)
        area = inst.area
        free = mask & (id_map == VOID)
        free_area = int(free.sum())
        # a fully covered instance cannot yield a nonempty segment, whatever the threshold
        if (area - free_area) / area > params.overlap_threshold or free_area == 0:
            stats.dropped_overlap += 1
            continue
        id_map[free] = next_id
        category_of[next_id] = inst.category_id
        next_id += 1

    unclaimed = id_map == VOID
    sem = semantic.labels
    stuff_ids = sorted(c.id for c in index.values() if not c.isthing)
    present, counts = np.unique(sem[unclaimed], return_counts=True)
    areas = dict(zip(present.tolist(), counts.tolist()))
    for cat_id in stuff_ids:
        area = areas.get(cat_id, 0)
        if area == 0:
            continue
        if area < params.stuff_area_min:
            stats.dropped_stuff += 1
            continue
        id_map[unclaimed & (sem == cat_id)] = next_id
        category_of[next_id] = cat_id
        next_id += 1

    geometry = segment_geometry(id_map)
    segments = tuple(
        SegmentInfo(seg_id, category_of[seg_id], *geometry[seg_id]) for seg_id in sorted(geometry)
    )
    stats.void_pixels = int((id_map == VOID).sum())
    return PanopticImage(width, height, id_map, segments), stats


def fuse(instances: Sequence[ScoredInstance], semantic: LabelMap, params: FusionParams, categories) -> PanopticImage:
    return fuse_with_stats(instances, semantic, params, categories)[0]


class FusionImageError(PanfuseError):
    def __init__(self, image_id, cause: Exception):
        super().__init__(f"image {image_id}: {cause}")
        self.image_id = image_id
        self.cause = cause


@dataclass
class FusionBatchResult:
    panoptic: dict = field(default_factory=dict)
    per_image: dict = field(default_factory=dict)
    stats: FusionStats = field(default_factory=FusionStats)


def fuse_batch(inputs, params: FusionParams, categories, parallelism: int = 1) -> FusionBatchResult:
    """Fuse ``(image_id, instances, semantic)`` triples.

    Per-image work may run on several threads; results and summed statistics are
    collected in input order so the outcome is independent of ``parallelism``.
    """
    inputs = list(inputs)
    index = as_category_index(categories)

    def work(item):
        image_id, instances, semantic = item
        try:
            return fuse_with_stats(instances, semantic, params, index)
        except PanfuseError as exc:
            raise FusionImageError(image_id, exc) from exc

    if parallelism > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, inputs))
    else:
        results = [work(item) for item in inputs]

    out = FusionBatchResult()
    for (image_id, _, _), (pan, stats) in zip(inputs, results):
        out.panoptic[image_id] = pan
        out.per_image[image_id] = stats
        out.stats += stats
    return out
