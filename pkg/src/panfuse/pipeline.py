"""Library-level wiring: strategies, evaluation passes and on-disk datasets.

The CLI is a thin shell over these functions, so calling them directly gives
bit-identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .coco_io import (
    ImageInfo,
    PanopticImage,
    as_category_index,
    instance_records,
    dump_json,
    panoptic_things_as_instances,
    panoptic_to_semantic_gt,
    semantic_categories,
    write_label_png,
    write_panoptic_dataset,
)
from .ensemble import SemanticConfidenceMap, argmax_labels, ensemble_average, write_cmap
from .experts import ExpertRouting, merge_expert_predictions
from .fusion import FusionParams, FusionStats, fuse_batch
from .mask import LabelMap
from .metrics import MetricReport, coco_map, evaluate_panoptic, miou, pq_summarize
from .synth import DegradedPredictions, SceneSpec, degrade, generate_gt

logger = logging.getLogger(__name__)

# (name, use experts, use ensemble)
STRATEGIES = (
    ("baseline", False, False),
    ("+experts", True, False),
    ("+ensemble", False, True),
    ("+experts +ensemble", True, True),
)


@dataclass
class ImagePredictions:
    """Everything the strategies may draw on for one image."""

    single_model: list
    per_expert: dict
    semantic_maps: list


def _map(fn, items, parallelism: int):
    items = list(items)
    if parallelism > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def combine_semantic(maps: Sequence[SemanticConfidenceMap], ensemble: bool) -> LabelMap:
    return argmax_labels(ensemble_average(list(maps)) if ensemble else maps[0])


def combine_instances(pred: ImagePredictions, routing: ExpertRouting | None, experts: bool) -> list:
    if experts:
        return merge_expert_predictions(pred.per_expert, routing)
    return list(pred.single_model)


def run_strategy(
    preds: Mapping[int, ImagePredictions],
    categories,
    routing: ExpertRouting | None,
    params: FusionParams,
    experts: bool,
    ensemble: bool,
    parallelism: int = 1,
):
    image_ids = sorted(preds)

    def prepare(image_id):
        p = preds[image_id]
        return image_id, combine_instances(p, routing, experts), combine_semantic(p.semantic_maps, ensemble)

    inputs = _map(prepare, image_ids, parallelism)
    return fuse_batch(inputs, params, categories, parallelism)


@dataclass
class MatrixRow:
    strategy: str
    pq: dict
    fusion: FusionStats = field(default_factory=FusionStats)

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "pq": self.pq, "fusion": self.fusion.to_json()}


def run_matrix(
    gt: Mapping[int, PanopticImage],
    preds: Mapping[int, ImagePredictions],
    categories,
    routing: ExpertRouting,
    params: FusionParams,
    parallelism: int = 1,
    strategies=STRATEGIES,
) -> list[MatrixRow]:
    rows = []
    for name, experts, ensemble in strategies:
        batch = run_strategy(preds, categories, routing, params, experts, ensemble, parallelism)
        result = pq_summarize(evaluate_panoptic(gt, batch.panoptic, categories), categories)
        rows.append(MatrixRow(name, result.means, batch.stats))
    return rows


def format_matrix(rows: Sequence[MatrixRow]) -> str:
    lines = [f"{'Strategy':<22}|{'Experts':>8}|{'Ensemble':>9}|{'PQ':>7}|{'SQ':>7}|{'RQ':>7}", "-" * 64]
    flags = {name: (e, s) for name, e, s in STRATEGIES}
    for row in rows:
        e, s = flags.get(row.strategy, ("?", "?"))
        m = row.pq["all"]
        lines.append(
            f"{row.strategy:<22}|{('yes' if e else '-'):>8}|{('yes' if s else '-'):>9}|"
            f"{100 * m['pq']:7.1f}|{100 * m['sq']:7.1f}|{100 * m['rq']:7.1f}"
        )
    return "\n".join(lines) + "\n"


# --- synthetic datasets -------------------------------------------------------


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    images: list
    scenes: dict
    predictions: dict

    @property
    def categories(self):
        return list(self.spec.categories)

    @property
    def gt(self) -> dict:
        return {i: s.panoptic for i, s in self.scenes.items()}

    @property
    def routing(self) -> ExpertRouting:
        return self.spec.routing()


def _to_image_predictions(d: DegradedPredictions) -> ImagePredictions:
    return ImagePredictions(d.single_model, d.per_expert, d.semantic_maps)


def synthesize(spec: SceneSpec, n_scenes: int, parallelism: int = 1) -> SyntheticDataset:
    """Scenes with seeds ``spec.rng_seed + i``; image ids start at 1."""

    def one(i):
        scene_spec = spec.with_seed(spec.rng_seed + i)
        scene = generate_gt(scene_spec)
        return scene, degrade(scene)

    results = _map(one, range(n_scenes), parallelism)
    images, scenes, preds = [], {}, {}
    for i, (scene, deg) in enumerate(results):
        image_id = i + 1
        images.append(ImageInfo(image_id, f"synth_{image_id:06d}.jpg", spec.width, spec.height))
        scenes[image_id] = scene
        preds[image_id] = _to_image_predictions(deg)
    return SyntheticDataset(spec, images, scenes, preds)


def write_synthetic_dataset(ds: SyntheticDataset, root) -> dict:
    """Write GT and predictions in the coco_io formats; return a run config for ``fuse``/``matrix``."""
    root = Path(root)
    categories = ds.categories
    write_panoptic_dataset(root / "gt" / "panoptic.json", categories, ds.images, ds.gt)
    sem_dir = root / "gt" / "semantic"
    sem_dir.mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        (sem_dir / f"{Path(im.file_name).stem}.png").write_bytes(write_label_png(ds.scenes[im.id].semantic))

    pred_dir = root / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    single = {i: p.single_model for i, p in ds.predictions.items()}
    dump_json(instance_records(single), pred_dir / "instances_single.json")
    routing = ds.routing
    experts_cfg = {}
    for expert in routing.experts:
        per_image = {i: p.per_expert[expert.name] for i, p in ds.predictions.items()}
        path = pred_dir / f"instances_{expert.name}.json"
        dump_json(instance_records(per_image), path)
        entry = {"results": str(path.relative_to(root))}
        if expert.rest:
            entry["rest"] = True
        else:
            entry["categories"] = sorted(expert.categories)
        experts_cfg[expert.name] = entry

    n_models = ds.spec.degradation.n_semantic_models
    semantic_dirs = []
    for k in range(n_models):
        d = pred_dir / f"semantic_{k}"
        d.mkdir(parents=True, exist_ok=True)
        for im in ds.images:
            (d / f"{Path(im.file_name).stem}.cmap").write_bytes(write_cmap(ds.predictions[im.id].semantic_maps[k]))
        semantic_dirs.append(str(d.relative_to(root)))

    return {
        "gt": "gt/panoptic.json",
        "instances": "pred/instances_single.json",
        "experts": experts_cfg,
        "semantic": semantic_dirs,
        "fusion": {"score_threshold": 0.5, "overlap_threshold": 0.5, "stuff_area_min": ds.spec.stuff_area_min},
        "output": "fused",
    }


# --- evaluation -----------------------------------------------------------------


def evaluate_pq(gt: Mapping[int, PanopticImage], pred: Mapping[int, PanopticImage], categories) -> MetricReport:
    return MetricReport(pq=pq_summarize(evaluate_panoptic(gt, pred, categories), categories))


def evaluate_miou(gt: Mapping[int, PanopticImage], pred: Mapping[int, LabelMap], categories) -> MetricReport:
    ids = sorted(gt)
    missing = [i for i in ids if i not in pred]
    if missing:
        raise KeyError(f"no semantic prediction for image(s) {missing[:10]}")
    gt_maps = [panoptic_to_semantic_gt(gt[i], categories) for i in ids]
    return MetricReport(miou=miou(gt_maps, [pred[i] for i in ids], semantic_categories(categories)))


def evaluate_map(gt: Mapping[int, PanopticImage], pred: Mapping[int, list], categories, modes=("bbox", "mask")) -> MetricReport:
    index = as_category_index(categories)
    gt_inst = {i: panoptic_things_as_instances(p, index) for i, p in gt.items()}
    pred = {i: pred.get(i, []) for i in gt}
    report = MetricReport()
    if "bbox" in modes:
        report.map_bbox = coco_map(gt_inst, pred, "bbox")
    if "mask" in modes:
        report.map_mask = coco_map(gt_inst, pred, "mask")
    return report
