"""PQ/SQ/RQ, mIoU and COCO-style mAP.

All values are fractions in [0, 1]; scaling to percent happens only in
:func:`format_table`.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .coco_io import PanopticImage, as_category_index, semantic_categories, validate_panoptic
from .errors import DimensionMismatch, ValidationError
from .mask import VOID, LabelMap, bbox_iou, mask_iou

OFFSET = 256**3
IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


# --- panoptic quality -------------------------------------------------------


@dataclass
class PqStatCat:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "PqStatCat"):
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


class PqStats:
    def __init__(self):
        self.per_category: dict[int, PqStatCat] = defaultdict(PqStatCat)
        self.matches: list[tuple[int, int]] = []

    def __getitem__(self, cat_id: int) -> PqStatCat:
        return self.per_category[cat_id]

    def __iadd__(self, other: "PqStats"):
        for cat_id in sorted(other.per_category):
            self.per_category[cat_id] += other.per_category[cat_id]
        self.matches.extend(other.matches)
        return self


def _validated(pan: PanopticImage, index, role: str):
    report = validate_panoptic(pan, index)
    if not report.ok:
        raise ValidationError(f"{role} panoptic image invalid:\n{report}")


def pq_match(gt: PanopticImage, pred: PanopticImage, categories) -> PqStats:
    """Match segments of one image and tally per-category TP/FP/FN.

    ``stats.matches`` lists the matched ``(gt_id, pred_id)`` pairs.
    """
    index = as_category_index(categories)
    if (gt.width, gt.height) != (pred.width, pred.height):
        raise DimensionMismatch(f"gt {gt.width}x{gt.height} vs pred {pred.width}x{pred.height}")
    _validated(gt, index, "ground-truth")
    _validated(pred, index, "predicted")

    gt_segs = {s.id: s for s in gt.segments}
    pred_segs = {s.id: s for s in pred.segments}
    keys, counts = np.unique(gt.id_map * OFFSET + pred.id_map, return_counts=True)
    pairs = {(int(k // OFFSET), int(k % OFFSET)): int(c) for k, c in zip(keys, counts)}

    stats = PqStats()
    gt_matched, pred_matched = set(), set()
    for (gt_id, pred_id), inter in sorted(pairs.items()):
        if gt_id == VOID or pred_id == VOID:
            continue
        g, p = gt_segs[gt_id], pred_segs[pred_id]
        if g.iscrowd or g.category_id != p.category_id:
            continue
        union = p.area + g.area - inter - pairs.get((VOID, pred_id), 0)
        iou = inter / union
        if iou > 0.5:
            stat = stats[g.category_id]
            stat.tp += 1
            stat.iou_sum += iou
            gt_matched.add(gt_id)
            pred_matched.add(pred_id)
            stats.matches.append((gt_id, pred_id))

    crowd_by_cat = defaultdict(set)
    for g in gt.segments:
        if g.iscrowd:
            crowd_by_cat[g.category_id].add(g.id)
        elif g.id not in gt_matched:
            stats[g.category_id].fn += 1

    for p in pred.segments:
        if p.id in pred_matched:
            continue
        ignored = pairs.get((VOID, p.id), 0)
        ignored += sum(pairs.get((c, p.id), 0) for c in crowd_by_cat.get(p.category_id, ()))
        if ignored / p.area > 0.5:
            continue
        stats[p.category_id].fp += 1
    return stats


@dataclass
class PqResult:
    per_category: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)

    @property
    def pq(self) -> float:
        return self.means["all"]["pq"]

    @property
    def sq(self) -> float:
        return self.means["all"]["sq"]

    @property
    def rq(self) -> float:
        return self.means["all"]["rq"]


def pq_category(stat: PqStatCat) -> dict:
    denom = stat.tp + 0.5 * stat.fp + 0.5 * stat.fn
    return {
        "pq": stat.iou_sum / denom if denom else 0.0,
        "sq": stat.iou_sum / stat.tp if stat.tp else 0.0,
        "rq": stat.tp / denom if denom else 0.0,
        "tp": stat.tp,
        "fp": stat.fp,
        "fn": stat.fn,
    }


def pq_summarize(stats: PqStats, categories=None) -> PqResult:
    """Per-category PQ/SQ/RQ and their means over categories seen in GT or predictions.

    With ``categories`` the means are also split into ``things`` and ``stuff``.
    """
    index = as_category_index(categories) if categories is not None else {}
    result = PqResult()
    for cat_id in sorted(stats.per_category):
        stat = stats.per_category[cat_id]
        if stat.tp + stat.fp + stat.fn == 0:
            continue
        result.per_category[cat_id] = pq_category(stat)

    groups = {"all": lambda c: True}
    if index:
        groups["things"] = lambda c: c in index and index[c].isthing
        groups["stuff"] = lambda c: c in index and not index[c].isthing
    for name, keep in groups.items():
        rows = [r for c, r in result.per_category.items() if keep(c)]
        n = len(rows)
        result.means[name] = {
            "pq": sum(r["pq"] for r in rows) / n if n else 0.0,
            "sq": sum(r["sq"] for r in rows) / n if n else 0.0,
            "rq": sum(r["rq"] for r in rows) / n if n else 0.0,
            "n": n,
        }
    return result


def evaluate_panoptic(gt: Mapping[int, PanopticImage], pred: Mapping[int, PanopticImage], categories) -> PqStats:
    """Accumulate :func:`pq_match` over images in ascending image id."""
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise ValidationError(f"no prediction for image(s) {missing[:10]}")
    total = PqStats()
    for image_id in sorted(gt):
        try:
            total += pq_match(gt[image_id], pred[image_id], categories)
        except (ValidationError, DimensionMismatch) as exc:
            raise type(exc)(f"image {image_id}: {exc}") from exc
    return total


# --- mIoU -------------------------------------------------------------------


@dataclass
class MiouResult:
    per_category: dict
    miou: float
    confusion: np.ndarray = field(repr=False)
    category_ids: tuple = ()


def confusion_matrix(gt: LabelMap, pred: LabelMap, category_ids: Sequence[int]) -> np.ndarray:
    """``(K+1, K+1)`` pixel counts, rows GT, columns prediction; index K is VOID."""
    if gt.labels.shape != pred.labels.shape:
        raise DimensionMismatch(f"gt {gt.labels.shape} vs pred {pred.labels.shape}")
    ids = np.asarray(sorted(category_ids), dtype=np.int64)
    k = ids.size

    def to_index(labels, role):
        pos = np.clip(np.searchsorted(ids, labels), 0, max(k - 1, 0))
        known = (ids[pos] == labels) if k else np.zeros(labels.shape, bool)
        stray = ~known & (labels != VOID)
        if stray.any():
            raise ValidationError(f"{role} labels {sorted(set(labels[stray].tolist()))[:5]} are not known categories")
        return np.where(known, pos, k)

    g = to_index(gt.labels.ravel(), "gt")
    p = to_index(pred.labels.ravel(), "pred")
    return np.bincount(g * (k + 1) + p, minlength=(k + 1) ** 2).reshape(k + 1, k + 1).astype(np.int64)


def miou(gt, pred, categories) -> MiouResult:
    """Mean IoU from one global confusion matrix.

    ``gt``/``pred`` are LabelMaps or equal-length sequences of them. GT VOID
    pixels are ignored; predicted VOID counts against the GT category. The mean
    runs over categories that occur in the GT.
    """
    if isinstance(gt, LabelMap):
        gt, pred = [gt], [pred]
    if len(gt) != len(pred):
        raise ValidationError(f"{len(gt)} GT maps vs {len(pred)} predictions")
    index = as_category_index(categories)
    ids = tuple(sorted(index))
    k = len(ids)
    cm = np.zeros((k + 1, k + 1), dtype=np.int64)
    for g, p in zip(gt, pred):
        cm += confusion_matrix(g, p, ids)
    valid = cm[:k]  # drop GT VOID row
    tp = np.diag(valid[:, :k])
    gt_total = valid.sum(axis=1)
    pred_total = valid[:, :k].sum(axis=0)
    per_category = {}
    ious = []
    for i, cat_id in enumerate(ids):
        union = gt_total[i] + pred_total[i] - tp[i]
        if union == 0:
            continue
        iou = tp[i] / union
        per_category[cat_id] = float(iou)
        if gt_total[i] > 0:
            ious.append(iou)
    mean = float(sum(ious) / len(ious)) if ious else 0.0
    return MiouResult(per_category, mean, cm, ids)


# --- COCO mAP ---------------------------------------------------------------


@dataclass
class MapResult:
    map: float
    per_threshold: dict
    per_category: dict
    mode: str


def _iou_matrix(dets, gts, mode: str) -> np.ndarray:
    ious = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            ious[i, j] = bbox_iou(d.bbox, g.bbox) if mode == "bbox" else mask_iou(d.mask, g.mask)
    return ious


def greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """TP flags for detections (rows, already in score order) against GT columns."""
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for g in range(n_gt):
            if taken[g] or ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP of one category at one threshold."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < recall.size, precision[np.minimum(idx, recall.size - 1)], 0.0)
    return float(q.mean())


def _top_detections(dets):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order[:MAX_DETS]]


def coco_map(gt: Mapping, pred: Mapping, mode: str = "mask", thresholds=IOU_THRESHOLDS) -> MapResult:
    """COCO-style mAP over categories with GT and IoU thresholds 0.50:0.95.

    ``gt`` and ``pred`` map image id to instance lists (anything with
    ``category_id``, ``mask``, ``bbox``; predictions also need ``score``). At most
    100 highest-scoring predictions per image are kept; equal scores keep input
    order.
    """
    if mode not in ("bbox", "mask"):
        raise ValueError(f"mode must be 'bbox' or 'mask', got {mode!r}")
    thresholds = np.asarray(thresholds, dtype=float)
    image_ids = sorted(set(gt) | set(pred))
    cat_ids = sorted({i.category_id for ims in gt.values() for i in ims})

    # per category: concatenated scores, TP flags per threshold, GT count
    scores = defaultdict(list)
    flags = defaultdict(lambda: [[] for _ in thresholds])
    n_gt = defaultdict(int)
    for image_id in image_ids:
        dets_all = _top_detections(list(pred.get(image_id, ())))
        gts_all = list(gt.get(image_id, ()))
        if len({(i.mask.width, i.mask.height) for i in dets_all + gts_all}) > 1:
            raise DimensionMismatch(f"image {image_id}: instance mask sizes differ")
        for cat_id in cat_ids:
            gts = [g for g in gts_all if g.category_id == cat_id]
            dets = [d for d in dets_all if d.category_id == cat_id]
            n_gt[cat_id] += len(gts)
            if not dets:
                continue
            ious = _iou_matrix(dets, gts, mode)
            scores[cat_id].extend(d.score for d in dets)
            for t, thr in enumerate(thresholds):
                flags[cat_id][t].extend(greedy_match(ious, thr).tolist())

    if not cat_ids:
        return MapResult(float("nan"), {}, {}, mode)
    # rows: categories, columns: thresholds
    aps = np.zeros((len(cat_ids), thresholds.size))
    for c, cat_id in enumerate(cat_ids):
        s = np.asarray(scores[cat_id], dtype=float)
        for t in range(thresholds.size):
            aps[c, t] = average_precision(s, np.asarray(flags[cat_id][t], dtype=bool), n_gt[cat_id])
    per_category = {cat_id: float(aps[c].mean()) for c, cat_id in enumerate(cat_ids)}
    per_threshold = {float(round(thr, 2)): float(aps[:, t].mean()) for t, thr in enumerate(thresholds)}
    return MapResult(float(aps.mean()), per_threshold, per_category, mode)


# --- reporting --------------------------------------------------------------


@dataclass
class MetricReport:
    pq: PqResult | None = None
    miou: MiouResult | None = None
    map_bbox: MapResult | None = None
    map_mask: MapResult | None = None

    def to_json(self) -> dict:
        out = {}
        if self.pq is not None:
            out["panoptic"] = {
                "means": self.pq.means,
                "per_category": {str(k): v for k, v in self.pq.per_category.items()},
            }
        if self.miou is not None:
            out["semantic"] = {
                "miou": self.miou.miou,
                "per_category": {str(k): v for k, v in self.miou.per_category.items()},
            }
        for name, res in (("map_bbox", self.map_bbox), ("map_mask", self.map_mask)):
            if res is not None:
                out[name] = {
                    "map": res.map,
                    "per_threshold": {f"{t:.2f}": v for t, v in res.per_threshold.items()},
                    "per_category": {str(k): v for k, v in res.per_category.items()},
                }
        return out


def _pct(x: float) -> str:
    return f"{100.0 * x:6.1f}"


def format_table(report: MetricReport, categories=None) -> str:
    index = as_category_index(categories) if categories is not None else {}
    if index:
        index = {**{c.id: c for c in semantic_categories(index)}, **index}
    lines = []
    if report.pq is not None:
        lines.append(f"{'':<22}|{'PQ':>7}|{'SQ':>7}|{'RQ':>7}|{'N':>5}")
        lines.append("-" * 52)
        for name, m in report.pq.means.items():
            lines.append(f"{name.capitalize():<22}|{_pct(m['pq']):>7}|{_pct(m['sq']):>7}|{_pct(m['rq']):>7}|{m['n']:>5}")
        lines.append("")
    if report.miou is not None:
        lines.append(f"{'category':<22}|{'IoU':>7}")
        lines.append("-" * 30)
        for cat_id, iou in report.miou.per_category.items():
            name = index[cat_id].name if cat_id in index else str(cat_id)
            lines.append(f"{name:<22}|{_pct(iou):>7}")
        lines.append(f"{'mIoU':<22}|{_pct(report.miou.miou):>7}")
        lines.append("")
    if report.map_bbox is not None or report.map_mask is not None:
        lines.append(f"{'':<22}|{'mAP (bbox)':>11}|{'mAP (mask)':>11}")
        lines.append("-" * 46)
        b = _pct(report.map_bbox.map) if report.map_bbox is not None else "-"
        m = _pct(report.map_mask.map) if report.map_mask is not None else "-"
        lines.append(f"{'overall':<22}|{b:>11}|{m:>11}")
        lines.append("")
    return "\n".join(lines)
