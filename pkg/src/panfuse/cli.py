"""Command-line entry point: ``panfuse <subcommand>``.

Outputs are written to a temporary sibling directory and renamed into place,
so a failed run never leaves partial results. Set ``PANFUSE_LOG`` (e.g.
``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import uuid
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .coco_io import (
    Category,
    default_png_dir,
    load_manifest,
    load_panoptic_dataset,
    load_panoptic_image,
    missing_pngs,
    read_instance_results,
    read_label_png,
    validate_panoptic,
    write_panoptic_dataset,
)
from .config import RunConfig, load_config
from .ensemble import argmax_labels, ensemble_average, read_cmap
from .errors import ConfigError, PanfuseError
from .experts import merge_expert_predictions, validate_routing
from .fusion import fuse_batch
from .metrics import format_table
from .pipeline import (
    ImagePredictions,
    evaluate_map,
    evaluate_miou,
    evaluate_pq,
    format_matrix,
    run_matrix,
    synthesize,
    write_synthetic_dataset,
)
from .synth import Degradation, SceneSpec

logger = logging.getLogger("panfuse")


# --- helpers --------------------------------------------------------------------


@contextlib.contextmanager
def atomic_dir(final: Path):
    """Yield a scratch directory that replaces ``final`` only if the block succeeds."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.parent / f".{final.name}.tmp-{uuid.uuid4().hex[:8]}"
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if final.exists():
        old = final.parent / f".{final.name}.old-{uuid.uuid4().hex[:8]}"
        final.rename(old)
    tmp.rename(final)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _stem(file_name: str) -> str:
    return Path(file_name).stem


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in ("gt", "output", "parallelism", "score_threshold", "overlap_threshold", "stuff_area_min", "semantic_labels"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "semantic", None):
        overrides["semantic"] = args.semantic
    if getattr(args, "instances", None) is not None:
        overrides["instances"] = args.instances
    return cfg.with_overrides(**overrides)


def _load_semantic(cfg: RunConfig, images, ensemble: bool = True) -> dict:
    """Per-image LabelMaps from confidence-map dirs (averaged) or label PNGs."""
    out = {}
    if cfg.semantic:
        dirs = list(cfg.semantic) if ensemble else list(cfg.semantic[:1])
        missing = [str(d / f"{_stem(im.file_name)}.cmap") for d in dirs for im in images if not (d / f"{_stem(im.file_name)}.cmap").is_file()]
        if missing:
            raise ConfigError(f"{len(missing)} confidence map(s) missing, e.g. {missing[:3]}")
        for im in images:
            maps = [read_cmap(d / f"{_stem(im.file_name)}.cmap") for d in dirs]
            out[im.id] = argmax_labels(ensemble_average(maps))
    elif cfg.semantic_labels is not None:
        for im in images:
            path = cfg.semantic_labels / f"{_stem(im.file_name)}.png"
            if not path.is_file():
                raise ConfigError(f"semantic label map {path} missing")
            out[im.id] = read_label_png(path.read_bytes())
    else:
        raise ConfigError("config needs `semantic` or `semantic_labels`")
    return out


def _load_instances(cfg: RunConfig, manifest, use_experts: bool = True) -> dict:
    categories = manifest.categories
    if use_experts and cfg.experts:
        routing = cfg.routing(categories)
        report = validate_routing(routing, categories)
        if not report.ok:
            raise ConfigError(f"expert routing invalid:\n{report}")
        per_expert = {e.name: read_instance_results(e.results, manifest.images, categories) for e in cfg.experts}
        return {
            im.id: merge_expert_predictions({n: p.get(im.id, []) for n, p in per_expert.items()}, routing)
            for im in manifest.images
        }
    if cfg.instances is None:
        raise ConfigError("config needs `instances` or `experts`")
    per_image = read_instance_results(cfg.instances, manifest.images, categories)
    return {im.id: per_image.get(im.id, []) for im in manifest.images}


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_obj = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            spec_obj = yaml.safe_load(f) or {}
    n_scenes = int(spec_obj.pop("n_scenes", 10))
    if args.n_scenes is not None:
        n_scenes = args.n_scenes
    deg = Degradation(**(spec_obj.pop("degradation", None) or {}))
    if "categories" in spec_obj:
        spec_obj["categories"] = tuple(Category.from_json(c) for c in spec_obj["categories"])
    for key in ("width", "height", "n_things"):
        if getattr(args, key) is not None:
            spec_obj[key] = getattr(args, key)
    if args.seed is not None:
        spec_obj["rng_seed"] = args.seed
    for key in ("thing_size",):
        if key in spec_obj:
            spec_obj[key] = tuple(spec_obj[key])
    try:
        spec = SceneSpec(degradation=deg, **spec_obj)
    except TypeError as exc:
        raise ConfigError(f"bad scene spec: {exc}") from exc
    ds = synthesize(spec, n_scenes, args.parallelism or 1)
    with atomic_dir(Path(args.out)) as tmp:
        run_cfg = write_synthetic_dataset(ds, tmp)
        run_cfg["seed"] = spec.rng_seed
        (tmp / "config.yaml").write_text(yaml.safe_dump(run_cfg, sort_keys=False), encoding="utf-8")
    print(f"wrote {n_scenes} synthetic scenes to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _config(args)
    cfg.require("gt", "output")
    if cfg.experts and not args.no_experts:
        cfg.require("experts")
    else:
        cfg.require("instances")
    if cfg.semantic:
        cfg.require("semantic")
    manifest = load_manifest(cfg.gt)
    instances = _load_instances(cfg, manifest, use_experts=not args.no_experts)
    semantic = _load_semantic(cfg, manifest.images, ensemble=not args.no_ensemble)
    inputs = [(im.id, instances[im.id], semantic[im.id]) for im in manifest.images]
    result = fuse_batch(inputs, cfg.fusion, manifest.categories, cfg.parallelism)
    with atomic_dir(cfg.output) as tmp:
        write_panoptic_dataset(tmp / "panoptic.json", manifest.categories, manifest.images, result.panoptic)
        stats = {"total": result.stats.to_json(), "per_image": {str(k): v.to_json() for k, v in result.per_image.items()}}
        _write_json(stats, tmp / "stats.json")
    s = result.stats
    print(
        f"fused {s.images} images: {s.dropped_low_score} low-score and {s.dropped_overlap} overlapping "
        f"instances dropped, {s.dropped_stuff} stuff segments dropped, VOID {100 * s.void_fraction:.1f}%"
    )
    return 0


def _emit_report(report, categories, out) -> None:
    table = format_table(report, categories)
    print(table)
    if out:
        with atomic_dir(Path(out)) as tmp:
            _write_json(report.to_json(), tmp / "metrics.json")
            (tmp / "metrics.txt").write_text(table + "\n", encoding="utf-8")


def cmd_eval_pq(args) -> int:
    cfg = _config(args)
    cfg.require("gt")
    pred_json = Path(args.pred) if args.pred else (cfg.output / "panoptic.json" if cfg.output else None)
    if pred_json is None or not pred_json.is_file():
        raise ConfigError(f"prediction JSON {pred_json} does not exist")
    manifest, gt = load_panoptic_dataset(cfg.gt, cfg.gt_png_dir)
    _, pred = load_panoptic_dataset(pred_json, args.pred_png_dir)
    report = evaluate_pq(gt, pred, manifest.categories)
    _emit_report(report, manifest.categories, args.out)
    return 0


def cmd_eval_miou(args) -> int:
    cfg = _config(args)
    cfg.require("gt")
    manifest, gt = load_panoptic_dataset(cfg.gt, cfg.gt_png_dir)
    if args.pred:
        paths = [Path(p) for p in args.pred]
        if all(any(p.glob("*.cmap")) for p in paths):
            cfg = cfg.with_overrides(semantic=paths, semantic_labels=None)
        else:
            cfg = RunConfig(semantic_labels=paths[0], parallelism=cfg.parallelism)
    pred = _load_semantic(cfg, manifest.images)
    report = evaluate_miou(gt, pred, manifest.categories)
    _emit_report(report, manifest.categories, args.out)
    return 0


def cmd_eval_map(args) -> int:
    cfg = _config(args)
    cfg.require("gt")
    manifest, gt = load_panoptic_dataset(cfg.gt, cfg.gt_png_dir)
    if args.pred:
        pred = read_instance_results(args.pred, manifest.images, manifest.categories)
    else:
        pred = _load_instances(cfg, manifest, use_experts=not args.no_experts)
    modes = ("bbox", "mask") if args.mode == "both" else (args.mode,)
    report = evaluate_map(gt, pred, manifest.categories, modes)
    _emit_report(report, manifest.categories, args.out)
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    cfg.require("gt", "instances", "experts", "semantic")
    manifest, gt = load_panoptic_dataset(cfg.gt, cfg.gt_png_dir)
    categories = manifest.categories
    routing = cfg.routing(categories)
    report = validate_routing(routing, categories)
    if not report.ok:
        raise ConfigError(f"expert routing invalid:\n{report}")
    single = read_instance_results(cfg.instances, manifest.images, categories)
    per_expert = {e.name: read_instance_results(e.results, manifest.images, categories) for e in cfg.experts}
    preds = {}
    for im in manifest.images:
        maps = [read_cmap(d / f"{_stem(im.file_name)}.cmap") for d in cfg.semantic]
        preds[im.id] = ImagePredictions(
            single.get(im.id, []), {n: p.get(im.id, []) for n, p in per_expert.items()}, maps
        )
    rows = run_matrix(gt, preds, categories, routing, cfg.fusion, cfg.parallelism)
    table = format_matrix(rows)
    print(table)
    out = Path(args.out) if args.out else Path(args.config).parent / "matrix"
    with atomic_dir(out) as tmp:
        _write_json({"rows": [r.to_json() for r in rows], "fusion": vars(cfg.fusion)}, tmp / "matrix.json")
        (tmp / "matrix.txt").write_text(table, encoding="utf-8")
    return 0


def segment_color(seg_id: int) -> tuple[int, int, int]:
    """Deterministic color per segment id.

    A bijection on 24-bit integers that fixes 0, so distinct ids below 2**24
    always get distinct colors and only VOID is black.
    """
    x = seg_id & 0xFFFFFF
    x = (x * 0x9E3779) & 0xFFFFFF
    x ^= x >> 12
    x = (x * 0x2C1B3D) & 0xFFFFFF
    x ^= x >> 9
    return x & 0xFF, (x >> 8) & 0xFF, (x >> 16) & 0xFF


def colorize(id_map: np.ndarray) -> np.ndarray:
    ids, inverse = np.unique(id_map, return_inverse=True)
    palette = np.array([segment_color(int(i)) if i else (0, 0, 0) for i in ids], dtype=np.uint8)
    return palette[inverse.reshape(id_map.shape)]


def cmd_visualize(args) -> int:
    manifest = load_manifest(args.panoptic)
    png_dir = Path(args.png_dir) if args.png_dir else default_png_dir(args.panoptic)
    missing = missing_pngs(manifest, png_dir)
    if missing:
        raise ConfigError(f"{len(missing)} panoptic PNG(s) missing under {png_dir}: {missing[:5]}")
    index = manifest.category_index
    with atomic_dir(Path(args.out)) as tmp:
        for ann in manifest.annotations:
            pan = load_panoptic_image(ann, manifest.image(ann.image_id), png_dir)
            report = validate_panoptic(pan, index)
            if not report.ok:
                raise PanfuseError(f"{ann.file_name}: malformed panoptic input:\n{report}")
            stem = _stem(ann.file_name)
            Image.fromarray(colorize(pan.id_map)).save(tmp / f"{stem}.png", format="PNG")
            legend = [
                {
                    "id": seg.id,
                    "category_id": seg.category_id,
                    "category": index[seg.category_id].name,
                    "color": list(segment_color(seg.id)),
                }
                for seg in pan.segments
            ]
            _write_json({"image_id": ann.image_id, "void_color": [0, 0, 0], "segments": legend}, tmp / f"{stem}.json")
    print(f"wrote {len(manifest.annotations)} visualizations to {args.out}")
    return 0


def cmd_validate(args) -> int:
    problems = []
    manifest = load_manifest(args.panoptic)
    png_dir = Path(args.png_dir) if args.png_dir else default_png_dir(args.panoptic)
    missing = set(missing_pngs(manifest, png_dir))
    problems.extend(f"{name}: PNG missing under {png_dir}" for name in sorted(missing))
    index = manifest.category_index
    for ann in manifest.annotations:
        if ann.file_name in missing:
            continue
        pan = load_panoptic_image(ann, manifest.image(ann.image_id), png_dir)
        report = validate_panoptic(pan, index)
        problems.extend(f"{ann.file_name}: segment {sid}: {msg}" for sid, msg in report.violations)
    if args.config:
        cfg = load_config(args.config)
        if cfg.experts:
            report = validate_routing(cfg.routing(manifest.categories), manifest.categories)
            problems.extend(f"routing: {msg}" for _, msg in report.violations)
    for p in problems:
        print(p)
    n = len(manifest.annotations)
    print(f"{n} annotation(s) checked, {len(problems)} problem(s)")
    return 1 if problems else 0


# --- parser ---------------------------------------------------------------------


def _add_run_flags(p, with_fusion=False):
    p.add_argument("--config", help="run config file (YAML)")
    p.add_argument("--gt", help="ground-truth COCO panoptic JSON (overrides config)")
    p.add_argument("--parallelism", type=int, help="worker threads (default: CPU count)")
    if with_fusion:
        p.add_argument("--output", help="output directory (overrides config)")
        p.add_argument("--instances", help="single-model instance results JSON")
        p.add_argument("--semantic", nargs="+", help="confidence-map directories, one per model")
        p.add_argument("--semantic-labels", dest="semantic_labels", help="directory of semantic label PNGs")
        p.add_argument("--score-threshold", type=float)
        p.add_argument("--overlap-threshold", type=float)
        p.add_argument("--stuff-area-min", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with degraded predictions")
    p.add_argument("--spec", help="scene spec YAML (SceneSpec fields, `degradation`, `n_scenes`)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", dest="n_scenes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--n-things", dest="n_things", type=int)
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="merge experts, ensemble semantics and fuse into panoptic output")
    _add_run_flags(p, with_fusion=True)
    p.add_argument("--no-experts", action="store_true", help="use `instances` even if experts are configured")
    p.add_argument("--no-ensemble", action="store_true", help="use only the first semantic model")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval-pq", help="panoptic quality against GT")
    _add_run_flags(p)
    p.add_argument("--pred", help="predicted COCO panoptic JSON (default: <output>/panoptic.json)")
    p.add_argument("--pred-png-dir", dest="pred_png_dir")
    p.add_argument("--output", help=argparse.SUPPRESS)
    p.add_argument("--out", help="directory for metrics.json / metrics.txt")
    p.set_defaults(func=cmd_eval_pq)

    p = sub.add_parser("eval-miou", help="semantic mIoU against GT converted to stuff + merged-thing")
    _add_run_flags(p)
    p.add_argument("--pred", nargs="+", help="label-PNG directory, or confidence-map directories (averaged)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_miou)

    p = sub.add_parser("eval-map", help="COCO-style mAP for instance predictions")
    _add_run_flags(p)
    p.add_argument("--pred", help="instance results JSON (default: from config)")
    p.add_argument("--mode", choices=("bbox", "mask", "both"), default="both")
    p.add_argument("--no-experts", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("matrix", help="PQ of baseline / +experts / +ensemble / both")
    _add_run_flags(p, with_fusion=True)
    p.add_argument("--out", help="report directory (default: <config dir>/matrix)")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("visualize", help="colorize panoptic PNGs, one color per segment")
    p.add_argument("--panoptic", required=True, help="COCO panoptic JSON")
    p.add_argument("--png-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("validate", help="check a panoptic dataset (and optionally a config's routing)")
    p.add_argument("--panoptic", required=True)
    p.add_argument("--png-dir")
    p.add_argument("--config")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PANFUSE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PanfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
