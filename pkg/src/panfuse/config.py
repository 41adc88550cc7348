"""Run configuration files.

A run config is YAML (JSON also parses). Relative paths resolve against the
config file's directory. Example::

    gt: gt/panoptic.json            # COCO panoptic JSON; PNGs in gt/panoptic/
    instances: pred/instances_single.json
    experts:                        # optional; used instead of `instances`
      person: {categories: [1], results: pred/instances_person.json}
      car:    {categories: [3], results: pred/instances_car.json}
      rest:   {rest: true,      results: pred/instances_rest.json}
    semantic:                       # one directory of <stem>.cmap per model
      - pred/semantic_0
      - pred/semantic_1
    semantic_labels: null           # or a directory of <stem>.png label maps
    fusion: {score_threshold: 0.5, overlap_threshold: 0.5, stuff_area_min: 4096}
    output: fused
    parallelism: 4                  # default: number of CPUs
    seed: 0
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .coco_io import default_png_dir
from .errors import ConfigError
from .experts import ExpertRouting
from .fusion import FusionParams

_KNOWN_KEYS = {"gt", "gt_png_dir", "instances", "experts", "semantic", "semantic_labels", "fusion", "output", "parallelism", "seed"}


@dataclass(frozen=True)
class ExpertSource:
    name: str
    results: Path
    categories: tuple = ()
    rest: bool = False


@dataclass(frozen=True)
class RunConfig:
    gt: Optional[Path] = None
    gt_png_dir: Optional[Path] = None
    instances: Optional[Path] = None
    experts: tuple = ()
    semantic: tuple = ()
    semantic_labels: Optional[Path] = None
    fusion: FusionParams = FusionParams()
    output: Optional[Path] = None
    parallelism: int = field(default_factory=lambda: os.cpu_count() or 1)
    seed: int = 0

    def __post_init__(self):
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")

    @property
    def gt_pngs(self) -> Optional[Path]:
        if self.gt_png_dir is not None:
            return self.gt_png_dir
        return default_png_dir(self.gt) if self.gt is not None else None

    def routing(self, categories) -> ExpertRouting:
        owned = {e.name: e.categories for e in self.experts if not e.rest}
        rests = [e.name for e in self.experts if e.rest]
        if len(rests) > 1:
            raise ConfigError(f"more than one rest expert: {rests}")
        return ExpertRouting.build(owned, categories, rest=rests[0] if rests else None)

    def with_overrides(self, **overrides) -> "RunConfig":
        fusion = {k: overrides.pop(k) for k in ("score_threshold", "overlap_threshold", "stuff_area_min") if overrides.get(k) is not None}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        for key in ("gt", "gt_png_dir", "instances", "semantic_labels", "output"):
            if key in overrides:
                overrides[key] = Path(overrides[key])
        if "semantic" in overrides:
            overrides["semantic"] = tuple(Path(p) for p in overrides["semantic"])
        cfg = replace(self, **overrides)
        if fusion:
            cfg = replace(cfg, fusion=replace(cfg.fusion, **fusion))
        return cfg

    def require(self, *keys: str) -> None:
        """Raise if a needed key is unset or (for inputs) missing on disk; collects every problem."""
        problems = []
        for key in keys:
            value = getattr(self, key)
            if value in (None, ()):
                problems.append(f"`{key}` is not set")
                continue
            if key == "experts":
                paths = [e.results for e in value]
            elif key == "semantic":
                paths = list(value)
            else:
                paths = [value]
            if key == "output":
                continue
            problems.extend(f"`{key}`: {p} does not exist" for p in paths if not Path(p).exists())
        if problems:
            raise ConfigError("invalid run config:\n  " + "\n  ".join(problems))


def _path(base: Path, value) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_config(obj: dict, base_dir=".") -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(obj) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base = Path(base_dir)
    experts = []
    for name, entry in (obj.get("experts") or {}).items():
        if not isinstance(entry, dict) or "results" not in entry:
            raise ConfigError(f"expert {name!r} needs a `results` path")
        rest = bool(entry.get("rest", False))
        if rest and entry.get("categories"):
            raise ConfigError(f"expert {name!r}: a rest expert takes no explicit categories")
        if not rest and not entry.get("categories"):
            raise ConfigError(f"expert {name!r}: give `categories` or mark it `rest: true`")
        experts.append(ExpertSource(name, _path(base, entry["results"]), tuple(int(c) for c in entry.get("categories") or ()), rest))
    try:
        fusion = FusionParams(**(obj.get("fusion") or {}))
    except TypeError as exc:
        raise ConfigError(f"bad fusion section: {exc}") from exc
    kwargs = dict(
        gt=_path(base, obj.get("gt")),
        gt_png_dir=_path(base, obj.get("gt_png_dir")),
        instances=_path(base, obj.get("instances")),
        experts=tuple(experts),
        semantic=tuple(_path(base, p) for p in obj.get("semantic") or ()),
        semantic_labels=_path(base, obj.get("semantic_labels")),
        fusion=fusion,
        output=_path(base, obj.get("output")),
        seed=int(obj.get("seed", 0)),
    )
    if obj.get("parallelism") is not None:
        kwargs["parallelism"] = int(obj["parallelism"])
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, encoding="utf-8") as f:
        obj = yaml.safe_load(f) or {}
    return parse_config(obj, path.parent)
