"""COCO panoptic data model: segment tables, id-encoded PNGs, detection results.

Panoptic PNGs store one segment id per pixel as ``id = R + 256*G + 256**2*B``.
Semantic label PNGs reuse the same encoding for category ids.

Instance results follow the COCO detection schema with an uncompressed RLE
``segmentation``. Unlike pycocotools, ``counts`` is linearized row-major, the
same order :mod:`panfuse.mask` uses everywhere.
"""

from __future__ import annotations

import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EncodingError, FormatError, ValidationError
from .mask import VOID, BBox, BinaryMask, LabelMap, ScoredInstance, _readonly, rle_encode

logger = logging.getLogger(__name__)

MAX_ID = 256**3 - 1
MERGED_THING_NAME = "merged-thing"


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    isthing: bool
    color: tuple = (0, 0, 0)
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(id=self.id, name=self.name, isthing=int(self.isthing), color=list(self.color))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Category":
        extra = {k: v for k, v in obj.items() if k not in ("id", "name", "isthing", "color")}
        return cls(
            id=int(obj["id"]),
            name=str(obj["name"]),
            isthing=bool(obj.get("isthing", 0)),
            color=tuple(int(c) for c in obj.get("color", (0, 0, 0))),
            extra=extra,
        )


def category_index(categories: Iterable[Category]) -> dict[int, Category]:
    index = {}
    for cat in categories:
        if cat.id == VOID:
            raise ValidationError("category id 0 is reserved for VOID")
        if cat.id in index:
            raise ValidationError(f"duplicate category id {cat.id}")
        index[cat.id] = cat
    return index


def as_category_index(categories) -> dict[int, Category]:
    if isinstance(categories, Mapping):
        return dict(categories)
    return category_index(categories)


def merged_thing_id(categories) -> int:
    """Id of the single semantic class standing in for every thing category."""
    index = as_category_index(categories)
    stuff = [c.id for c in index.values() if not c.isthing]
    mt = max(stuff, default=0) + 1
    if mt in index:
        raise ValidationError(f"merged-thing id {mt} collides with category {index[mt].name!r}")
    return mt


def semantic_categories(categories) -> list[Category]:
    """Stuff categories plus the merged-thing class, sorted by id."""
    index = as_category_index(categories)
    stuff = sorted((c for c in index.values() if not c.isthing), key=lambda c: c.id)
    return stuff + [Category(merged_thing_id(index), MERGED_THING_NAME, True, (220, 20, 60))]


@dataclass(frozen=True)
class SegmentInfo:
    id: int
    category_id: int
    area: int
    bbox: BBox
    iscrowd: bool = False
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            id=self.id,
            category_id=self.category_id,
            area=self.area,
            bbox=self.bbox.as_list(),
            iscrowd=int(self.iscrowd),
        )
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SegmentInfo":
        extra = {k: v for k, v in obj.items() if k not in ("id", "category_id", "area", "bbox", "iscrowd")}
        return cls(
            id=int(obj["id"]),
            category_id=int(obj["category_id"]),
            area=int(obj["area"]),
            bbox=BBox(*obj["bbox"]),
            iscrowd=bool(obj.get("iscrowd", 0)),
            extra=extra,
        )


def segment_geometry(id_map: np.ndarray) -> dict[int, tuple[int, BBox]]:
    """Area and tight box of every nonzero id in ``id_map``."""
    ids, inverse, counts = np.unique(id_map, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(id_map.shape)
    slices = ndimage.find_objects(inverse + 1)
    out = {}
    for k, seg_id in enumerate(ids.tolist()):
        if seg_id == VOID:
            continue
        rows, cols = slices[k]
        out[seg_id] = (
            int(counts[k]),
            BBox(cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start),
        )
    return out


@dataclass(frozen=True, eq=False)
class PanopticImage:
    """Segment-id raster plus its segment table. Construction does not validate;
    use :func:`validate_panoptic`."""

    width: int
    height: int
    id_map: np.ndarray = field(repr=False)
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "id_map", _readonly(np.asarray(self.id_map, dtype=np.int64)))
        object.__setattr__(self, "segments", tuple(self.segments))

    @classmethod
    def from_id_map(cls, id_map, category_of: Mapping[int, int], iscrowd: Iterable[int] = ()) -> "PanopticImage":
        """Build a consistent image; ``category_of`` maps every nonzero id to its category."""
        id_map = np.asarray(id_map, dtype=np.int64)
        crowd = set(iscrowd)
        geometry = segment_geometry(id_map)
        segments = []
        for seg_id in sorted(geometry):
            area, bbox = geometry[seg_id]
            segments.append(SegmentInfo(seg_id, int(category_of[seg_id]), area, bbox, seg_id in crowd))
        height, width = id_map.shape
        return cls(width, height, id_map, tuple(segments))

    def segment(self, seg_id: int) -> SegmentInfo:
        for seg in self.segments:
            if seg.id == seg_id:
                return seg
        raise KeyError(seg_id)

    def __eq__(self, other):
        if not isinstance(other, PanopticImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.id_map, other.id_map)
            and self.segments == other.segments
        )


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, segment_id, message: str):
        self.violations.append((segment_id, message))

    def __str__(self):
        if self.ok:
            return "ok"
        return "\n".join(f"segment {sid}: {msg}" if sid is not None else msg for sid, msg in self.violations)


def validate_panoptic(pan: PanopticImage, categories=None) -> ValidationReport:
    report = ValidationReport()
    if pan.id_map.shape != (pan.height, pan.width):
        report.add(None, f"id_map shape {pan.id_map.shape} does not match {pan.height}x{pan.width}")
        return report
    if pan.id_map.size and (pan.id_map.min() < 0 or pan.id_map.max() > MAX_ID):
        report.add(None, "id_map holds ids outside [0, 2**24)")
    index = as_category_index(categories) if categories is not None else None
    geometry = segment_geometry(pan.id_map)
    seen = set()
    for seg in pan.segments:
        if seg.id in seen:
            report.add(seg.id, "duplicate segment id")
            continue
        seen.add(seg.id)
        if seg.id <= 0:
            report.add(seg.id, "segment id must be positive")
        if seg.area <= 0:
            report.add(seg.id, f"non-positive area {seg.area}")
        if index is not None and seg.category_id not in index:
            report.add(seg.id, f"unknown category {seg.category_id}")
        if seg.id not in geometry:
            report.add(seg.id, "listed in segments but absent from the raster")
            continue
        area, bbox = geometry[seg.id]
        if seg.area != area:
            report.add(seg.id, f"area field {seg.area} != raster area {area}")
        if seg.bbox != bbox:
            report.add(seg.id, f"bbox field {seg.bbox.as_list()} != raster bbox {bbox.as_list()}")
    for seg_id in sorted(set(geometry) - seen):
        report.add(seg_id, "present in the raster but missing from segments")
    return report


def rgb2id(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 256 * 256 * rgb[..., 2]


def id2rgb(id_map: np.ndarray) -> np.ndarray:
    id_map = np.asarray(id_map, dtype=np.int64)
    if id_map.size and (id_map.min() < 0 or id_map.max() > MAX_ID):
        raise EncodingError("ids must lie in [0, 2**24) to fit the RGB encoding")
    rgb = np.empty(id_map.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = id_map % 256
    rgb[..., 1] = (id_map // 256) % 256
    rgb[..., 2] = id_map // (256 * 256)
    return rgb


def read_panoptic_png(data) -> np.ndarray:
    """Decode PNG bytes (or a path) into an ``(H, W)`` int64 id raster."""
    src = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    try:
        with Image.open(src) as img:
            if img.format != "PNG":
                raise FormatError(f"expected PNG, got {img.format}")
            if img.mode != "RGB":
                raise FormatError(f"expected 8-bit RGB PNG, got mode {img.mode}")
            arr = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode PNG: {exc}") from exc
    return rgb2id(arr)


def write_panoptic_png(id_map) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(id2rgb(id_map)).save(buf, format="PNG")
    return buf.getvalue()


def read_label_png(data) -> LabelMap:
    return LabelMap(read_panoptic_png(data))


def write_label_png(label_map: LabelMap) -> bytes:
    return write_panoptic_png(label_map.labels)


def panoptic_to_semantic_gt(pan: PanopticImage, categories) -> LabelMap:
    """Stuff keeps its id, every thing segment becomes merged-thing, VOID stays."""
    index = as_category_index(categories)
    mt = merged_thing_id(index)
    lut_ids, lut_vals = [VOID], [VOID]
    for seg in pan.segments:
        cat = index.get(seg.category_id)
        if cat is None:
            raise ValidationError(f"segment {seg.id} has unknown category {seg.category_id}")
        lut_ids.append(seg.id)
        lut_vals.append(mt if cat.isthing else cat.id)
    lut_ids = np.asarray(lut_ids, dtype=np.int64)
    lut_vals = np.asarray(lut_vals, dtype=np.int64)
    order = np.argsort(lut_ids)
    lut_ids, lut_vals = lut_ids[order], lut_vals[order]
    pos = np.searchsorted(lut_ids, pan.id_map)
    pos = np.clip(pos, 0, lut_ids.size - 1)
    if not np.array_equal(lut_ids[pos], pan.id_map):
        raise ValidationError("id_map holds ids with no segment entry")
    return LabelMap(lut_vals[pos])


# --- dataset manifests -----------------------------------------------------


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(id=self.id, file_name=self.file_name, width=self.width, height=self.height)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ImageInfo":
        extra = {k: v for k, v in obj.items() if k not in ("id", "file_name", "width", "height")}
        return cls(int(obj["id"]), str(obj["file_name"]), int(obj["width"]), int(obj["height"]), extra)


@dataclass(frozen=True)
class PanopticAnnotation:
    image_id: int
    file_name: str
    segments: tuple
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            image_id=self.image_id,
            file_name=self.file_name,
            segments_info=[s.to_json() for s in self.segments],
        )
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PanopticAnnotation":
        extra = {k: v for k, v in obj.items() if k not in ("image_id", "file_name", "segments_info")}
        segments = tuple(SegmentInfo.from_json(s) for s in obj.get("segments_info", ()))
        return cls(int(obj["image_id"]), str(obj["file_name"]), segments, extra)


@dataclass
class DatasetManifest:
    categories: list
    images: list
    annotations: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        category_index(self.categories)
        ids = [im.id for im in self.images]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate image ids in manifest")
        known = set(ids)
        for ann in self.annotations:
            if ann.image_id not in known:
                raise ValidationError(f"annotation references unknown image {ann.image_id}")

    @property
    def category_index(self) -> dict[int, Category]:
        return category_index(self.categories)

    def image(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotation(self, image_id: int) -> PanopticAnnotation:
        for ann in self.annotations:
            if ann.image_id == image_id:
                return ann
        raise KeyError(image_id)

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            images=[im.to_json() for im in self.images],
            annotations=[a.to_json() for a in self.annotations],
            categories=[c.to_json() for c in self.categories],
        )
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            extra = {k: v for k, v in obj.items() if k not in ("images", "annotations", "categories")}
            return cls(
                categories=[Category.from_json(c) for c in obj["categories"]],
                images=[ImageInfo.from_json(i) for i in obj["images"]],
                annotations=[PanopticAnnotation.from_json(a) for a in obj.get("annotations", ())],
                extra=extra,
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"not a COCO panoptic manifest: missing/invalid {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as f:
        return DatasetManifest.from_json(json.load(f))


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def default_png_dir(json_path) -> Path:
    """COCO convention: ``panoptic_val2017.json`` pairs with ``panoptic_val2017/``."""
    p = Path(json_path)
    return p.with_suffix("")


def missing_pngs(manifest: DatasetManifest, png_dir) -> list[str]:
    png_dir = Path(png_dir)
    return [a.file_name for a in manifest.annotations if not (png_dir / a.file_name).is_file()]


def load_panoptic_image(ann: PanopticAnnotation, image: ImageInfo, png_dir) -> PanopticImage:
    id_map = read_panoptic_png(Path(png_dir) / ann.file_name)
    if id_map.shape != (image.height, image.width):
        raise FormatError(
            f"{ann.file_name}: raster is {id_map.shape[1]}x{id_map.shape[0]}, "
            f"manifest says {image.width}x{image.height}"
        )
    return PanopticImage(image.width, image.height, id_map, ann.segments)


def load_panoptic_dataset(json_path, png_dir=None) -> tuple[DatasetManifest, dict[int, PanopticImage]]:
    manifest = load_manifest(json_path)
    png_dir = Path(png_dir) if png_dir is not None else default_png_dir(json_path)
    missing = missing_pngs(manifest, png_dir)
    if missing:
        raise FormatError(f"{len(missing)} panoptic PNG(s) missing under {png_dir}: {missing[:5]}")
    images = {}
    for ann in manifest.annotations:
        images[ann.image_id] = load_panoptic_image(ann, manifest.image(ann.image_id), png_dir)
    return manifest, images


def annotation_for(image_id: int, file_name: str, pan: PanopticImage) -> PanopticAnnotation:
    return PanopticAnnotation(image_id, file_name, tuple(pan.segments))


def write_panoptic_dataset(
    json_path,
    categories: Sequence[Category],
    images: Sequence[ImageInfo],
    panoptic: Mapping[int, PanopticImage],
    png_dir=None,
    extra: Optional[dict] = None,
) -> DatasetManifest:
    """Write a COCO panoptic JSON and its PNG folder. PNGs are named after the image stem."""
    png_dir = Path(png_dir) if png_dir is not None else default_png_dir(json_path)
    png_dir.mkdir(parents=True, exist_ok=True)
    annotations = []
    for im in images:
        if im.id not in panoptic:
            continue
        pan = panoptic[im.id]
        file_name = Path(im.file_name).stem + ".png"
        (png_dir / file_name).write_bytes(write_panoptic_png(pan.id_map))
        annotations.append(annotation_for(im.id, file_name, pan))
    manifest = DatasetManifest(list(categories), list(images), annotations, dict(extra or {}))
    dump_json(manifest.to_json(), json_path)
    return manifest


# --- detection-format instance results -------------------------------------


def read_instance_results(records, images, categories) -> dict[int, list[ScoredInstance]]:
    """Group COCO detection records by image id.

    ``records`` is a list of dicts, a JSON string, or a path. ``images`` maps
    image id to an object with ``width``/``height`` (an :class:`ImageInfo`).
    Records keep their file order within each image.
    """
    if isinstance(records, (str, Path)) and not str(records).lstrip().startswith("["):
        with open(records, encoding="utf-8") as f:
            records = json.load(f)
    elif isinstance(records, str):
        records = json.loads(records)
    if isinstance(images, Mapping):
        image_index = dict(images)
    else:
        image_index = {im.id: im for im in images}
    cat_index = as_category_index(categories)
    out: dict[int, list[ScoredInstance]] = defaultdict(list)
    for n, rec in enumerate(records):
        try:
            image_id = int(rec["image_id"])
            category_id = int(rec["category_id"])
            score = float(rec["score"])
            segm = rec["segmentation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"record {n}: missing or invalid field {exc}") from exc
        if image_id not in image_index:
            raise ValidationError(f"record {n}: unknown image id {image_id}")
        if category_id not in cat_index:
            raise ValidationError(f"record {n}: unknown category id {category_id}")
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"record {n}: score {score} outside [0, 1]")
        mask = BinaryMask.from_coco(segm)
        im = image_index[image_id]
        if (mask.width, mask.height) != (im.width, im.height):
            raise ValidationError(
                f"record {n}: RLE size {mask.width}x{mask.height} != image {im.width}x{im.height}"
            )
        bbox = BBox(*rec["bbox"]) if rec.get("bbox") is not None else None
        try:
            out[image_id].append(ScoredInstance(category_id, score, mask, bbox))
        except ValidationError as exc:
            raise ValidationError(f"record {n}: {exc}") from exc
    return dict(out)


def instance_records(per_image: Mapping[int, Sequence[ScoredInstance]]) -> list[dict]:
    records = []
    for image_id in sorted(per_image):
        for inst in per_image[image_id]:
            records.append(
                {
                    "image_id": int(image_id),
                    "category_id": int(inst.category_id),
                    "score": float(inst.score),
                    "bbox": inst.bbox.as_list(),
                    "segmentation": inst.mask.to_coco(),
                }
            )
    return records


def panoptic_things_as_instances(pan: PanopticImage, categories, include_crowd: bool = False) -> list[ScoredInstance]:
    """Thing segments of a panoptic image as score-1 instances (mAP ground truth)."""
    index = as_category_index(categories)
    out = []
    for seg in pan.segments:
        cat = index.get(seg.category_id)
        if cat is None or not cat.isthing or (seg.iscrowd and not include_crowd):
            continue
        out.append(ScoredInstance(seg.category_id, 1.0, rle_encode(pan.id_map == seg.id)))
    return out
