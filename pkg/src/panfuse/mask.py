"""Run-length encoded binary masks, boxes and label rasters.

Masks are linearized in row-major order (pixel ``i`` sits at row ``i // width``,
column ``i % width``). ``runs`` alternates background and foreground lengths and
always starts with a background run, so a mask whose first pixel is foreground
carries a leading zero. Every raster has exactly one encoding, which makes
``==`` on masks a cheap structural comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, MaskError, ValidationError

VOID = 0
_INT64_MAX = np.iinfo(np.int64).max


def _readonly(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box as ``(x, y, w, h)`` with the top-left corner at ``(x, y)``."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValidationError(f"negative box extent: {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    def fits(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True, eq=False)
class BinaryMask:
    width: int
    height: int
    runs: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MaskError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        runs = np.asarray(self.runs, dtype=np.int64)
        if runs.ndim != 1 or runs.size == 0:
            raise MaskError("runs must be a non-empty 1-d sequence")
        if (runs < 0).any():
            raise MaskError("negative run length")
        if runs.size > 1 and (runs[1:] == 0).any():
            raise MaskError("zero-length run after the leading background run")
        total = int(runs.sum())
        if total != self.width * self.height:
            raise MaskError(f"runs sum to {total}, expected {self.width * self.height}")
        object.__setattr__(self, "runs", _readonly(runs))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.runs, other.runs)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.runs.tobytes()))

    @property
    def area(self) -> int:
        return mask_area(self)

    def intervals(self) -> tuple[np.ndarray, np.ndarray]:
        """Half-open ``[start, end)`` linear-index intervals of the foreground."""
        offsets = np.concatenate(([0], np.cumsum(self.runs)))
        return offsets[1:-1:2], offsets[2::2]

    def bbox(self) -> BBox:
        """Tight box around the foreground, ``BBox(0, 0, 0, 0)`` if empty."""
        starts, ends = self.intervals()
        if starts.size == 0:
            return BBox(0, 0, 0, 0)
        w = self.width
        last = ends - 1
        r0, r1 = starts // w, last // w
        c0, c1 = starts % w, last % w
        # an interval that wraps a row boundary touches column 0 and column w-1
        wraps = r1 > r0
        x0 = int(np.where(wraps, 0, c0).min())
        x1 = int(np.where(wraps, w - 1, c1).max())
        y0, y1 = int(r0.min()), int(r1.max())
        return BBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)

    def to_array(self) -> np.ndarray:
        return rle_decode(self)

    def to_coco(self) -> dict:
        return {"size": [self.height, self.width], "counts": [int(r) for r in self.runs]}

    @classmethod
    def from_coco(cls, rle: dict) -> "BinaryMask":
        try:
            height, width = (int(v) for v in rle["size"])
            counts = rle["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MaskError(f"malformed RLE record: {exc}") from exc
        if isinstance(counts, (str, bytes)):
            raise MaskError("compressed string RLE is not supported; use an integer counts list")
        return cls(width, height, np.asarray(counts, dtype=np.int64))


def rle_encode(raster) -> BinaryMask:
    grid = np.asarray(raster)
    if grid.ndim != 2:
        raise MaskError(f"expected a 2-d raster, got shape {grid.shape}")
    height, width = grid.shape
    if height <= 0 or width <= 0:
        raise MaskError("raster must have at least one pixel")
    if int(height) * int(width) > _INT64_MAX:
        raise MaskError("raster too large for 64-bit pixel indices")
    flat = grid.astype(bool, copy=False).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size])).astype(np.int64)
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return BinaryMask(width, height, runs)


def rle_decode(mask: BinaryMask) -> np.ndarray:
    runs = mask.runs
    if int(runs.sum()) != mask.width * mask.height:
        raise MaskError("run-sum mismatch")
    values = (np.arange(runs.size) % 2).astype(bool)
    return np.repeat(values, runs).reshape(mask.height, mask.width)


def mask_area(mask: BinaryMask) -> int:
    return int(mask.runs[1::2].sum())


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    """Foreground overlap of two masks, computed on runs without decoding."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(f"{a.width}x{a.height} vs {b.width}x{b.height}")
    a_start, a_end = a.intervals()
    b_start, b_end = b.intervals()
    if a_start.size == 0 or b_start.size == 0:
        return 0
    # for each interval of a, the b-intervals it can touch form a contiguous slice
    lo = np.searchsorted(b_end, a_start, side="right")
    hi = np.searchsorted(b_start, a_end, side="left")
    counts = np.maximum(hi - lo, 0)
    total = int(counts.sum())
    if total == 0:
        return 0
    ai = np.repeat(np.arange(a_start.size), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    bi = lo[ai] + (np.arange(total) - first)
    overlap = np.minimum(a_end[ai], b_end[bi]) - np.maximum(a_start[ai], b_start[bi])
    return int(np.clip(overlap, 0, None).sum())


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter = intersection_area(a, b)
    union = mask_area(a) + mask_area(b) - inter
    if union == 0:
        return 0.0
    return inter / union


def bbox_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class ScoredInstance:
    """One detected object. ``bbox`` is derived from the mask when omitted."""

    category_id: int
    score: float
    mask: BinaryMask
    bbox: Optional[BBox] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        tight = self.mask.bbox()
        if tight.w == 0:
            raise ValidationError("instance mask has no foreground pixels")
        if self.bbox is None:
            object.__setattr__(self, "bbox", tight)
        elif self.bbox != tight:
            raise ValidationError(f"bbox {self.bbox} is not the tight box {tight} of the mask")

    @property
    def area(self) -> int:
        return mask_area(self.mask)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel category ids, shape ``(height, width)``; 0 is VOID."""

    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValidationError(f"label map must be a non-empty 2-d array, got {labels.shape}")
        object.__setattr__(self, "labels", _readonly(labels.astype(np.int64, copy=False)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    def unknown_labels(self, known_ids) -> set[int]:
        present = set(np.unique(self.labels).tolist())
        return present - set(known_ids) - {VOID}
