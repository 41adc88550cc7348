"""Per-pixel averaging of semantic confidence maps.

Confidence-map container (``.cmap``), all integers little-endian::

    offset  size      field
    0       8         magic b"PFCMAP01"
    8       4         width   (uint32)
    12      4         height  (uint32)
    16      4         K, number of categories (uint32)
    20      4*K       category ids (int32), plane order
    20+4K   4*K*H*W   K planes of float32, each row-major H x W
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, FormatError, ValidationError
from .mask import LabelMap, _readonly

logger = logging.getLogger(__name__)

MAGIC = b"PFCMAP01"
_HEADER = struct.Struct("<8sIII")

NORM_TOL = 1e-5
NORM_REJECT = 1e-3


@dataclass(frozen=True, eq=False)
class SemanticConfidenceMap:
    """Probabilities with shape ``(K, height, width)`` aligned to ``category_ids``.

    Per-pixel sums must be 1 within 1e-5. Drift up to 1e-3 is renormalized with a
    warning; anything larger is rejected.
    """

    category_ids: tuple
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = tuple(int(c) for c in self.category_ids)
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate category ids in {ids}")
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[0] != len(ids) or probs.shape[1] == 0 or probs.shape[2] == 0:
            raise ValidationError(f"probs shape {probs.shape} does not match {len(ids)} categories")
        if not np.isfinite(probs).all() or (probs < 0).any():
            raise ValidationError("confidences must be finite and non-negative")
        drift = np.abs(probs.sum(axis=0) - 1.0).max()
        if drift > NORM_REJECT:
            raise ValidationError(f"per-pixel confidences off normalization by {drift:.3g}")
        if drift > NORM_TOL:
            logger.warning("renormalizing confidence map (max drift %.3g)", drift)
            probs = probs / probs.sum(axis=0, keepdims=True)
        object.__setattr__(self, "category_ids", ids)
        object.__setattr__(self, "probs", _readonly(probs))

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]

    @classmethod
    def one_hot(cls, labels: LabelMap, category_ids: Sequence[int]) -> "SemanticConfidenceMap":
        ids = list(category_ids)
        probs = np.stack([labels.labels == c for c in ids]).astype(np.float64)
        return cls(tuple(ids), probs)


def ensemble_average(maps: Sequence[SemanticConfidenceMap]) -> SemanticConfidenceMap:
    """Unweighted per-pixel, per-category mean of the input maps.

    Summation runs in input order with Neumaier compensation, so reordering the
    inputs changes the result by at most a few ulps.
    """
    if not maps:
        raise ValidationError("need at least one confidence map")
    first = maps[0]
    for m in maps[1:]:
        if (m.height, m.width) != (first.height, first.width):
            raise DimensionMismatch(f"{m.width}x{m.height} vs {first.width}x{first.height}")
        if m.category_ids != first.category_ids:
            raise ValidationError(f"category ids {m.category_ids} != {first.category_ids}")
    if len(maps) == 1:
        return first
    total = first.probs.copy()
    comp = np.zeros_like(total)
    for m in maps[1:]:
        x = m.probs
        t = total + x
        big = np.abs(total) >= np.abs(x)
        comp += np.where(big, (total - t) + x, (x - t) + total)
        total = t
    mean = (total + comp) / len(maps)
    return SemanticConfidenceMap(first.category_ids, mean)


def argmax_labels(cmap: SemanticConfidenceMap) -> LabelMap:
    """Most confident category per pixel; exact ties go to the lowest id."""
    ids = np.asarray(cmap.category_ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    best = np.argmax(cmap.probs[order], axis=0)
    return LabelMap(ids[order][best])


def write_cmap(cmap: SemanticConfidenceMap) -> bytes:
    k = len(cmap.category_ids)
    header = _HEADER.pack(MAGIC, cmap.width, cmap.height, k)
    ids = np.asarray(cmap.category_ids, dtype="<i4").tobytes()
    planes = np.ascontiguousarray(cmap.probs, dtype="<f4").tobytes()
    return header + ids + planes


def read_cmap(data) -> SemanticConfidenceMap:
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("confidence map shorter than its header")
    magic, width, height, k = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * k + 4 * k * width * height
    if len(data) != expected:
        raise FormatError(f"confidence map is {len(data)} bytes, header implies {expected}")
    ids = np.frombuffer(data, dtype="<i4", count=k, offset=_HEADER.size)
    probs = np.frombuffer(data, dtype="<f4", count=k * width * height, offset=_HEADER.size + 4 * k)
    return SemanticConfidenceMap(tuple(ids.tolist()), probs.reshape(k, height, width))
