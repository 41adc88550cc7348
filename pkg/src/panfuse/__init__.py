"""Panoptic fusion and evaluation toolkit.

Merge expert instance predictions, ensemble semantic confidence maps, fuse both
into panoptic segmentations and score them with PQ/SQ/RQ, mIoU and COCO mAP.
"""

from .coco_io import (
    Category,
    DatasetManifest,
    ImageInfo,
    PanopticImage,
    SegmentInfo,
    merged_thing_id,
    panoptic_to_semantic_gt,
    read_instance_results,
    read_panoptic_png,
    validate_panoptic,
    write_panoptic_png,
)
from .ensemble import SemanticConfidenceMap, argmax_labels, ensemble_average
from .experts import ExpertRouting, merge_expert_predictions, validate_routing
from .fusion import FusionParams, fuse, fuse_batch
from .mask import BBox, BinaryMask, LabelMap, ScoredInstance, bbox_iou, mask_area, mask_iou, rle_decode, rle_encode
from .metrics import coco_map, miou, pq_match, pq_summarize
from .synth import Degradation, SceneSpec, degrade, generate_gt

__version__ = "0.1.0"

__all__ = [
    "argmax_labels",
    "BBox",
    "bbox_iou",
    "BinaryMask",
    "Category",
    "coco_map",
    "DatasetManifest",
    "Degradation",
    "degrade",
    "ensemble_average",
    "ExpertRouting",
    "fuse",
    "fuse_batch",
    "FusionParams",
    "generate_gt",
    "ImageInfo",
    "LabelMap",
    "mask_area",
    "mask_iou",
    "merge_expert_predictions",
    "merged_thing_id",
    "miou",
    "panoptic_to_semantic_gt",
    "PanopticImage",
    "pq_match",
    "pq_summarize",
    "read_instance_results",
    "read_panoptic_png",
    "rle_decode",
    "rle_encode",
    "SceneSpec",
    "ScoredInstance",
    "SegmentInfo",
    "SemanticConfidenceMap",
    "validate_panoptic",
    "validate_routing",
    "write_panoptic_png",
]
