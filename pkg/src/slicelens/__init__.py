"""slicelens: discover, quantify, and explain failure slices of object detectors."""

from .detections import (
    BBox,
    Dataset,
    Detection,
    DetectionKind,
    EvalSummary,
    compute_iou,
    evaluate,
    match_detections,
)
from .manifest import load_manifest, save_manifest

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Dataset",
    "Detection",
    "DetectionKind",
    "EvalSummary",
    "compute_iou",
    "evaluate",
    "match_detections",
    "load_manifest",
    "save_manifest",
    "__version__",
]
