"""Dataset ingestion from a JSON manifest.

Manifest schema:

    {
      "name": "car-val",
      "class_name": "car",
      "iou_threshold": 0.5,
      "image_dir": "images",            # relative paths resolve against the manifest
      "detections": [
        {"id": "d0", "image_id": "img_000.png", "kind": "TP",
         "predicted_box": {"x": 10, "y": 10, "w": 40, "h": 30},
         "gt_box": {"x": 12, "y": 11, "w": 38, "h": 29},
         "iou": 0.86, "confidence": 0.97},
        ...
      ]
    }

Boxes are integer pixel rectangles. Every image_id must name a readable
image file under image_dir; zero-area boxes are rejected rather than
clamped.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from PIL import Image

from .detections import BBox, Dataset, Detection, DetectionKind
from .errors import IngestError

_REQUIRED_TOP = ("name", "class_name", "image_dir", "detections")
_REQUIRED_DET = ("id", "image_id", "kind", "iou")


def _parse_box(raw: Any, det_id: str, which: str) -> BBox:
    if not isinstance(raw, dict):
        raise IngestError(f"detection {det_id}: {which} must be an object, got {type(raw).__name__}")
    for key in ("x", "y", "w", "h"):
        if key not in raw:
            raise IngestError(f"detection {det_id}: {which} missing field '{key}'")
        if not isinstance(raw[key], (int, float)) or isinstance(raw[key], bool):
            raise IngestError(f"detection {det_id}: {which}.{key} must be numeric")
    try:
        return BBox(float(raw["x"]), float(raw["y"]), float(raw["w"]), float(raw["h"]))
    except ValueError as exc:
        raise IngestError(f"detection {det_id}: {which}: {exc}") from exc


def _parse_detection(raw: dict, index: int, class_name: str, iou_threshold: float) -> Detection:
    det_id = raw.get("id", f"<record {index}>")
    for key in _REQUIRED_DET:
        if key not in raw:
            raise IngestError(f"detection {det_id} (record {index}): missing field '{key}'")
    try:
        kind = DetectionKind(raw["kind"])
    except ValueError:
        raise IngestError(
            f"detection {det_id}: kind must be one of TP/FP/FN, got {raw['kind']!r}"
        ) from None
    pred = _parse_box(raw["predicted_box"], det_id, "predicted_box") if raw.get("predicted_box") else None
    gt = _parse_box(raw["gt_box"], det_id, "gt_box") if raw.get("gt_box") else None
    det = Detection(
        id=str(raw["id"]),
        image_id=str(raw["image_id"]),
        kind=kind,
        predicted_box=pred,
        gt_box=gt,
        iou=float(raw["iou"]),
        class_name=class_name,
        confidence=float(raw["confidence"]) if raw.get("confidence") is not None else None,
    )
    if kind in (DetectionKind.TP, DetectionKind.FP) and det.confidence is None:
        raise IngestError(f"detection {det_id}: {kind.value} requires a confidence")
    try:
        det.validate(iou_threshold)
    except ValueError as exc:
        raise IngestError(str(exc)) from exc
    return det


def load_manifest(path: str | Path) -> Dataset:
    """Parse, validate, and freeze a dataset manifest."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise IngestError(f"manifest {path}: top level must be an object")
    for key in _REQUIRED_TOP:
        if key not in doc:
            raise IngestError(f"manifest {path}: missing field '{key}'")

    iou_threshold = float(doc.get("iou_threshold", 0.5))
    if not 0.0 < iou_threshold < 1.0:
        raise IngestError(f"manifest {path}: iou_threshold must be in (0,1)")
    class_name = str(doc["class_name"])
    image_dir = Path(doc["image_dir"])
    if not image_dir.is_absolute():
        image_dir = path.parent / image_dir

    if not isinstance(doc["detections"], list):
        raise IngestError(f"manifest {path}: 'detections' must be a list")
    detections: list[Detection] = []
    seen: set[str] = set()
    for i, raw in enumerate(doc["detections"]):
        det = _parse_detection(raw, i, class_name, iou_threshold)
        if det.id in seen:
            raise IngestError(f"duplicate detection id: {det.id}")
        seen.add(det.id)
        detections.append(det)

    image_sizes: dict[str, tuple[int, int]] = {}
    missing: list[str] = []
    for det in detections:
        if det.image_id in image_sizes or det.image_id in missing:
            continue
        img_path = image_dir / det.image_id
        try:
            with Image.open(img_path) as img:
                image_sizes[det.image_id] = (img.width, img.height)
        except (FileNotFoundError, OSError):
            missing.append(det.image_id)
    if missing:
        raise IngestError(
            f"manifest {path}: unreadable image files for image_ids: {sorted(set(missing))}"
        )

    for det in detections:
        w, h = image_sizes[det.image_id]
        for which, box in (("predicted_box", det.predicted_box), ("gt_box", det.gt_box)):
            if box is None:
                continue
            if box.x < 0 or box.y < 0 or box.x2 > w or box.y2 > h:
                raise IngestError(
                    f"detection {det.id}: {which} {box.as_tuple()} exceeds image bounds {w}x{h}"
                )

    return Dataset(
        name=str(doc["name"]),
        image_dir=image_dir,
        detections=tuple(detections),
        iou_threshold=iou_threshold,
        class_name=class_name,
        image_sizes=image_sizes,
    )


def save_manifest(dataset: Dataset, path: str | Path) -> None:
    """Serialize a dataset back to manifest JSON (image_dir kept absolute)."""

    def box_dict(box: Optional[BBox]) -> Optional[dict]:
        if box is None:
            return None
        return {"x": box.x, "y": box.y, "w": box.w, "h": box.h}

    doc = {
        "name": dataset.name,
        "class_name": dataset.class_name,
        "iou_threshold": dataset.iou_threshold,
        "image_dir": str(dataset.image_dir),
        "detections": [
            {
                "id": d.id,
                "image_id": d.image_id,
                "kind": d.kind.value,
                "predicted_box": box_dict(d.predicted_box),
                "gt_box": box_dict(d.gt_box),
                "iou": d.iou,
                "confidence": d.confidence,
            }
            for d in dataset.detections
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))
