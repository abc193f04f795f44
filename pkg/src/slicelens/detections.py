"""Domain types for detector outcomes plus box matching and detector-level metrics.

A validation run is a list of Detection records, each one a TP, FP, or FN
under a fixed IoU threshold. `match_detections` reproduces the standard
confidence-greedy one-to-one matching protocol; `evaluate` derives
precision/recall and average precision from a matched set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .errors import ContractError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left origin, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def intersect(self, other: "BBox") -> Optional["BBox"]:
        """Geometric intersection, or None when the boxes are disjoint."""
        x1 = max(self.x, other.x)
        y1 = max(self.y, other.y)
        x2 = min(self.x2, other.x2)
        y2 = min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return BBox(x1, y1, x2 - x1, y2 - y1)

    def contains(self, other: "BBox", tol: float = 1e-9) -> bool:
        return (
            self.x <= other.x + tol
            and self.y <= other.y + tol
            and self.x2 >= other.x2 - tol
            and self.y2 >= other.y2 - tol
        )

    def clamp(self, image_w: float, image_h: float) -> "BBox":
        """Clip to image bounds; raises if nothing remains inside."""
        x1 = max(0.0, self.x)
        y1 = max(0.0, self.y)
        x2 = min(float(image_w), self.x2)
        y2 = min(float(image_h), self.y2)
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"box {self} lies outside a {image_w}x{image_h} image")
        return BBox(x1, y1, x2 - x1, y2 - y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


class DetectionKind(str, Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class Detection:
    """One matched outcome: a prediction, a ground truth, or a matched pair."""

    id: str
    image_id: str
    kind: DetectionKind
    predicted_box: Optional[BBox]
    gt_box: Optional[BBox]
    iou: float
    class_name: str
    confidence: Optional[float] = None

    def validate(self, iou_threshold: float) -> None:
        """Check the kind-specific box/IoU invariants."""
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"detection {self.id}: iou {self.iou} outside [0,1]")
        if self.kind is DetectionKind.FN and self.gt_box is None:
            raise ValueError(f"detection {self.id}: FN requires a gt_box")
        if self.kind in (DetectionKind.FP, DetectionKind.TP) and self.predicted_box is None:
            raise ValueError(f"detection {self.id}: {self.kind.value} requires a predicted_box")
        if self.kind is DetectionKind.TP and self.iou < iou_threshold:
            raise ValueError(
                f"detection {self.id}: TP with iou {self.iou} below threshold {iou_threshold}"
            )
        if (
            self.kind in (DetectionKind.FP, DetectionKind.FN)
            and self.predicted_box is not None
            and self.gt_box is not None
            and self.iou >= iou_threshold
        ):
            raise ValueError(
                f"detection {self.id}: {self.kind.value} carries both boxes with "
                f"iou {self.iou} >= threshold {iou_threshold}"
            )
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"detection {self.id}: confidence {self.confidence} outside [0,1]")


@dataclass(frozen=True)
class Dataset:
    """An immutable validation run for a single class."""

    name: str
    image_dir: Path
    detections: tuple[Detection, ...]
    iou_threshold: float
    class_name: str
    image_sizes: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        index: dict[str, Detection] = {}
        for d in self.detections:
            if d.id in index:
                raise ValueError(f"duplicate detection id: {d.id}")
            index[d.id] = d
        object.__setattr__(self, "_index", index)

    def by_id(self, detection_id: str) -> Detection:
        return self._index[detection_id]

    def of_kind(self, *kinds: DetectionKind) -> list[Detection]:
        return [d for d in self.detections if d.kind in kinds]

    def image_size(self, image_id: str) -> tuple[int, int]:
        return self.image_sizes[image_id]


@dataclass(frozen=True)
class EvalSummary:
    """Detector-level counts and ratios; undefined ratios reported as None."""

    tp_count: int
    fp_count: int
    fn_count: int
    precision: Optional[float]
    recall: Optional[float]
    map: Optional[float]


def compute_iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area of two boxes."""
    inter = a.intersect(b)
    inter_area = inter.area if inter is not None else 0.0
    union = a.area + b.area - inter_area
    return inter_area / union


def match_detections(
    predictions: Sequence[tuple[BBox, float]],
    ground_truths: Sequence[BBox],
    iou_threshold: float = 0.5,
    image_id: str = "",
    class_name: str = "",
    id_prefix: str = "det",
) -> list[Detection]:
    """Greedy one-to-one matching of predictions to ground truths.

    Predictions are visited in descending confidence order (stable on ties)
    and each claims the unmatched ground truth of highest IoU, provided that
    IoU reaches the threshold. Leftover predictions become FPs and leftover
    ground truths FNs; those records also carry the best sub-threshold
    counterpart box when one overlaps, so partial detections keep their IoU.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ContractError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i][1], i))
    gt_taken = [False] * len(ground_truths)
    matched_gt: dict[int, int] = {}  # pred index -> gt index

    for pi in order:
        box = predictions[pi][0]
        best_gi, best_iou = -1, 0.0
        for gi, gt in enumerate(ground_truths):
            if gt_taken[gi]:
                continue
            iou = compute_iou(box, gt)
            if iou >= iou_threshold and iou > best_iou:
                best_gi, best_iou = gi, iou
        if best_gi >= 0:
            gt_taken[best_gi] = True
            matched_gt[pi] = best_gi

    free_gts = [gi for gi, taken in enumerate(gt_taken) if not taken]
    free_preds = [pi for pi in range(len(predictions)) if pi not in matched_gt]

    out: list[Detection] = []
    for pi, (box, conf) in enumerate(predictions):
        det_id = f"{id_prefix}:{image_id}:p{pi}" if image_id else f"{id_prefix}:p{pi}"
        if pi in matched_gt:
            gi = matched_gt[pi]
            out.append(
                Detection(
                    id=det_id,
                    image_id=image_id,
                    kind=DetectionKind.TP,
                    predicted_box=box,
                    gt_box=ground_truths[gi],
                    iou=compute_iou(box, ground_truths[gi]),
                    class_name=class_name,
                    confidence=conf,
                )
            )
        else:
            best_gi, best_iou = -1, 0.0
            for gi in free_gts:
                iou = compute_iou(box, ground_truths[gi])
                if iou > best_iou:
                    best_gi, best_iou = gi, iou
            out.append(
                Detection(
                    id=det_id,
                    image_id=image_id,
                    kind=DetectionKind.FP,
                    predicted_box=box,
                    gt_box=ground_truths[best_gi] if best_gi >= 0 else None,
                    iou=best_iou,
                    class_name=class_name,
                    confidence=conf,
                )
            )
    for gi in free_gts:
        det_id = f"{id_prefix}:{image_id}:g{gi}" if image_id else f"{id_prefix}:g{gi}"
        best_pi, best_iou = -1, 0.0
        for pi in free_preds:
            iou = compute_iou(predictions[pi][0], ground_truths[gi])
            if iou > best_iou:
                best_pi, best_iou = pi, iou
        out.append(
            Detection(
                id=det_id,
                image_id=image_id,
                kind=DetectionKind.FN,
                predicted_box=predictions[best_pi][0] if best_pi >= 0 else None,
                gt_box=ground_truths[gi],
                iou=best_iou,
                class_name=class_name,
                confidence=None,
            )
        )
    return out


def average_precision(
    scored_hits: Sequence[tuple[float, bool]],
    n_ground_truth: int,
    eleven_point: bool = False,
) -> Optional[float]:
    """AP from (confidence, is_tp) pairs against a ground-truth count.

    Default is all-point interpolated AP (area under the precision envelope);
    `eleven_point` switches to the mean of interpolated precision at recalls
    0.0, 0.1, ..., 1.0.
    """
    if n_ground_truth <= 0:
        return None
    if not scored_hits:
        return 0.0
    ranked = sorted(range(len(scored_hits)), key=lambda i: (-scored_hits[i][0], i))
    precisions: list[float] = []
    recalls: list[float] = []
    tp = 0
    for rank, i in enumerate(ranked, start=1):
        if scored_hits[i][1]:
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / n_ground_truth)

    # Precision envelope: best precision achievable at or beyond each rank.
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])

    if eleven_point:
        total = 0.0
        for step in range(11):
            r = step / 10.0
            best = 0.0
            for rec, env in zip(recalls, envelope):
                if rec >= r - 1e-12:
                    best = env
                    break
            total += best
        return total / 11.0

    ap = 0.0
    prev_recall = 0.0
    for rec, env in zip(recalls, envelope):
        if rec > prev_recall:
            ap += (rec - prev_recall) * env
            prev_recall = rec
    return ap


def evaluate(detections: Sequence[Detection], eleven_point: bool = False) -> EvalSummary:
    """Counts, precision/recall, and AP over a matched detection list."""
    if not detections:
        raise ContractError("evaluate requires a nonempty detection list")
    tp = sum(1 for d in detections if d.kind is DetectionKind.TP)
    fp = sum(1 for d in detections if d.kind is DetectionKind.FP)
    fn = sum(1 for d in detections if d.kind is DetectionKind.FN)

    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None

    scored = [
        (d.confidence if d.confidence is not None else 0.0, d.kind is DetectionKind.TP)
        for d in detections
        if d.kind in (DetectionKind.TP, DetectionKind.FP)
    ]
    ap = average_precision(scored, n_ground_truth=tp + fn, eleven_point=eleven_point)
    return EvalSummary(tp, fp, fn, precision, recall, ap)
