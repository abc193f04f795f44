"""Detection, context, and intersection regions plus perturbed crop patches.

Every detection yields a detection region (DR: the predicted box for FPs
and TPs, the ground-truth box for FNs) and a context region (CR: the DR
doubled around its center, clipped to the image). When the prediction and
ground truth overlap with IoU above 0.2 the overlap itself becomes the
intersection region (IR), marking a partial detection. Crop patches are
jittered outward by up to 10% per side to diversify encoder inputs.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detections import BBox, Detection, DetectionKind
from .errors import ContractError

IR_IOU_GATE = 0.2  # strict lower bound for the intersection region


@dataclass(frozen=True)
class RegionSet:
    dr: BBox
    cr: BBox
    ir: Optional[BBox]


def detection_region(d: Detection) -> BBox:
    """The box the analysis centers on: prediction for FP/TP, ground truth for FN."""
    box = d.gt_box if d.kind is DetectionKind.FN else d.predicted_box
    if box is None:
        raise ContractError(f"detection {d.id} ({d.kind.value}) is missing its region box")
    return box


def context_region(dr: BBox, image_w: float, image_h: float) -> BBox:
    """Double the detection window around its center, then clip to the image."""
    cx, cy = dr.center
    doubled = BBox(cx - dr.w, cy - dr.h, 2 * dr.w, 2 * dr.h)
    return doubled.clamp(image_w, image_h)


def intersection_region(pred: BBox, gt: BBox, iou: float) -> Optional[BBox]:
    """The prediction/ground-truth overlap, present only when iou > 0.2."""
    if iou <= IR_IOU_GATE:
        return None
    inter = pred.intersect(gt)
    if inter is None:
        raise ContractError(f"iou {iou} > {IR_IOU_GATE} but boxes are disjoint")
    return inter


def region_set(d: Detection, image_w: float, image_h: float) -> RegionSet:
    dr = detection_region(d)
    cr = context_region(dr, image_w, image_h)
    ir = None
    if d.predicted_box is not None and d.gt_box is not None:
        ir = intersection_region(d.predicted_box, d.gt_box, d.iou)
    return RegionSet(dr=dr, cr=cr, ir=ir)


def patch_seed(base_seed: int, detection_id: str, tag: str) -> int:
    """Stable per-detection seed so resumed runs reproduce the same patches."""
    return zlib.crc32(f"{base_seed}:{detection_id}:{tag}".encode()) & 0xFFFFFFFF


def perturbed_patches(
    region: BBox,
    image_w: float,
    image_h: float,
    seed: int,
    count: int = 3,
    max_expand: float = 0.10,
) -> list[BBox]:
    """`count` outward jitters of `region`, each side grown by U[0, max_expand]
    of that side's length, clipped to the image. Pure in (region, dims, seed)."""
    rng = np.random.default_rng(seed)
    patches: list[BBox] = []
    for _ in range(count):
        left, right, top, bottom = rng.uniform(0.0, max_expand, size=4)
        x1 = region.x - left * region.w
        x2 = region.x2 + right * region.w
        y1 = region.y - top * region.h
        y2 = region.y2 + bottom * region.h
        patches.append(BBox(x1, y1, x2 - x1, y2 - y1).clamp(image_w, image_h))
    return patches
