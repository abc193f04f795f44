"""Fine-tuning set curation: retrieve training images that resemble a slice.

Two retrieval routes per slice: nearest training embeddings to the slice
centroid, or highest image-text score against "A photo of {scene}". Each
slice contributes three times its member count; the combined pool is then
cyclically replicated up to the original training-set size, standing in
for per-sample re-weighting.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .backends import ImageTextScorer
from .errors import ContractError

TEXT_SCORE_TEMPLATE = "A photo of "
DEFAULT_K_FACTOR = 3

RETRIEVAL_METHODS = ("embedding", "text_score")


@dataclass
class CurationPlan:
    method: str
    k_factor: int
    target_size: int
    per_slice: dict[str, list[str]] = field(default_factory=dict)  # slice id -> image ids

    def __post_init__(self) -> None:
        if self.method not in RETRIEVAL_METHODS:
            raise ContractError(f"method must be one of {RETRIEVAL_METHODS}")


def centroid_retrieve(member_vectors: np.ndarray, pool_ids: Sequence[str],
                      pool_vectors: np.ndarray, k: int) -> list[str]:
    """The k training images whose embeddings sit closest to the slice centroid."""
    member_vectors = np.asarray(member_vectors, dtype=np.float64)
    if member_vectors.size == 0:
        raise ContractError("centroid retrieval needs a nonempty slice")
    if k > len(pool_ids):
        warnings.warn(
            f"requested k={k} exceeds pool of {len(pool_ids)}; returning the whole pool",
            stacklevel=2,
        )
        k = len(pool_ids)
    centroid = member_vectors.mean(axis=0)
    dists = np.linalg.norm(np.asarray(pool_vectors, dtype=np.float64) - centroid, axis=1)
    order = sorted(range(len(pool_ids)), key=lambda i: (dists[i], pool_ids[i]))
    return [pool_ids[i] for i in order[:k]]


def text_score_retrieve(scene_description: str, pool_ids: Sequence[str],
                        load_image: Callable[[str], "object"], k: int,
                        scorer: ImageTextScorer) -> list[str]:
    """Top-k images by joint image-text score against the photo template;
    score ties break by image id order."""
    text = TEXT_SCORE_TEMPLATE + scene_description
    scores = [float(scorer.score(load_image(image_id), text)) for image_id in pool_ids]
    if k > len(pool_ids):
        warnings.warn(
            f"requested k={k} exceeds pool of {len(pool_ids)}; returning the whole pool",
            stacklevel=2,
        )
        k = len(pool_ids)
    order = sorted(range(len(pool_ids)), key=lambda i: (-scores[i], pool_ids[i]))
    return [pool_ids[i] for i in order[:k]]


def build_reweighted_set(plans: CurationPlan, target_size: int) -> list[str]:
    """Deduplicated union of per-slice retrievals, cyclically replicated to
    exactly target_size entries."""
    if not plans.per_slice:
        raise ContractError("no retrieval plans to combine")
    union: list[str] = []
    seen: set[str] = set()
    for slice_id in plans.per_slice:
        for image_id in plans.per_slice[slice_id]:
            if image_id not in seen:
                seen.add(image_id)
                union.append(image_id)
    if not union:
        raise ContractError("retrieval union is empty")
    return [union[i % len(union)] for i in range(target_size)]


def curate(slice_members: dict[str, np.ndarray], scene_texts: dict[str, str],
           pool_ids: Sequence[str], pool_vectors: Optional[np.ndarray],
           load_image: Optional[Callable[[str], "object"]],
           scorer: Optional[ImageTextScorer], method: str,
           target_size: int, k_factor: int = DEFAULT_K_FACTOR) -> CurationPlan:
    """Per-slice retrieval (k = k_factor x member count) plus the combined
    replicated list, as one plan."""
    plan = CurationPlan(method=method, k_factor=k_factor, target_size=target_size)
    for slice_id, member_vecs in slice_members.items():
        k = k_factor * len(member_vecs)
        if method == "embedding":
            if pool_vectors is None:
                raise ContractError("embedding retrieval needs pool vectors")
            plan.per_slice[slice_id] = centroid_retrieve(member_vecs, pool_ids, pool_vectors, k)
        else:
            if scorer is None or load_image is None:
                raise ContractError("text-score retrieval needs a scorer and image loader")
            plan.per_slice[slice_id] = text_score_retrieve(
                scene_texts.get(slice_id, ""), pool_ids, load_image, k, scorer)
    return plan


def write_curated_manifest(plan: CurationPlan, images: Sequence[str],
                           name: str, image_dir: str | Path, path: str | Path) -> None:
    """Manifest-shaped JSON with a replicated (weight-free) image list."""
    doc = {
        "name": name,
        "method": plan.method,
        "k_factor": plan.k_factor,
        "target_size": plan.target_size,
        "image_dir": str(image_dir),
        "images": list(images),
    }
    Path(path).write_text(json.dumps(doc, indent=2))
