"""Slices: coherent groups of FP/FN detections with TP-calibrated metrics.

A slice's members are failures only. To judge how significant the failure
region is, nearby true positives are pulled in: the slice radius is the
mean nearest-neighbor distance among members (in the full context-aware
embedding space), and any TP strictly closer than that radius to some
member counts toward the slice's precision and recall.
"""
from __future__ import annotations

import uuid
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .clustering import ClusterResult
from .detections import Dataset, DetectionKind
from .embedding import EmbeddingTable
from .errors import ContractError

PROVENANCES = ("auto", "brush", "query")
STATUSES = ("pending", "ready", "edited")


@dataclass(frozen=True)
class SliceExplanation:
    scene: str = ""
    fp_cause: str = ""
    fn_cause: str = ""

    def as_dict(self) -> dict:
        return {"scene": self.scene, "fp_cause": self.fp_cause, "fn_cause": self.fn_cause}


@dataclass(frozen=True)
class Slice:
    id: str
    member_ids: tuple[str, ...]          # FP/FN detection ids only
    assigned_tp_ids: tuple[str, ...]
    precision: Optional[float]
    recall: Optional[float]
    keywords: tuple[str, ...] = ()
    explanation: SliceExplanation = field(default_factory=SliceExplanation)
    provenance: str = "auto"
    status: str = "pending"

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        overlap = set(self.member_ids) & set(self.assigned_tp_ids)
        if overlap:
            raise ValueError(f"slice {self.id}: TPs overlap members: {sorted(overlap)}")

    @property
    def size(self) -> int:
        return len(self.member_ids)


def new_slice_id() -> str:
    return f"slice-{uuid.uuid4().hex[:12]}"


def slice_radius(member_vectors: np.ndarray) -> float:
    """Mean distance from each member to its nearest other member.

    A singleton slice has radius 0 by convention, so it attracts no TPs.
    """
    member_vectors = np.asarray(member_vectors, dtype=np.float64)
    n = member_vectors.shape[0]
    if n == 0:
        raise ContractError("slice_radius needs at least one member")
    if n == 1:
        return 0.0
    sq = np.sum(member_vectors * member_vectors, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (member_vectors @ member_vectors.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    return float(np.mean(np.sqrt(d2.min(axis=1))))


def assign_tps(member_vectors: np.ndarray, tp_ids: Sequence[str],
               tp_vectors: np.ndarray, radius: Optional[float] = None) -> list[str]:
    """TP ids whose distance to the nearest member is strictly below the radius."""
    member_vectors = np.asarray(member_vectors, dtype=np.float64)
    if radius is None:
        radius = slice_radius(member_vectors)
    if len(tp_ids) == 0 or radius <= 0.0:
        return []
    tp_vectors = np.asarray(tp_vectors, dtype=np.float64)
    sq_m = np.sum(member_vectors * member_vectors, axis=1)
    sq_t = np.sum(tp_vectors * tp_vectors, axis=1)
    d2 = sq_t[:, None] + sq_m[None, :] - 2.0 * (tp_vectors @ member_vectors.T)
    np.maximum(d2, 0.0, out=d2)
    nearest = np.sqrt(d2.min(axis=1))
    return [tp_id for tp_id, dist in zip(tp_ids, nearest) if dist < radius]


def slice_precision_recall(n_fp: int, n_fn: int, n_tp: int) -> tuple[Optional[float], Optional[float]]:
    precision = n_tp / (n_tp + n_fp) if n_tp + n_fp > 0 else None
    recall = n_tp / (n_tp + n_fn) if n_tp + n_fn > 0 else None
    return precision, recall


def build_slice(member_ids: Sequence[str], dataset: Dataset, table: EmbeddingTable,
                provenance: str = "auto", slice_id: Optional[str] = None) -> Slice:
    """Assemble a slice from FP/FN member ids: radius, TP assignment, metrics."""
    if not member_ids:
        raise ContractError("a slice needs at least one member")
    kinds = {m: dataset.by_id(m).kind for m in member_ids}
    bad = [m for m, k in kinds.items() if k is DetectionKind.TP]
    if bad:
        raise ContractError(f"slice members must be FP/FN; got TPs: {bad}")

    member_vecs = table.submatrix(member_ids)
    tps = [d.id for d in dataset.of_kind(DetectionKind.TP)]
    assigned = assign_tps(member_vecs, tps, table.submatrix(tps)) if tps else []
    n_fp = sum(1 for k in kinds.values() if k is DetectionKind.FP)
    n_fn = sum(1 for k in kinds.values() if k is DetectionKind.FN)
    precision, recall = slice_precision_recall(n_fp, n_fn, len(assigned))
    return Slice(
        id=slice_id or new_slice_id(),
        member_ids=tuple(member_ids),
        assigned_tp_ids=tuple(assigned),
        precision=precision,
        recall=recall,
        provenance=provenance,
        status="pending",
    )


def slices_from_clusters(result: ClusterResult, failure_ids: Sequence[str],
                         dataset: Dataset, table: EmbeddingTable) -> list[Slice]:
    """One slice per non-noise cluster label, ids `slice-000`, `slice-001`, ..."""
    out: list[Slice] = []
    labels = np.asarray(result.labels)
    for label in sorted(set(labels[labels >= 0].tolist())):
        members = [failure_ids[i] for i in np.flatnonzero(labels == label)]
        out.append(build_slice(members, dataset, table,
                               provenance="auto", slice_id=f"slice-{label:03d}"))
    return out


def recompute_metrics(slice_: Slice, dataset: Dataset, table: EmbeddingTable) -> Slice:
    """Refresh TP assignment and metrics after a membership change."""
    fresh = build_slice(slice_.member_ids, dataset, table,
                        provenance=slice_.provenance, slice_id=slice_.id)
    return replace(
        slice_,
        assigned_tp_ids=fresh.assigned_tp_ids,
        precision=fresh.precision,
        recall=fresh.recall,
    )


def medoid_member(slice_: Slice, table: EmbeddingTable) -> str:
    """Member closest to the slice's embedding centroid (its showcase image)."""
    vecs = table.submatrix(slice_.member_ids)
    centroid = vecs.mean(axis=0)
    dists = np.linalg.norm(vecs - centroid, axis=1)
    return slice_.member_ids[int(np.argmin(dists))]
