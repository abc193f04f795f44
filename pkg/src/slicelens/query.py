"""Hypothetical-slice building blocks: text similarity search and 2D brushing.

Both operations return detection ids; turning those into a persisted slice
(with metrics and explanations) is the workspace's job.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends import TextEncoder
from .errors import StateError


@dataclass(frozen=True)
class QueryResult:
    query_text: str
    threshold: float
    hits: tuple[tuple[str, float], ...]  # (detection_id, similarity), descending

    @property
    def ids(self) -> list[str]:
        return [h[0] for h in self.hits]


def cosine_similarities(query_vec: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    query_vec = np.asarray(query_vec, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    qn = np.linalg.norm(query_vec)
    mn = np.linalg.norm(matrix, axis=1)
    denom = np.where(mn > 0, mn * (qn if qn > 0 else 1.0), 1.0)
    return (matrix @ query_vec) / denom


def text_query(query: str, ids: Sequence[str], explanation_vectors: np.ndarray,
               encoder: TextEncoder, threshold: float = 0.5) -> QueryResult:
    """Failures whose explanation embedding has cosine similarity >= threshold
    with the query embedding, ranked best first.

    The threshold is inclusive so the slider's displayed value itself still
    matches (the narration around the default 0.5 says "above").
    """
    if len(ids) == 0:
        raise StateError(
            "no explanation embeddings available; run the explanation stage first"
        )
    qvec = np.asarray(encoder.encode(query), dtype=np.float64)
    norm = np.linalg.norm(qvec)
    if norm > 0:
        qvec = qvec / norm
    sims = cosine_similarities(qvec, explanation_vectors)
    order = sorted(
        (i for i in range(len(ids)) if sims[i] >= threshold),
        key=lambda i: (-sims[i], ids[i]),
    )
    return QueryResult(
        query_text=query,
        threshold=threshold,
        hits=tuple((ids[i], float(sims[i])) for i in order),
    )


def brush_select(rect: tuple[float, float, float, float], ids: Sequence[str],
                 coords2d: np.ndarray) -> list[str]:
    """Ids of points inside the closed rectangle (x0, y0, x1, y1); corner
    order does not matter and edge contact counts as inside."""
    x0, y0, x1, y1 = rect
    xlo, xhi = min(x0, x1), max(x0, x1)
    ylo, yhi = min(y0, y1), max(y0, y1)
    coords2d = np.asarray(coords2d, dtype=np.float64)
    inside = (
        (coords2d[:, 0] >= xlo) & (coords2d[:, 0] <= xhi)
        & (coords2d[:, 1] >= ylo) & (coords2d[:, 1] <= yhi)
    )
    return [ids[i] for i in np.flatnonzero(inside)]
