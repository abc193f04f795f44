"""Slice persistence: JSON-lines store per dataset plus an edit history.

The slice file is rewritten atomically on every mutation (desk-scale data)
while edits append to a separate history log; the latest edit always wins.
Edited slices keep status "edited" and the pipeline never overwrites them.
"""
from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Optional

from .slices import Slice, SliceExplanation


def slice_to_json(s: Slice) -> dict:
    return {
        "id": s.id,
        "member_ids": list(s.member_ids),
        "assigned_tp_ids": list(s.assigned_tp_ids),
        "precision": s.precision,
        "recall": s.recall,
        "keywords": list(s.keywords),
        "explanation": s.explanation.as_dict(),
        "provenance": s.provenance,
        "status": s.status,
    }


def slice_from_json(doc: dict) -> Slice:
    exp = doc.get("explanation") or {}
    return Slice(
        id=doc["id"],
        member_ids=tuple(doc["member_ids"]),
        assigned_tp_ids=tuple(doc.get("assigned_tp_ids", [])),
        precision=doc.get("precision"),
        recall=doc.get("recall"),
        keywords=tuple(doc.get("keywords", [])),
        explanation=SliceExplanation(
            scene=exp.get("scene", ""),
            fp_cause=exp.get("fp_cause", ""),
            fn_cause=exp.get("fn_cause", ""),
        ),
        provenance=doc.get("provenance", "auto"),
        status=doc.get("status", "pending"),
    )


class SliceStore:
    """All slices of one dataset, keyed by id, in insertion order."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.edits_path = self.path.with_name("edits.jsonl")
        self._lock = threading.RLock()
        self._slices: dict[str, Slice] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    s = slice_from_json(json.loads(line))
                    self._slices[s.id] = s

    def _flush(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.parent.mkdir(parents=True, exist_ok=True)
        with tmp.open("w") as fh:
            for s in self._slices.values():
                fh.write(json.dumps(slice_to_json(s)) + "\n")
        tmp.replace(self.path)

    def list(self) -> list[Slice]:
        with self._lock:
            return list(self._slices.values())

    def get(self, slice_id: str) -> Optional[Slice]:
        with self._lock:
            return self._slices.get(slice_id)

    def __contains__(self, slice_id: str) -> bool:
        return self.get(slice_id) is not None

    def upsert(self, s: Slice) -> None:
        with self._lock:
            self._slices[s.id] = s
            self._flush()

    def delete(self, slice_id: str) -> bool:
        with self._lock:
            if slice_id not in self._slices:
                return False
            del self._slices[slice_id]
            self._flush()
            return True

    def record_edit(self, slice_id: str, fields: dict) -> None:
        with self._lock:
            with self.edits_path.open("a") as fh:
                fh.write(json.dumps({"slice_id": slice_id, "fields": fields}) + "\n")

    def clear_auto_slices(self) -> None:
        """Drop auto slices that were never edited (pipeline re-run path)."""
        with self._lock:
            keep = {
                sid: s for sid, s in self._slices.items()
                if s.provenance != "auto" or s.status == "edited"
            }
            self._slices = keep
            self._flush()
