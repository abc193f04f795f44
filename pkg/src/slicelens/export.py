"""Slice export/import: a zip archive of slice records, member crops, and
explanation transcripts."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .explain import record_to_json
from .slices import Slice
from .store import slice_from_json, slice_to_json
from .workspace import DatasetSpace


@dataclass
class ExportReport:
    path: Path
    exported: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # pending slices

    @property
    def warning(self) -> str:
        if not self.skipped:
            return ""
        return f"skipped pending slices: {', '.join(self.skipped)}"


def export_slices(space: DatasetSpace, slice_ids: Sequence[str],
                  path: str | Path) -> ExportReport:
    """Write ready/edited slices (with crops and transcripts) to a zip.

    Pending slices are excluded with a warning rather than an error, so a
    long-running explanation job never blocks an export of finished work.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report = ExportReport(path=path)
    records = space.records

    chosen: list[Slice] = []
    for sid in slice_ids:
        s = space.store.get(sid)
        if s is None:
            raise KeyError(sid)
        if s.status == "pending":
            report.skipped.append(sid)
            continue
        chosen.append(s)

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        manifest = {
            "dataset": space.dataset.name,
            "class_name": space.dataset.class_name,
            "slices": [s.id for s in chosen],
        }
        zf.writestr("export.json", json.dumps(manifest, indent=2))
        for s in chosen:
            zf.writestr(f"slices/{s.id}.json", json.dumps(slice_to_json(s), indent=2))
            for member in s.member_ids:
                crop = space.crop(member, "dr")
                buf = io.BytesIO()
                crop.save(buf, format="PNG")
                zf.writestr(f"crops/{s.id}/{_safe(member)}.png", buf.getvalue())
                record = records.get(member)
                if record is not None:
                    zf.writestr(
                        f"transcripts/{s.id}/{_safe(member)}.json",
                        json.dumps(record_to_json(record), indent=2),
                    )
            report.exported.append(s.id)
    return report


def _safe(name: str) -> str:
    return name.replace("/", "_").replace(":", "_")


def import_slices(path: str | Path) -> list[Slice]:
    """Read slice records back out of an export archive."""
    out: list[Slice] = []
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("export.json"))
        for sid in manifest["slices"]:
            out.append(slice_from_json(json.loads(zf.read(f"slices/{sid}.json"))))
    return out
