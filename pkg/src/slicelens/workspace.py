"""Workspace: the on-disk home of datasets, pipeline artifacts, and slices.

Layout:

    workdir/
      registry.json                active dataset + known datasets
      <dataset>/
        manifest.json              normalized manifest copy
        cache/patches.jsonl        patch-vector cache
        tape.jsonl                 model transcripts (record/replay modes)
        embeddings.bin(+.ids.json) context-aware embeddings, all detections
        projection10d.jsonl        FP/FN coords for clustering (+ labels)
        projection2d.jsonl         FP/FN display coords (+ labels)
        clusters.json              tuned clustering result
        explanations.jsonl         per-detection explanation records
        slices.jsonl / edits.jsonl slice store
        run.json                   stage fingerprints for resume
"""
from __future__ import annotations

import json
import threading
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .backends import ModelSuite
from .config import EngineConfig, build_suite
from .density import DensityGrid, density_grid
from .detections import Dataset, Detection, DetectionKind
from .embedding import EmbeddingTable, read_embeddings
from .errors import ContractError, StateError
from .explain import (
    ExplanationRecord,
    crop_region,
    embed_explanations,
    explain_detection,
    keywords as make_keywords,
    read_explanations,
    select_representatives,
    summarize_slice,
    write_explanations,
)
from .manifest import load_manifest, save_manifest
from .query import QueryResult, brush_select, text_query
from .regions import region_set
from .slices import Slice, build_slice, medoid_member, new_slice_id, recompute_metrics
from .store import SliceStore

REGION_CHOICES = ("dr", "cr", "ir", "full")


class JobRunner:
    """Runs slice-explanation jobs either inline (eager) or on threads."""

    def __init__(self, eager: bool = True):
        self.eager = eager
        self._threads: list[threading.Thread] = []

    def submit(self, fn: Callable[[], None]) -> None:
        if self.eager:
            fn()
            return
        t = threading.Thread(target=fn, daemon=True)
        self._threads.append(t)
        t.start()

    def join(self, timeout: Optional[float] = None) -> None:
        for t in self._threads:
            t.join(timeout)
        self._threads = [t for t in self._threads if t.is_alive()]


class DatasetSpace:
    """Artifact accessors and interactive operations for one dataset."""

    def __init__(self, directory: Path, config: EngineConfig,
                 suite: Optional[ModelSuite] = None, jobs: Optional[JobRunner] = None):
        self.dir = Path(directory)
        self.config = config
        self.suite = suite or build_suite(config, self.dir)
        self.jobs = jobs or JobRunner(eager=True)
        self.store = SliceStore(self.dir / "slices.jsonl")
        self._dataset: Optional[Dataset] = None
        self._table: Optional[EmbeddingTable] = None
        self._records: Optional[dict[str, ExplanationRecord]] = None
        self._projection2d: Optional[dict] = None
        self._lock = threading.RLock()
        self._text_cache: dict[str, np.ndarray] = {}

    # -- artifact paths ----------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    @property
    def embeddings_path(self) -> Path:
        return self.dir / "embeddings.bin"

    @property
    def explanations_path(self) -> Path:
        return self.dir / "explanations.jsonl"

    def projection_path(self, dims: int) -> Path:
        return self.dir / f"projection{dims}d.jsonl"

    @property
    def clusters_path(self) -> Path:
        return self.dir / "clusters.json"

    @property
    def run_path(self) -> Path:
        return self.dir / "run.json"

    def invalidate(self) -> None:
        with self._lock:
            self._dataset = None
            self._table = None
            self._records = None
            self._projection2d = None

    # -- lazy artifact loading ----------------------------------------------

    @property
    def dataset(self) -> Dataset:
        with self._lock:
            if self._dataset is None:
                if not self.manifest_path.exists():
                    raise StateError(f"dataset not ingested: {self.dir}")
                self._dataset = load_manifest(self.manifest_path)
            return self._dataset

    @property
    def table(self) -> EmbeddingTable:
        with self._lock:
            if self._table is None:
                if not self.embeddings_path.exists():
                    raise StateError("embeddings missing; run the embed stage first")
                self._table = read_embeddings(self.embeddings_path)
            return self._table

    @property
    def records(self) -> dict[str, ExplanationRecord]:
        with self._lock:
            if self._records is None:
                self._records = read_explanations(self.explanations_path)
            return self._records

    def projection2d(self) -> dict:
        """{'ids': [...], 'coords': (n,2) array, 'kinds': [...], 'labels': [...]}"""
        with self._lock:
            if self._projection2d is None:
                path = self.projection_path(2)
                if not path.exists():
                    raise StateError("2D projection missing; run the discover stage first")
                ids, coords, kinds, labels = [], [], [], []
                for line in path.read_text().splitlines():
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    ids.append(row["detection_id"])
                    coords.append(row["coords"])
                    kinds.append(row["kind"])
                    labels.append(row.get("cluster_label", -1))
                self._projection2d = {
                    "ids": ids,
                    "coords": np.asarray(coords, dtype=np.float64),
                    "kinds": kinds,
                    "labels": labels,
                }
            return self._projection2d

    # -- interactive operations ---------------------------------------------

    def density(self, resolution: Optional[int] = None) -> DensityGrid:
        proj = self.projection2d()
        noise_flags = np.asarray([label < 0 for label in proj["labels"]])
        return density_grid(
            proj["coords"], noise_flags,
            resolution or self.config.density_resolution,
        )

    def query(self, query_text: str, threshold: float = 0.5) -> QueryResult:
        records = self.records
        if not records:
            raise StateError("no explanation embeddings yet; run the explain stage first")
        ids = sorted(records)
        vectors = np.stack([records[i].sentence_embedding for i in ids])
        return text_query(query_text, ids, vectors, self.suite.text_encoder, threshold)

    def brush(self, rect: tuple[float, float, float, float]) -> list[str]:
        proj = self.projection2d()
        return brush_select(rect, proj["ids"], proj["coords"])

    def create_hypothetical_slice(self, member_ids: Sequence[str], provenance: str) -> Slice:
        """Persist a pending slice with metrics; explanation fills in via a job."""
        if provenance not in ("brush", "query"):
            raise ContractError(f"hypothetical slices come from brush or query, got {provenance!r}")
        s = build_slice(member_ids, self.dataset, self.table,
                        provenance=provenance, slice_id=new_slice_id())
        self.store.upsert(s)
        self.jobs.submit(lambda: self._explain_slice_job(s.id))
        return s

    def refine_preview(self, slice_id: str, query_text: str, threshold: float) -> list[str]:
        """Members of the slice whose explanation matches the query."""
        s = self._require_slice(slice_id)
        records = self.records
        member_ids = [m for m in s.member_ids if m in records]
        if not member_ids:
            return []
        vectors = np.stack([records[m].sentence_embedding for m in member_ids])
        result = text_query(query_text, member_ids, vectors, self.suite.text_encoder, threshold)
        return result.ids

    def refine_replace(self, slice_id: str, member_ids: Sequence[str]) -> Slice:
        """Swap membership; metrics recompute now, explanation regenerates."""
        s = self._require_slice(slice_id)
        if not member_ids:
            raise ContractError("refusing to replace a slice with an empty member set")
        fresh = build_slice(member_ids, self.dataset, self.table,
                            provenance=s.provenance, slice_id=s.id)
        self.store.upsert(fresh)
        self.jobs.submit(lambda: self._explain_slice_job(s.id))
        return fresh

    def refine_save_as_new(self, slice_id: str, member_ids: Sequence[str]) -> Slice:
        self._require_slice(slice_id)  # original must exist and stays untouched
        return self.create_hypothetical_slice(member_ids, provenance="query")

    def refresh_slice(self, slice_id: str) -> Slice:
        """Explicit user regeneration of keywords/explanation (allowed even
        after edits; resets status to ready when done)."""
        s = self._require_slice(slice_id)
        pending = replace(s, status="pending")
        self.store.upsert(pending)
        self.jobs.submit(lambda: self._explain_slice_job(slice_id))
        return self.store.get(slice_id) or pending

    def patch_slice(self, slice_id: str, explanation: Optional[dict] = None,
                    keywords: Optional[Sequence[str]] = None,
                    member_ids: Optional[Sequence[str]] = None) -> Slice:
        """Manual edit; validates everything before anything is stored."""
        s = self._require_slice(slice_id)
        updated = s
        if member_ids is not None:
            if not member_ids:
                raise ContractError("a slice needs at least one member")
            updated = build_slice(member_ids, self.dataset, self.table,
                                  provenance=s.provenance, slice_id=s.id)
            updated = replace(updated, keywords=s.keywords, explanation=s.explanation)
        if explanation is not None:
            exp = updated.explanation
            updated = replace(updated, explanation=replace(
                exp,
                scene=explanation.get("scene", exp.scene),
                fp_cause=explanation.get("fp_cause", exp.fp_cause),
                fn_cause=explanation.get("fn_cause", exp.fn_cause),
            ))
        if keywords is not None:
            if len(keywords) != 3:
                raise ContractError(f"slices carry exactly 3 keywords, got {len(keywords)}")
            updated = replace(updated, keywords=tuple(str(k) for k in keywords))
        updated = replace(updated, status="edited")
        self.store.upsert(updated)
        self.store.record_edit(slice_id, {
            "explanation": explanation, "keywords": list(keywords) if keywords else None,
            "member_ids": list(member_ids) if member_ids else None,
        })
        return updated

    def delete_slice(self, slice_id: str) -> bool:
        return self.store.delete(slice_id)

    def sorted_slices(self, sort: Optional[str] = None,
                      filter_text: Optional[str] = None) -> list[Slice]:
        """Default order: member count descending. Metric sorts ascending so
        the worst slices surface first."""
        slices = self.store.list()
        if filter_text:
            needle = filter_text.lower()

            def matches(s: Slice) -> bool:
                hay = " ".join([
                    s.id, " ".join(s.keywords), s.explanation.scene,
                    s.explanation.fp_cause, s.explanation.fn_cause,
                ]).lower()
                return needle in hay

            slices = [s for s in slices if matches(s)]
        if sort is None or sort == "size":
            slices.sort(key=lambda s: (-s.size, s.id))
        elif sort in ("precision", "recall"):
            slices.sort(key=lambda s: (
                getattr(s, sort) if getattr(s, sort) is not None else float("inf"), s.id,
            ))
        else:
            raise ContractError(f"unknown sort key {sort!r}")
        return slices

    def crop(self, detection_id: str, region: str) -> Image.Image:
        if region not in REGION_CHOICES:
            raise ContractError(f"region must be one of {REGION_CHOICES}, got {region!r}")
        d = self.dataset.by_id(detection_id)
        image = Image.open(self.dataset.image_dir / d.image_id).convert("RGB")
        if region == "full":
            return image
        w, h = self.dataset.image_size(d.image_id)
        regions = region_set(d, w, h)
        box = {"dr": regions.dr, "cr": regions.cr, "ir": regions.ir}[region]
        if box is None:
            raise ContractError(f"detection {detection_id} has no intersection region")
        return crop_region(image, box)

    def representative_member(self, slice_id: str) -> str:
        return medoid_member(self._require_slice(slice_id), self.table)

    # -- slice explanation job ----------------------------------------------

    def _require_slice(self, slice_id: str) -> Slice:
        s = self.store.get(slice_id)
        if s is None:
            raise KeyError(slice_id)
        return s

    def _ensure_records(self, member_ids: Sequence[str]) -> dict[str, ExplanationRecord]:
        """Per-detection explanations for the members, computing any missing."""
        records = dict(self.records)
        missing = [m for m in member_ids if m not in records]
        if missing:
            dataset = self.dataset
            for det_id in missing:
                d = dataset.by_id(det_id)
                image = Image.open(dataset.image_dir / d.image_id).convert("RGB")
                w, h = dataset.image_size(d.image_id)
                record = explain_detection(
                    d, region_set(d, w, h), image, self.suite.vision,
                    self.suite.chat, dataset.class_name, self.config.prompts,
                )
                record.sentence_embedding = embed_explanations(
                    [record.explanation_text], self.suite.text_encoder, self._text_cache
                )[0]
                records[det_id] = record
            ordered = [records[d.id] for d in dataset.detections if d.id in records]
            write_explanations(ordered, self.explanations_path)
            with self._lock:
                self._records = records
        return records

    def _explain_slice_job(self, slice_id: str) -> None:
        s = self.store.get(slice_id)
        if s is None:
            return  # deleted while pending: job cancelled
        records = self._ensure_records(s.member_ids)
        subset = select_representatives(
            [records[m] for m in s.member_ids if m in records],
            token_budget=self.config.prompts.token_budget,
            coverage=self.config.prompts.coverage,
        )
        dataset = self.dataset
        kinds = {m: dataset.by_id(m).kind for m in s.member_ids}
        explanation = summarize_slice(
            subset, self.suite.chat, dataset.class_name,
            has_fps=any(k is DetectionKind.FP for k in kinds.values()),
            has_fns=any(k is DetectionKind.FN for k in kinds.values()),
            config=self.config.prompts,
        )
        words = make_keywords(subset, self.suite.chat, dataset.class_name, self.config.prompts)
        current = self.store.get(slice_id)
        if current is None:
            return  # deleted mid-flight
        self.store.upsert(replace(current, explanation=explanation,
                                  keywords=words, status="ready"))


class Workspace:
    """Registry of datasets under one working directory."""

    def __init__(self, root: str | Path, config: Optional[EngineConfig] = None,
                 eager_jobs: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config or EngineConfig()
        self.jobs = JobRunner(eager=eager_jobs)
        self._spaces: dict[str, DatasetSpace] = {}

    @property
    def registry_path(self) -> Path:
        return self.root / "registry.json"

    def _registry(self) -> dict:
        if self.registry_path.exists():
            return json.loads(self.registry_path.read_text())
        return {"active": None, "datasets": {}}

    def _save_registry(self, registry: dict) -> None:
        self.registry_path.write_text(json.dumps(registry, indent=2))

    def dataset_names(self) -> list[str]:
        return sorted(self._registry()["datasets"])

    @property
    def active_name(self) -> Optional[str]:
        return self._registry()["active"]

    def ingest(self, manifest_path: str | Path) -> DatasetSpace:
        """Validate a manifest and register its dataset in the workspace."""
        dataset = load_manifest(manifest_path)
        directory = self.root / dataset.name
        directory.mkdir(parents=True, exist_ok=True)
        save_manifest(dataset, directory / "manifest.json")
        registry = self._registry()
        registry["datasets"][dataset.name] = {"dir": dataset.name}
        if registry["active"] is None:
            registry["active"] = dataset.name
        self._save_registry(registry)
        return self.space(dataset.name)

    def activate(self, name: str) -> None:
        registry = self._registry()
        if name not in registry["datasets"]:
            raise KeyError(name)
        registry["active"] = name
        self._save_registry(registry)

    def space(self, name: Optional[str] = None) -> DatasetSpace:
        registry = self._registry()
        name = name or registry["active"]
        if name is None or name not in registry["datasets"]:
            raise KeyError(f"unknown dataset {name!r}")
        if name not in self._spaces:
            directory = self.root / registry["datasets"][name]["dir"]
            self._spaces[name] = DatasetSpace(directory, self.config, jobs=self.jobs)
        return self._spaces[name]
