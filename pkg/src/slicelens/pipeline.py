"""Pipeline driver: embed -> reduce -> cluster -> slices -> explain.

Every stage persists an artifact plus a fingerprint of its inputs in
run.json; a re-run with unchanged inputs skips the stage outright, and an
interrupted run resumes from the last finished stage. Fingerprints chain,
so invalidating one stage invalidates everything downstream of it, and
stage failures leave previously written artifacts untouched.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import NOISE, ClusterResult, tune_parameters
from .density import density_grid
from .detections import DetectionKind
from .embedding import EmbeddingCache, embed_dataset, read_embeddings, write_embeddings
from .explain import explain_failures, select_representatives, summarize_slice
from .explain import keywords as make_keywords
from .reduction import reduce, reduce_2d
from .slices import slices_from_clusters
from .workspace import DatasetSpace

STAGES = ("embed", "reduce10d", "cluster", "reduce2d", "slices", "explain", "summaries")
MIN_REDUCIBLE = 4  # reduction needs at least this many failure points


@dataclass
class StageReport:
    name: str
    status: str  # ran | skipped
    detail: str = ""


@dataclass
class PipelineReport:
    dataset: str
    stages: list[StageReport] = field(default_factory=list)
    slice_count: int = 0
    noise_count: int = 0

    def status_of(self, stage: str) -> Optional[str]:
        for s in self.stages:
            if s.name == stage:
                return s.status
        return None

    def summary(self) -> str:
        lines = [f"dataset {self.dataset}: {self.slice_count} slices, "
                 f"{self.noise_count} noise failures"]
        for s in self.stages:
            lines.append(f"  {s.name:<10} {s.status}{(' - ' + s.detail) if s.detail else ''}")
        return "\n".join(lines)


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _sha_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


class _Runs:
    def __init__(self, path: Path):
        self.path = path
        self.doc = json.loads(path.read_text()) if path.exists() else {"stages": {}}

    def fresh(self, stage: str, fingerprint: str, outputs: list[Path]) -> bool:
        entry = self.doc["stages"].get(stage)
        return (
            entry is not None
            and entry.get("fingerprint") == fingerprint
            and all(p.exists() for p in outputs)
        )

    def mark(self, stage: str, fingerprint: str) -> None:
        self.doc["stages"][stage] = {"fingerprint": fingerprint}
        self.path.write_text(json.dumps(self.doc, indent=2))


def _write_projection(path: Path, ids: list[str], kinds: list[str],
                      coords: np.ndarray, labels: Optional[list[int]],
                      meta: dict) -> None:
    tmp = path.with_suffix(".tmp")
    with tmp.open("w") as fh:
        for i, det_id in enumerate(ids):
            row = {
                "detection_id": det_id,
                "coords": [float(v) for v in coords[i]],
                "kind": kinds[i],
                "cluster_label": int(labels[i]) if labels is not None else None,
            }
            fh.write(json.dumps(row) + "\n")
    tmp.replace(path)
    path.with_name(path.stem + ".meta.json").write_text(json.dumps(meta, indent=2))


def _read_projection(path: Path) -> tuple[list[str], np.ndarray]:
    ids, coords = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        ids.append(row["detection_id"])
        coords.append(row["coords"])
    return ids, np.asarray(coords, dtype=np.float64)


def run_pipeline(space: DatasetSpace) -> PipelineReport:
    """Run (or resume) every stage for one dataset."""
    config = space.config
    dataset = space.dataset
    report = PipelineReport(dataset=dataset.name)
    runs = _Runs(space.run_path)
    manifest_sha = _sha_file(space.manifest_path)

    failures = dataset.of_kind(DetectionKind.FP, DetectionKind.FN)
    failure_ids = [d.id for d in failures]
    failure_kinds = [d.kind.value for d in failures]
    reducible = len(failures) >= MIN_REDUCIBLE

    # -- embed ----------------------------------------------------------------
    enc = space.suite.image_encoder
    fp_embed = _sha_text(f"embed|{manifest_sha}|{enc.encoder_id}|{enc.dim}|{config.seed}")
    if runs.fresh("embed", fp_embed, [space.embeddings_path]):
        report.stages.append(StageReport("embed", "skipped"))
    else:
        cache = EmbeddingCache(space.dir / "cache" / "patches.jsonl")
        table = embed_dataset(dataset, enc, seed=config.seed, cache=cache,
                              max_workers=config.max_workers)
        write_embeddings(table, space.embeddings_path)
        runs.mark("embed", fp_embed)
        report.stages.append(StageReport("embed", "ran", f"{len(table.ids)} embeddings"))
    table = read_embeddings(space.embeddings_path)
    fail_matrix = table.submatrix(failure_ids)

    # -- reduce10d -------------------------------------------------------------
    params_sig = json.dumps(config.reduce.__dict__, sort_keys=True)
    fp_r10 = _sha_text(f"reduce10d|{fp_embed}|{params_sig}|{config.seed}")
    path10 = space.projection_path(10)
    if runs.fresh("reduce10d", fp_r10, [path10]):
        report.stages.append(StageReport("reduce10d", "skipped"))
    elif not reducible:
        _write_projection(path10, failure_ids, failure_kinds,
                          np.zeros((len(failures), 10)), None,
                          {"degenerate": True, "out_dims": 10})
        runs.mark("reduce10d", fp_r10)
        report.stages.append(StageReport("reduce10d", "skipped",
                                         f"fewer than {MIN_REDUCIBLE} failures"))
    else:
        result = reduce(fail_matrix, 10, config.reduce, seed=config.seed)
        _write_projection(path10, failure_ids, failure_kinds, result.coords, None, result.meta)
        runs.mark("reduce10d", fp_r10)
        report.stages.append(StageReport("reduce10d", "ran"))

    # -- cluster ----------------------------------------------------------------
    fp_cluster = _sha_text(f"cluster|{fp_r10}|{list(config.cluster_grid)}")
    if runs.fresh("cluster", fp_cluster, [space.clusters_path]):
        report.stages.append(StageReport("cluster", "skipped"))
        clusters_doc = json.loads(space.clusters_path.read_text())
        labels = [clusters_doc["labels"][i] for i in failure_ids]
    else:
        if reducible:
            ids10, coords10 = _read_projection(path10)
            tuned = tune_parameters(coords10, list(config.cluster_grid))
            labels_by_id = {det_id: int(lab) for det_id, lab in zip(ids10, tuned.labels)}
        else:
            tuned = ClusterResult(labels=np.full(len(failures), NOISE), params={}, silhouette=None)
            labels_by_id = {det_id: NOISE for det_id in failure_ids}
        labels = [labels_by_id[i] for i in failure_ids]
        space.clusters_path.write_text(json.dumps({
            "params": tuned.params,
            "silhouette": tuned.silhouette,
            "n_clusters": tuned.n_clusters,
            "labels": labels_by_id,
        }, indent=2))
        if reducible:
            meta10 = json.loads(path10.with_name(path10.stem + ".meta.json").read_text())
            _write_projection(path10, failure_ids, failure_kinds,
                              _read_projection(path10)[1], labels, meta10)
        runs.mark("cluster", fp_cluster)
        report.stages.append(StageReport(
            "cluster", "ran", f"{tuned.n_clusters} clusters, params {tuned.params}"))

    # -- reduce2d -----------------------------------------------------------------
    fp_r2 = _sha_text(f"reduce2d|{fp_cluster}")
    path2 = space.projection_path(2)
    if runs.fresh("reduce2d", fp_r2, [path2]):
        report.stages.append(StageReport("reduce2d", "skipped"))
    elif not reducible:
        _write_projection(path2, failure_ids, failure_kinds,
                          np.zeros((len(failures), 2)), labels,
                          {"degenerate": True, "out_dims": 2})
        runs.mark("reduce2d", fp_r2)
        report.stages.append(StageReport("reduce2d", "skipped",
                                         f"fewer than {MIN_REDUCIBLE} failures"))
    else:
        result2 = reduce_2d(fail_matrix, seed=config.seed, params=config.reduce)
        _write_projection(path2, failure_ids, failure_kinds, result2.coords, labels, result2.meta)
        runs.mark("reduce2d", fp_r2)
        report.stages.append(StageReport("reduce2d", "ran"))

    # -- slices --------------------------------------------------------------------
    fp_slices = _sha_text(f"slices|{fp_cluster}|{fp_embed}")
    if runs.fresh("slices", fp_slices, [space.store.path]):
        report.stages.append(StageReport("slices", "skipped"))
    else:
        tuned = ClusterResult(labels=np.asarray(labels), params={}, silhouette=None)
        space.store.clear_auto_slices()
        created = 0
        for s in slices_from_clusters(tuned, failure_ids, dataset, table):
            if space.store.get(s.id) is None:  # keep edited survivors
                space.store.upsert(s)
                created += 1
        runs.mark("slices", fp_slices)
        report.stages.append(StageReport("slices", "ran", f"{created} auto slices"))

    # -- explain --------------------------------------------------------------------
    prompts_sig = _sha_text(json.dumps({
        "questions": config.prompts.questions,
        "questioner": config.prompts.questioner_template,
        "interpreter": config.prompts.interpreter_template,
        "max_iterations": config.prompts.max_iterations,
    }, sort_keys=True))
    fp_explain = _sha_text(f"explain|{manifest_sha}|{prompts_sig}|{space.suite.text_encoder.encoder_id}")
    if runs.fresh("explain", fp_explain, [space.explanations_path]):
        report.stages.append(StageReport("explain", "skipped"))
    else:
        records = explain_failures(dataset, space.suite, config.prompts,
                                   space.explanations_path)
        runs.mark("explain", fp_explain)
        report.stages.append(StageReport("explain", "ran", f"{len(records)} records"))
    space.invalidate()

    # -- summaries -------------------------------------------------------------------
    members_sig = _sha_text(json.dumps(
        [[s.id, list(s.member_ids)] for s in space.store.list()], sort_keys=True))
    fp_summaries = _sha_text(f"summaries|{fp_explain}|{fp_slices}|{members_sig}")
    if runs.fresh("summaries", fp_summaries, [space.store.path]):
        report.stages.append(StageReport("summaries", "skipped"))
    else:
        records = space.records
        refreshed = 0
        for s in space.store.list():
            if s.status == "edited":
                continue  # manual edits are never auto-overwritten
            subset = select_representatives(
                [records[m] for m in s.member_ids if m in records],
                token_budget=config.prompts.token_budget,
                coverage=config.prompts.coverage,
            )
            kinds = {m: dataset.by_id(m).kind for m in s.member_ids}
            explanation = summarize_slice(
                subset, space.suite.chat, dataset.class_name,
                has_fps=any(k is DetectionKind.FP for k in kinds.values()),
                has_fns=any(k is DetectionKind.FN for k in kinds.values()),
                config=config.prompts,
            )
            words = make_keywords(subset, space.suite.chat, dataset.class_name, config.prompts)
            space.store.upsert(dc_replace(
                s, explanation=explanation, keywords=words, status="ready"))
            refreshed += 1
        runs.mark("summaries", fp_summaries)
        report.stages.append(StageReport("summaries", "ran", f"{refreshed} slices summarized"))

    # Density grids are recomputed on demand; sanity-check conservation here.
    proj = space.projection2d()
    noise_flags = np.asarray([label is None or label < 0 for label in proj["labels"]])
    if len(proj["ids"]):
        grid = density_grid(proj["coords"], noise_flags, config.density_resolution)
        assert grid.total == len(proj["ids"])
    report.slice_count = len([s for s in space.store.list() if s.provenance == "auto"])
    report.noise_count = int(noise_flags.sum())
    return report
