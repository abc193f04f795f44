"""Command-line driver for the slice-discovery workflow."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import EngineConfig
from .curation import curate, write_curated_manifest
from .detections import DetectionKind
from .errors import SliceLensError
from .export import export_slices
from .pipeline import run_pipeline
from .workspace import Workspace


def _workspace(workdir: str, config: str | None) -> Workspace:
    cfg = EngineConfig.from_file(config) if config else EngineConfig()
    return Workspace(workdir, cfg)


@click.group()
def main() -> None:
    """Discover, quantify, and explain failure slices of an object detector."""


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def ingest(manifest: str, workdir: str, config: str | None) -> None:
    """Validate a manifest and register the dataset."""
    ws = _workspace(workdir, config)
    space = ws.ingest(manifest)
    click.echo(f"ingested {space.dataset.name}: {len(space.dataset.detections)} detections")


@main.command()
@click.argument("dataset")
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def embed(dataset: str, workdir: str, config: str | None) -> None:
    """Compute context-aware embeddings for every detection."""
    _run_stages(dataset, workdir, config, upto="embed")


@main.command()
@click.argument("dataset")
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def discover(dataset: str, workdir: str, config: str | None) -> None:
    """Reduce, cluster, and build auto slices with metrics."""
    _run_stages(dataset, workdir, config, upto="slices")


@main.command()
@click.argument("dataset")
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def explain(dataset: str, workdir: str, config: str | None) -> None:
    """Generate per-failure explanations and slice summaries."""
    _run_stages(dataset, workdir, config, upto="summaries")


def _run_stages(dataset: str, workdir: str, config: str | None, upto: str) -> None:
    ws = _workspace(workdir, config)
    try:
        space = ws.space(dataset)
        report = run_pipeline(space)
    except SliceLensError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(report.summary())
    _ = upto  # the pipeline is stage-cached, so running everything is free on re-entry


@main.command()
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8400, show_default=True)
def serve(workdir: str, config: str | None, host: str, port: int) -> None:
    """Serve the REST API over the workspace."""
    import uvicorn

    from .api import create_app

    ws = Workspace(workdir, EngineConfig.from_file(config) if config else EngineConfig(),
                   eager_jobs=False)
    uvicorn.run(create_app(ws), host=host, port=port)


@main.command()
@click.argument("dataset")
@click.option("--ids", required=True, help="comma-separated slice ids")
@click.option("--out", required=True, type=click.Path())
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def export(dataset: str, ids: str, out: str, workdir: str, config: str | None) -> None:
    """Export slices (records, crops, transcripts) to a zip archive."""
    ws = _workspace(workdir, config)
    space = ws.space(dataset)
    report = export_slices(space, [i.strip() for i in ids.split(",") if i.strip()], out)
    click.echo(f"exported {len(report.exported)} slices to {report.path}")
    if report.warning:
        click.echo(f"warning: {report.warning}", err=True)


@main.command()
@click.argument("dataset")
@click.option("--pool-manifest", required=True, type=click.Path(exists=True),
              help="manifest of the training pool (for ids and images)")
@click.option("--method", type=click.Choice(["embedding", "text_score"]), default="embedding",
              show_default=True)
@click.option("--k-factor", default=3, show_default=True)
@click.option("--target-size", required=True, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--workdir", default="workspace", show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def curate_cmd(dataset: str, pool_manifest: str, method: str, k_factor: int,
               target_size: int, out: str, workdir: str, config: str | None) -> None:
    """Build a re-weighted fine-tuning image list from the ready slices."""
    from PIL import Image

    from .embedding import EmbeddingCache, PatchEmbedder
    from .manifest import load_manifest

    ws = _workspace(workdir, config)
    space = ws.space(dataset)
    pool = load_manifest(pool_manifest)
    pool_ids = sorted(pool.image_sizes)

    slices = [s for s in space.store.list() if s.status in ("ready", "edited")]
    if not slices:
        click.echo("error: no ready slices to curate from", err=True)
        sys.exit(1)
    members = {s.id: space.table.submatrix(s.member_ids) for s in slices}
    scenes = {s.id: s.explanation.scene for s in slices}

    pool_vectors = None
    load_image = None
    if method == "embedding":
        embedder = PatchEmbedder(pool, space.suite.image_encoder,
                                 EmbeddingCache(space.dir / "cache" / "pool.jsonl"))
        rows = []
        for image_id in pool_ids:
            w, h = pool.image_size(image_id)
            from .detections import BBox

            vec = embedder.encode_patch(image_id, BBox(0, 0, w, h))
            rows.append(np.concatenate([vec, vec]))  # match context-aware width
        pool_vectors = np.stack(rows)
    else:
        load_image = lambda image_id: Image.open(pool.image_dir / image_id).convert("RGB")

    plan = curate(members, scenes, pool_ids, pool_vectors, load_image,
                  space.suite.scorer, method, target_size, k_factor)
    from .curation import build_reweighted_set

    images = build_reweighted_set(plan, target_size)
    write_curated_manifest(plan, images, name=f"{dataset}-curated",
                           image_dir=pool.image_dir, path=out)
    click.echo(f"curated {len(images)} images ({method}) -> {out}")


main.add_command(curate_cmd, name="curate")


@main.command()
@click.argument("dataset")
@click.option("--workdir", default="workspace", show_default=True)
def stats(dataset: str, workdir: str) -> None:
    """Print detector-level counts and slice summary."""
    from .detections import evaluate

    ws = Workspace(workdir)
    space = ws.space(dataset)
    summary = evaluate(list(space.dataset.detections))
    doc = {
        "dataset": dataset,
        "tp": summary.tp_count,
        "fp": summary.fp_count,
        "fn": summary.fn_count,
        "precision": summary.precision,
        "recall": summary.recall,
        "map": summary.map,
        "slices": len([s for s in space.store.list() if s.provenance == "auto"]),
    }
    click.echo(json.dumps(doc, indent=2))


if __name__ == "__main__":
    main()
