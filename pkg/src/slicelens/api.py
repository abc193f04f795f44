"""REST service over a workspace: slice browsing, density, querying, export.

Every mutation validates fully before touching the store, so a failed
request leaves the persisted slice unchanged. Response shapes are pydantic
models, which means every payload is schema-checked on the way out.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from .errors import ContractError, SliceLensError, StateError
from .export import export_slices
from .slices import Slice
from .workspace import Workspace


class DatasetInfo(BaseModel):
    name: str
    active: bool
    detections: Optional[int] = None


class ExplanationModel(BaseModel):
    scene: str = ""
    fp_cause: str = ""
    fn_cause: str = ""


class SliceModel(BaseModel):
    id: str
    member_ids: list[str]
    assigned_tp_ids: list[str]
    size: int
    precision: Optional[float]
    recall: Optional[float]
    keywords: list[str]
    explanation: ExplanationModel
    provenance: str
    status: str
    representative_member: Optional[str] = None


class SlicePatch(BaseModel):
    explanation: Optional[dict] = None
    keywords: Optional[list[str]] = None
    member_ids: Optional[list[str]] = None


class BrushRect(BaseModel):
    x0: float
    y0: float
    x1: float
    y1: float


class SliceCreate(BaseModel):
    rect: Optional[BrushRect] = None
    query: Optional[str] = None
    threshold: float = 0.5


class QueryRequest(BaseModel):
    query: str
    threshold: float = 0.5


class QueryHit(BaseModel):
    detection_id: str
    similarity: float


class QueryResponse(BaseModel):
    query: str
    threshold: float
    hits: list[QueryHit]


class RefineRequest(BaseModel):
    query: str
    threshold: float = 0.5
    action: str = "preview"  # preview | replace | save_as_new


class ProjectionPointModel(BaseModel):
    detection_id: str
    coords: list[float]
    kind: str
    cluster_label: Optional[int]


class DensityModel(BaseModel):
    resolution: int
    bounds: list[float]
    noise_counts: list[list[int]]
    nonnoise_counts: list[list[int]]
    total: int


class ExportRequest(BaseModel):
    slice_ids: list[str]
    path: str


class ExportResponse(BaseModel):
    path: str
    exported: list[str]
    skipped: list[str]
    warning: str = ""


class StatusResponse(BaseModel):
    ok: bool = True
    detail: str = ""


def _slice_model(space, s: Slice, with_representative: bool = False) -> SliceModel:
    rep = None
    if with_representative:
        try:
            rep = space.representative_member(s.id)
        except (SliceLensError, KeyError):
            rep = None
    return SliceModel(
        id=s.id,
        member_ids=list(s.member_ids),
        assigned_tp_ids=list(s.assigned_tp_ids),
        size=s.size,
        precision=s.precision,
        recall=s.recall,
        keywords=list(s.keywords),
        explanation=ExplanationModel(**s.explanation.as_dict()),
        provenance=s.provenance,
        status=s.status,
        representative_member=rep,
    )


def create_app(workspace: Workspace) -> FastAPI:
    app = FastAPI(title="slicelens", version="0.1.0")

    def active_space():
        try:
            return workspace.space()
        except KeyError:
            raise HTTPException(status_code=409, detail="no active dataset")

    @app.exception_handler(ContractError)
    async def _contract(_, exc: ContractError):
        raise HTTPException(status_code=400, detail=str(exc))

    @app.exception_handler(StateError)
    async def _state(_, exc: StateError):
        raise HTTPException(status_code=409, detail=str(exc))

    @app.get("/datasets", response_model=list[DatasetInfo])
    def list_datasets():
        active = workspace.active_name
        out = []
        for name in workspace.dataset_names():
            info = DatasetInfo(name=name, active=name == active)
            try:
                info.detections = len(workspace.space(name).dataset.detections)
            except SliceLensError:
                pass
            out.append(info)
        return out

    @app.post("/datasets/{name}/activate", response_model=StatusResponse)
    def activate(name: str):
        try:
            workspace.activate(name)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown dataset {name!r}")
        return StatusResponse(detail=f"active dataset: {name}")

    @app.get("/slices", response_model=list[SliceModel])
    def list_slices(sort: Optional[str] = Query(default=None),
                    filter: Optional[str] = Query(default=None)):
        space = active_space()
        if sort is not None and sort not in ("size", "precision", "recall"):
            raise HTTPException(status_code=400, detail=f"invalid sort key {sort!r}")
        return [_slice_model(space, s) for s in space.sorted_slices(sort, filter)]

    @app.get("/slices/{slice_id}", response_model=SliceModel)
    def get_slice(slice_id: str):
        space = active_space()
        s = space.store.get(slice_id)
        if s is None:
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        return _slice_model(space, s, with_representative=True)

    @app.patch("/slices/{slice_id}", response_model=SliceModel)
    def patch_slice(slice_id: str, patch: SlicePatch):
        space = active_space()
        try:
            s = space.patch_slice(
                slice_id,
                explanation=patch.explanation,
                keywords=patch.keywords,
                member_ids=patch.member_ids,
            )
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        return _slice_model(space, s)

    @app.delete("/slices/{slice_id}", response_model=StatusResponse)
    def delete_slice(slice_id: str):
        space = active_space()
        if not space.delete_slice(slice_id):
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        return StatusResponse(detail=f"deleted {slice_id}")

    @app.post("/slices/{slice_id}/refresh", response_model=SliceModel)
    def refresh_slice(slice_id: str):
        space = active_space()
        try:
            s = space.refresh_slice(slice_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        return _slice_model(space, space.store.get(slice_id) or s)

    @app.post("/slices", response_model=SliceModel, status_code=201)
    def create_slice(body: SliceCreate):
        space = active_space()
        if (body.rect is None) == (body.query is None):
            raise HTTPException(status_code=400,
                                detail="provide exactly one of 'rect' or 'query'")
        if body.rect is not None:
            members = space.brush((body.rect.x0, body.rect.y0, body.rect.x1, body.rect.y1))
            provenance = "brush"
        else:
            members = space.query(body.query, body.threshold).ids
            provenance = "query"
        if not members:
            raise HTTPException(status_code=400, detail="selection matched no failures")
        s = space.create_hypothetical_slice(members, provenance)
        return _slice_model(space, space.store.get(s.id) or s)

    @app.post("/slices/{slice_id}/refine", response_model=QueryResponse | SliceModel)
    def refine_slice(slice_id: str, body: RefineRequest):
        space = active_space()
        try:
            preview = space.refine_preview(slice_id, body.query, body.threshold)
            if body.action == "preview":
                return QueryResponse(query=body.query, threshold=body.threshold,
                                     hits=[QueryHit(detection_id=i, similarity=1.0) for i in preview])
            if not preview:
                raise HTTPException(status_code=400, detail="refinement matched no members")
            if body.action == "replace":
                s = space.refine_replace(slice_id, preview)
            elif body.action == "save_as_new":
                s = space.refine_save_as_new(slice_id, preview)
            else:
                raise HTTPException(status_code=400, detail=f"unknown action {body.action!r}")
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown slice {slice_id!r}")
        return _slice_model(space, space.store.get(s.id) or s)

    @app.get("/projection2d", response_model=list[ProjectionPointModel])
    def projection2d():
        space = active_space()
        proj = space.projection2d()
        return [
            ProjectionPointModel(
                detection_id=proj["ids"][i],
                coords=[float(v) for v in proj["coords"][i]],
                kind=proj["kinds"][i],
                cluster_label=proj["labels"][i],
            )
            for i in range(len(proj["ids"]))
        ]

    @app.get("/density", response_model=DensityModel)
    def density(resolution: int = Query(default=64, ge=2)):
        space = active_space()
        grid = space.density(resolution)
        return DensityModel(
            resolution=grid.resolution,
            bounds=list(grid.bounds),
            noise_counts=grid.noise_counts.tolist(),
            nonnoise_counts=grid.nonnoise_counts.tolist(),
            total=grid.total,
        )

    @app.post("/query", response_model=QueryResponse)
    def run_query(body: QueryRequest):
        space = active_space()
        result = space.query(body.query, body.threshold)
        return QueryResponse(
            query=result.query_text,
            threshold=result.threshold,
            hits=[QueryHit(detection_id=i, similarity=s) for i, s in result.hits],
        )

    @app.get("/detections/{detection_id}/crop")
    def crop(detection_id: str, region: str = Query(default="full")):
        space = active_space()
        try:
            image = space.crop(detection_id, region)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown detection {detection_id!r}")
        except ContractError as exc:
            status = 404 if "intersection" in str(exc) else 400
            raise HTTPException(status_code=status, detail=str(exc))
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/export", response_model=ExportResponse)
    def export(body: ExportRequest):
        space = active_space()
        try:
            report = export_slices(space, body.slice_ids, Path(body.path))
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=f"unknown slice {exc.args[0]!r}")
        return ExportResponse(
            path=str(report.path),
            exported=report.exported,
            skipped=report.skipped,
            warning=report.warning,
        )

    @app.post("/reset", response_model=StatusResponse)
    def reset():
        """Discard unsaved hypothetical slices (pending brush/query slices)."""
        space = active_space()
        dropped = 0
        for s in space.store.list():
            if s.provenance in ("brush", "query") and s.status == "pending":
                space.store.delete(s.id)
                dropped += 1
        return StatusResponse(detail=f"discarded {dropped} pending hypothetical slices")

    return app
