"""FastAPI service exposing analysis, Pareto filtering, and search jobs."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..arch import InputSpec, deserialize, validate_structure
from ..config import engine_config_from_obj
from ..errors import GraphTooLarge, MunasError, ParseError, ValidationError
from ..graph import lower
from ..objectives import ObjectiveVector, ParetoArchive
from ..resources import (
    build_buffer_plan,
    model_size,
    mac_count,
    node_mac_count,
    node_model_size,
    optimal_peak_memory,
    replay_schedule,
)
from .jobs import JobManager
from .models import (
    AnalyzeRequest,
    AnalyzeResponse,
    HealthResponse,
    JobInfo,
    LayerRowModel,
    ParetoRequest,
    ParetoResponse,
    PointModel,
    ProfileModel,
    ScheduleStepModel,
    SearchJobRequest,
)

app = FastAPI(title="munas engine", version=__version__)
jobs = JobManager()


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/analyze", response_model=AnalyzeResponse)
def analyze(req: AnalyzeRequest) -> AnalyzeResponse:
    try:
        template = deserialize(req.architecture)
    except (ParseError, ValidationError) as exc:
        raise HTTPException(status_code=400, detail=f"architecture document: {exc}")
    input_spec = InputSpec(
        height=req.input.height, width=req.input.width,
        channels=req.input.channels, num_classes=req.input.num_classes)
    check = validate_structure(template, input_spec)
    if not check.ok:
        raise HTTPException(status_code=400, detail="; ".join(check.violations))
    graph = lower(template, input_spec)
    try:
        schedule = optimal_peak_memory(graph, req.add_aliasing, req.node_cap)
    except GraphTooLarge as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    plan = build_buffer_plan(graph, req.add_aliasing)
    _, _, rows = replay_schedule(graph, schedule.order, req.add_aliasing, plan)
    steps = []
    for row in rows:
        node = graph.node(row.node_id)
        steps.append(ScheduleStepModel(
            step=row.step,
            node_id=row.node_id,
            kind=node.kind,
            output_shape=list(node.output_shape),
            allocated_bytes=row.allocated,
            freed_bytes=row.freed,
            resident_bytes=row.resident,
            params_bytes=node_model_size(node),
            macs=node_mac_count(node),
        ))
    layers = [
        LayerRowModel(
            node_id=node.id,
            kind=node.kind,
            output_shape=list(node.output_shape),
            params_bytes=node_model_size(node),
            macs=node_mac_count(node),
        )
        for node in graph.nodes
    ]
    return AnalyzeResponse(
        profile=ProfileModel(
            peak_memory_bytes=schedule.peak_bytes,
            model_size_bytes=model_size(graph),
            macs=mac_count(graph),
        ),
        schedule=steps,
        layers=layers,
    )


@app.post("/pareto", response_model=ParetoResponse)
def pareto(req: ParetoRequest) -> ParetoResponse:
    archive = ParetoArchive()
    by_id = {}
    for point in req.points:
        vec = ObjectiveVector(point.error, point.peak_memory_bytes,
                              point.model_size_bytes, point.macs)
        by_id[point.id] = point
        archive.insert(point.id, vec)
    front = [by_id[cid] for cid, _ in sorted(archive.members())]
    return ParetoResponse(front=front)


def _job_info(job) -> JobInfo:
    return JobInfo(**job.info())


@app.post("/search/jobs", response_model=JobInfo)
def create_job(req: SearchJobRequest) -> JobInfo:
    try:
        cfg = engine_config_from_obj(req.config)
    except (ValidationError, ParseError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    if req.parallel is not None:
        cfg.search.max_parallel_evaluations = req.parallel
    if req.seed is not None:
        cfg.search.seed = req.seed
    job = jobs.create(cfg, req.resume_from)
    return _job_info(job)


@app.get("/search/jobs/{job_id}", response_model=JobInfo)
def job_status(job_id: str) -> JobInfo:
    job = jobs.get(job_id)
    if job is None:
        raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
    return _job_info(job)


@app.post("/search/jobs/{job_id}/stop", response_model=JobInfo)
def stop_job(job_id: str) -> JobInfo:
    job = jobs.get(job_id)
    if job is None:
        raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
    job.stop()
    return _job_info(job)


@app.get("/search/jobs", response_model=list[JobInfo])
def list_jobs() -> list[JobInfo]:
    return [_job_info(job) for job in jobs.all_jobs()]
