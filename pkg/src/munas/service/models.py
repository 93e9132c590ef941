"""Pydantic request/response models of the engine service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    height: int
    width: int
    channels: int
    num_classes: int = 10


class AnalyzeRequest(BaseModel):
    architecture: str = Field(description="canonical munas-arch/1 document text")
    input: InputModel
    add_aliasing: bool = True
    node_cap: int = 64


class ProfileModel(BaseModel):
    peak_memory_bytes: int
    model_size_bytes: int
    macs: int


class ScheduleStepModel(BaseModel):
    step: int
    node_id: int
    kind: str
    output_shape: list[int]
    allocated_bytes: int
    freed_bytes: int
    resident_bytes: int
    params_bytes: int
    macs: int


class LayerRowModel(BaseModel):
    node_id: int
    kind: str
    output_shape: list[int]
    params_bytes: int
    macs: int


class AnalyzeResponse(BaseModel):
    profile: ProfileModel
    schedule: list[ScheduleStepModel]
    layers: list[LayerRowModel]


class PointModel(BaseModel):
    id: int
    error: float
    peak_memory_bytes: int
    model_size_bytes: int
    macs: int


class ParetoRequest(BaseModel):
    points: list[PointModel]


class ParetoResponse(BaseModel):
    front: list[PointModel]


class SearchJobRequest(BaseModel):
    config: dict
    resume_from: str | None = None
    parallel: int | None = None
    seed: int | None = None


class JobInfo(BaseModel):
    job_id: str
    status: str  # running | completed | interrupted | failed_config | failed_evaluator
    completed_rounds: int = 0
    total_rounds: int = 0
    population_size: int = 0
    archive_size: int = 0
    evaluations: int = 0
    output_dir: str = ""
    error: str | None = None


class HealthResponse(BaseModel):
    status: str
    version: str
