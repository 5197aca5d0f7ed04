"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    image_b64: str = Field(description="Target image, base64-encoded PNG or JPEG.")
    mode: Literal["invert", "baseline"] = "invert"
    config: dict[str, Any] = Field(default_factory=dict, description="Configuration document (same keys as the config file).")
    run_id: str | None = None
    source_id: str = ""
    wait: bool = Field(False, description="Block until the run finishes instead of returning immediately.")


class RunStatusResponse(BaseModel):
    run_id: str
    mode: str
    status: str
    generations_completed: int
    generations_total: int
    best_prompt: str | None = None
    best_fitness: float | None = None
    error: str | None = None


class RunResultResponse(BaseModel):
    run_id: str
    run_dir: str
    best_prompt: str
    best_fitness: float
    per_image_scores: list[float]
    generations: int
    prompts_created: int
    total_t2i_images: int
    total_vlm_calls: int
    best_by_generation: list[float]


class BinomialRequest(BaseModel):
    k: int
    n: int


class BinomialResponse(BaseModel):
    k: int
    n: int
    p_value: float


class PairModel(BaseModel):
    image_id: str
    score_a: float
    score_b: float
    metric: str = ""
    dataset: str = ""


class WinsRequest(BaseModel):
    pairs: list[PairModel]


class WinsResponse(BaseModel):
    wins_a: int
    wins_b: int
    ties: int
    total: int


class ReportRequest(BaseModel):
    document: dict[str, Any]
    format: str = "markdown"


class ReportResponse(BaseModel):
    files: dict[str, str]


class ErrorResponse(BaseModel):
    error: str
    detail: str
