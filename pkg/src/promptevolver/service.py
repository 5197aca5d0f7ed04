"""HTTP service exposing runs, resumption and the analysis functions.

Runs execute on a small worker pool; their state lives in the run store, so
``GET /runs/{id}`` reflects progress generation by generation and survives
service restarts.
"""

from __future__ import annotations

import base64
import binascii
import logging
import os
import tempfile
import threading
from contextlib import asynccontextmanager
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from . import __version__
from .analysis import ComparisonPair, binomial_one_sided, emit_report, win_counts
from .api import baseline_config, result_summary
from .backends import build_backends
from .core import TargetImage, validate_config
from .engine import Evolution
from .errors import BackendError, ConfigError, DomainError, EngineError, PromptEvolverError, StorageFailure
from .records import RunResult
from .runstore import RunHandle, RunStatus, create_run, load_generations, load_run, resume_run
from .schemas import (
    BinomialRequest,
    BinomialResponse,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunResultResponse,
    RunStatusResponse,
    WinsRequest,
    WinsResponse,
)

log = logging.getLogger(__name__)

_STATUS_CODES = ((ConfigError, 422), (DomainError, 422), (StorageFailure, 409), (BackendError, 502), (EngineError, 502))


def _http_status(exc: PromptEvolverError) -> int:
    for cls, code in _STATUS_CODES:
        if isinstance(exc, cls):
            return code
    return 500


def create_app(root: str | Path | None = None, workers: int = 2) -> FastAPI:
    root = Path(root or os.environ.get("PE_STORE_ROOT", "runs"))
    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="run")

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        pool.shutdown(wait=False, cancel_futures=True)

    app = FastAPI(title="promptevolver", version=__version__, lifespan=lifespan)
    errors: dict[str, str] = {}
    errors_lock = threading.Lock()
    app.state.root = root
    app.state.pool = pool

    @app.exception_handler(PromptEvolverError)
    async def _domain_error(request: Request, exc: PromptEvolverError) -> JSONResponse:
        return JSONResponse(status_code=_http_status(exc), content={"error": type(exc).__name__, "detail": str(exc)})

    def _execute(fn, run_id: str):
        try:
            return fn()
        except Exception as exc:  # recorded for GET /runs/{id}; manifest already says aborted
            log.exception("run %s failed", run_id)
            with errors_lock:
                errors[run_id] = f"{type(exc).__name__}: {exc}"
            raise

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/runs", status_code=202, response_model=RunStatusResponse)
    def submit_run(req: RunRequest):
        try:
            data = base64.b64decode(req.image_b64, validate=True)
            target = TargetImage(data, req.source_id)
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"image_b64: {exc}") from exc
        cfg = baseline_config(req.config) if req.mode == "baseline" else validate_config(req.config)
        backends = build_backends(cfg, target)
        manifest = create_run(cfg, target, root, req.run_id, mode=req.mode)

        def job() -> RunResult:
            with RunHandle(manifest) as handle:
                return Evolution(target, cfg, backends, handle).run()

        future = pool.submit(_execute, job, manifest.run_id)
        if req.wait:
            try:
                future.result()
            except PromptEvolverError:
                pass
        return _status(manifest.run_id)

    def _status(run_id: str) -> RunStatusResponse:
        manifest = load_run(root, run_id)
        records = load_generations(manifest.run_dir)
        best = RunResult.from_records(records).best_individual if records else None
        with errors_lock:
            error = errors.get(run_id)
        return RunStatusResponse(
            run_id=run_id,
            mode=manifest.mode,
            status=manifest.status.value,
            generations_completed=max(0, len(records) - 1) if records else 0,
            generations_total=manifest.config.generations,
            best_prompt=best.prompt.text if best else None,
            best_fitness=best.mean_score if best else None,
            error=error,
        )

    @app.get("/runs", response_model=list[RunStatusResponse])
    def list_runs():
        if not root.is_dir():
            return []
        return [_status(p.name) for p in sorted(root.iterdir()) if (p / "manifest.json").is_file()]

    @app.get("/runs/{run_id}", response_model=RunStatusResponse)
    def get_run(run_id: str):
        return _status(run_id)

    @app.get("/runs/{run_id}/result", response_model=RunResultResponse)
    def get_result(run_id: str):
        manifest = load_run(root, run_id)
        if manifest.status is not RunStatus.COMPLETED:
            raise HTTPException(status_code=409, detail=f"run {run_id} is {manifest.status.value}")
        return result_summary(manifest, RunResult.from_records(load_generations(manifest.run_dir)))

    @app.post("/runs/{run_id}/resume", status_code=202, response_model=RunStatusResponse)
    def resume(run_id: str, wait: bool = False):
        load_run(root, run_id)
        future = pool.submit(_execute, lambda: resume_run(root, run_id), run_id)
        if wait:
            try:
                future.result()
            except PromptEvolverError:
                pass
        return _status(run_id)

    @app.post("/analysis/binomial", response_model=BinomialResponse)
    def binomial(req: BinomialRequest):
        return BinomialResponse(k=req.k, n=req.n, p_value=binomial_one_sided(req.k, req.n))

    @app.post("/analysis/wins", response_model=WinsResponse)
    def wins(req: WinsRequest):
        s = win_counts(ComparisonPair(**p.model_dump()) for p in req.pairs)
        return WinsResponse(wins_a=s.wins_a, wins_b=s.wins_b, ties=s.ties, total=s.total)

    @app.post("/reports", response_model=ReportResponse)
    def report(req: ReportRequest):
        with tempfile.TemporaryDirectory() as tmp:
            paths = emit_report(req.document, req.format, tmp)
            return ReportResponse(files={p.name: p.read_text(encoding="utf-8") for p in paths})

    return app
