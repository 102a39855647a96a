"""FastAPI app wrapping the service handlers.

The working directory for artifact paths comes from the TSA_WORKDIR
environment variable (default: current directory). Errors map to HTTP
status codes: config/parse problems 422, numeric failures 500 with a typed
body, missing files 404.
"""

from __future__ import annotations

import os
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from tsa.errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    ParseError,
    TsaError,
)
from tsa.service import handlers
from tsa.service import schemas as s


def create_app(workdir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="tsa", description="Structural alignment service for graph "
                                           "test-time adaptation")
    app.state.workdir = Path(workdir or os.environ.get("TSA_WORKDIR", ".")).resolve()
    app.state.workdir.mkdir(parents=True, exist_ok=True)

    def wd() -> Path:
        return app.state.workdir

    @app.exception_handler(TsaError)
    async def tsa_error_handler(request: Request, exc: TsaError):
        if isinstance(exc, (ConfigError, ParseError)):
            status = 422
        elif isinstance(exc, NumericError):
            status = 500
        elif isinstance(exc, CheckpointError):
            status = 404
        else:
            status = 400
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.exception_handler(FileNotFoundError)
    async def missing_file_handler(request: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=404,
                            content={"error": "FileNotFoundError", "detail": str(exc)})

    @app.get("/health", response_model=s.HealthResponse)
    def health():
        return handlers.handle_health()

    @app.post("/generate", response_model=s.GenerateResponse)
    def generate(req: s.GenerateRequest):
        return handlers.handle_generate(req, wd())

    @app.post("/pretrain", response_model=s.PretrainResponse)
    def pretrain(req: s.PretrainRequest):
        return handlers.handle_pretrain(req, wd())

    @app.post("/adapt", response_model=s.AdaptResponse)
    def adapt(req: s.AdaptRequest):
        return handlers.handle_adapt(req, wd())

    @app.post("/evaluate", response_model=s.EvaluateResponse)
    def evaluate(req: s.EvaluateRequest):
        return handlers.handle_evaluate(req, wd())

    @app.post("/diagnose", response_model=s.DiagnoseResponse)
    def diagnose(req: s.DiagnoseRequest):
        return handlers.handle_diagnose(req, wd())

    @app.post("/experiment", response_model=s.ExperimentResponse)
    def experiment(req: s.ExperimentRequest):
        return handlers.handle_experiment(req, wd())

    return app
