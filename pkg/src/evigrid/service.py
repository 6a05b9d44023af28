"""HTTP service exposing the simulate / run / report / loo-cv operations.

Handlers run the work synchronously in-process: the service is a local
orchestration front end over the library, not a job queue. Requests carry
parsed config mappings (the client reads config files), responses carry the
paths of the files written on the service host.
"""

from __future__ import annotations

import os

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .config import run_config_from_dict, sim_config_from_dict
from .data import write_database
from .exceptions import ConfigurationError
from .grid import run_grid
from .reports import DEFAULT_LEVELS, emit_reports, loo_coverage_table
from .schemas import (
    HealthResponse,
    LooCvRequest,
    LooCvResponse,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunResponse,
    SimulateRequest,
    SimulateResponse,
)
from .simulate import generate_database
from .store import read_store

LOO_COVERAGE_FILE = "loo_coverage.csv"


def create_app() -> FastAPI:
    """Build the service application."""
    app = FastAPI(title="evigrid", version="0.1.0")

    @app.exception_handler(ConfigurationError)
    def configuration_error(request: Request, exc: ConfigurationError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    def file_not_found(request: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok")

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(request: SimulateRequest):
        raw = request.config
        if "simulate" in raw:
            # accept a run-config database block verbatim
            raw = raw["simulate"]
        db = generate_database(sim_config_from_dict(raw))
        paths = write_database(db, request.out_dir)
        return SimulateResponse(paths=paths, n_persons=len(db.persons))

    @app.post("/run", response_model=RunResponse)
    def run(request: RunRequest):
        config = run_config_from_dict(request.config)
        store = run_grid(config, workers=request.workers)
        paths = store.write(request.out_dir)
        suppressed = int(store.estimates.suppressed_reason.notna().sum())
        return RunResponse(
            paths=paths,
            n_records=len(store.estimates),
            n_suppressed=suppressed,
            n_error_models=len(store.error_models),
        )

    @app.post("/report", response_model=ReportResponse)
    def report(request: ReportRequest):
        store = read_store(request.store_dir)
        out_dir = request.out_dir or os.path.join(request.store_dir, "reports")
        levels = tuple(request.levels) if request.levels else DEFAULT_LEVELS
        paths = emit_reports(store, out_dir, levels=levels)
        return ReportResponse(paths=paths)

    @app.post("/loo-cv", response_model=LooCvResponse)
    def loo_cv(request: LooCvRequest):
        store = read_store(request.store_dir)
        levels = tuple(request.levels) if request.levels else DEFAULT_LEVELS
        table = loo_coverage_table(store, levels=levels)
        path = os.path.join(request.store_dir, LOO_COVERAGE_FILE)
        table.to_csv(path, index=False, lineterminator="\n")
        rows = [row._asdict() for row in table.itertuples(index=False)]
        return LooCvResponse(path=path, rows=rows)

    return app


app = create_app()
