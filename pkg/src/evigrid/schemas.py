"""Request and response bodies for the HTTP service.

Paths in requests are interpreted on the host running the service; the
command-line client and the service normally share a filesystem.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class SimulateRequest(BaseModel):
    """Generate one database and write its tables to ``out_dir``."""

    config: dict
    out_dir: str


class SimulateResponse(BaseModel):
    paths: dict[str, str]
    n_persons: int


class RunRequest(BaseModel):
    """Run the full estimation grid described by a parsed run config."""

    config: dict
    out_dir: str
    workers: int = Field(default=1, ge=1)


class RunResponse(BaseModel):
    paths: dict[str, str]
    n_records: int
    n_suppressed: int
    n_error_models: int


class ReportRequest(BaseModel):
    """Emit the report files for a finished result store."""

    store_dir: str
    out_dir: str | None = None
    levels: list[float] | None = None


class ReportResponse(BaseModel):
    paths: dict[str, str]


class LooCvRequest(BaseModel):
    """Compute leave-one-out coverage curves for a finished result store."""

    store_dir: str
    levels: list[float] | None = None


class CoverageRow(BaseModel):
    database: str
    analysis: str
    target: int
    comparator: int
    true_hr: float
    level: float
    n: int
    covered: int
    coverage: float


class LooCvResponse(BaseModel):
    path: str
    rows: list[CoverageRow]


class HealthResponse(BaseModel):
    status: str
