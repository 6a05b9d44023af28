"""Comparative cohort estimation at grid scale, with empirical calibration.

The top-level names cover the common path: simulate or load a database,
run the estimation grid, read the result store back, and emit reports.
"""

from .calibration import (
    SystematicErrorModel,
    calibrate_ci,
    calibrated_p_value,
    fit_error_model,
    loo_cross_validate,
)
from .config import RunConfig, load_run_config, run_config_from_dict
from .evidence import compute_i2, i2_summary, transitivity_audit
from .grid import run_grid
from .reports import emit_reports, loo_coverage_table
from .simulate import SimConfig, generate_database
from .store import ResultStore, read_store

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "ResultStore",
    "SimConfig",
    "SystematicErrorModel",
    "calibrate_ci",
    "calibrated_p_value",
    "compute_i2",
    "emit_reports",
    "fit_error_model",
    "generate_database",
    "i2_summary",
    "load_run_config",
    "loo_cross_validate",
    "loo_coverage_table",
    "read_store",
    "run_config_from_dict",
    "run_grid",
    "transitivity_audit",
    "__version__",
]
