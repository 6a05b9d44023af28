"""Report emission: flat data files behind the standard evidence plots.

Four delimited-text reports are derived from a result store:

``scatter.csv``
    One row per estimate and representation. Nominal rows carry the Cox
    point estimate and its standard error; calibrated rows carry the
    calibrated-interval midpoint (log scale) and the implied standard error
    (log ub - log lb) / (2 * 1.959964), present only when the calibrated
    interval is two-sided. ``significant`` flags intervals excluding a
    hazard ratio of 1 at alpha 0.05.

``forest.csv``
    One row per comparison and outcome: hazard ratio, nominal and
    calibrated interval bounds, and the four subject/event counts.

``calibration_scatter.csv``
    Control estimates per error-model context with their true hazard
    ratios and both significance flags (before/after calibration).

``coverage_curves.csv``
    Leave-one-out coverage of the control estimates per context, by true
    hazard ratio stratum and requested interval level.
"""

from __future__ import annotations

import os

import numpy as np
import pandas as pd

from .calibration import ControlEstimate, loo_cross_validate
from .cox import Z_95
from .evidence import two_sided_calibrated_mask
from .exceptions import ConfigurationError

DEFAULT_LEVELS = (0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)

REPORT_FILES = {
    "scatter": "scatter.csv",
    "forest": "forest.csv",
    "calibration": "calibration_scatter.csv",
    "coverage": "coverage_curves.csv",
}

_KEY = ["database", "analysis", "target", "comparator", "outcome"]

SCATTER_COLUMNS = _KEY + ["is_control", "true_hr", "kind", "log_hr", "se", "significant"]
FOREST_COLUMNS = [
    "outcome", "database", "analysis", "target", "comparator",
    "hr", "ci_lb", "ci_ub", "cal_ci_lb", "cal_ci_ub",
    "n_target", "n_comparator", "events_target", "events_comparator",
]
CALIBRATION_COLUMNS = _KEY + [
    "true_hr", "log_hr", "se",
    "significant_nominal", "significant_calibrated",
]
COVERAGE_COLUMNS = [
    "database", "analysis", "target", "comparator",
    "true_hr", "level", "n", "covered", "coverage",
]


def _open_rows(store):
    est = store.estimates
    return est[est["suppressed_reason"].isna()].copy()


def _excludes_one(lb, ub):
    return ((lb > 1.0) | (ub < 1.0)).astype(np.int64)


def scatter_table(store) -> pd.DataFrame:
    """Estimate-vs-SE scatter data, nominal and calibrated rows stacked."""
    rows = _open_rows(store)
    nominal = rows[_KEY + ["is_control", "true_hr"]].copy()
    nominal["kind"] = "nominal"
    nominal["log_hr"] = rows["log_hr"].astype(float)
    nominal["se"] = rows["se"].astype(float)
    nominal["significant"] = _excludes_one(rows["ci_lb"], rows["ci_ub"])

    two_sided = rows[two_sided_calibrated_mask(rows)]
    calibrated = two_sided[_KEY + ["is_control", "true_hr"]].copy()
    calibrated["kind"] = "calibrated"
    log_lb = np.log(two_sided["cal_ci_lb"].astype(float))
    log_ub = np.log(two_sided["cal_ci_ub"].astype(float))
    calibrated["log_hr"] = (log_lb + log_ub) / 2.0
    calibrated["se"] = (log_ub - log_lb) / (2.0 * Z_95)
    calibrated["significant"] = _excludes_one(
        two_sided["cal_ci_lb"], two_sided["cal_ci_ub"]
    )

    table = pd.concat([nominal, calibrated], ignore_index=True)[SCATTER_COLUMNS]
    return table.sort_values(_KEY + ["kind"], kind="stable").reset_index(drop=True)


def forest_table(store) -> pd.DataFrame:
    """Per-outcome comparison rows with intervals and counts."""
    rows = _open_rows(store)
    table = rows[FOREST_COLUMNS].copy()
    return table.sort_values(
        ["outcome", "database", "analysis", "target", "comparator"], kind="stable"
    ).reset_index(drop=True)


def calibration_scatter_table(store) -> pd.DataFrame:
    """Control estimates per context with before/after significance flags."""
    rows = _open_rows(store)
    controls = rows[rows["is_control"] == 1].copy()
    table = controls[_KEY + ["true_hr", "log_hr", "se"]].copy()
    table["significant_nominal"] = _excludes_one(controls["ci_lb"], controls["ci_ub"])
    cal_lb = controls["cal_ci_lb"].astype(float)
    cal_ub = controls["cal_ci_ub"].astype(float)
    has_cal = np.isfinite(cal_lb) & np.isfinite(cal_ub)
    significant_cal = np.where(
        has_cal, _excludes_one(cal_lb.fillna(1.0), cal_ub.fillna(1.0)), -1
    )
    # -1 marks controls without a calibrated interval
    table["significant_calibrated"] = significant_cal.astype(np.int64)
    return table.sort_values(_KEY, kind="stable").reset_index(drop=True)


def _context_controls(rows, parent_of):
    controls = []
    for r in rows.itertuples(index=False):
        parent = parent_of.get(int(r.outcome))
        if parent is None:
            continue
        controls.append(
            ControlEstimate(
                log_hr_hat=float(r.log_hr),
                se=float(r.se),
                true_log_hr=float(np.log(r.true_hr)),
                parent_negative=parent,
            )
        )
    return controls


def loo_coverage_table(store, levels=DEFAULT_LEVELS) -> pd.DataFrame:
    """Leave-one-out coverage per error-model context.

    For every (database, analysis, target, comparator) with enough control
    estimates, refits the systematic error model with each control family
    (one negative and its derived positives) held out and tabulates
    coverage of the held-out truths by stratum and level. Contexts that
    cannot be cross-validated (fewer than two control families) are
    skipped.
    """
    roster = store.roster
    parent_of = {}
    for r in roster.itertuples(index=False):
        oid = int(r.outcome_id)
        parent_of[oid] = oid if r.kind == "negative" else int(r.parent)
    rows = _open_rows(store)
    controls = rows[rows["is_control"] == 1]
    pieces = []
    for key, group in controls.groupby(["database", "analysis", "target", "comparator"]):
        estimates = _context_controls(group, parent_of)
        try:
            result = loo_cross_validate(estimates, levels=levels)
        except ConfigurationError:
            continue
        table = result.table.copy()
        table["database"], table["analysis"], table["target"], table["comparator"] = key
        pieces.append(table[COVERAGE_COLUMNS])
    if pieces:
        merged = pd.concat(pieces, ignore_index=True)
    else:
        merged = pd.DataFrame(columns=COVERAGE_COLUMNS)
    return merged.sort_values(
        ["database", "analysis", "target", "comparator", "true_hr", "level"],
        kind="stable",
    ).reset_index(drop=True)


def emit_reports(store, out_dir, levels=DEFAULT_LEVELS) -> dict:
    """Write the four report files into ``out_dir``; returns name -> path.

    An empty store produces header-only files.
    """
    os.makedirs(out_dir, exist_ok=True)
    tables = {
        "scatter": scatter_table(store),
        "forest": forest_table(store),
        "calibration": calibration_scatter_table(store),
        "coverage": loo_coverage_table(store, levels=levels),
    }
    paths = {}
    for name, table in tables.items():
        path = os.path.join(out_dir, REPORT_FILES[name])
        table.to_csv(path, index=False, lineterminator="\n")
        paths[name] = path
    return paths
