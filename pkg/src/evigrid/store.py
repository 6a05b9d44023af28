"""Result store: the versioned estimates table plus its companion files.

One run produces a directory with five delimited-text files. ``estimates_v1.csv``
is the primary table, one row per (database, analysis, target, comparator,
outcome) question, carrying either a complete estimate or a suppression
reason. Companions hold the control roster, fitted error-model parameters,
cohort attrition, and covariate balance for the base cohorts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import ConfigurationError

ESTIMATES_FILE = "estimates_v1.csv"
ROSTER_FILE = "roster.csv"
ERROR_MODELS_FILE = "error_models.csv"
ATTRITION_FILE = "attrition.csv"
BALANCE_FILE = "balance.csv"

KEY_COLUMNS = ["database", "analysis", "target", "comparator", "outcome"]

ESTIMATES_COLUMNS = KEY_COLUMNS + [
    "is_control",
    "true_hr",
    "n_target",
    "n_comparator",
    "events_target",
    "events_comparator",
    "log_hr",
    "se",
    "hr",
    "ci_lb",
    "ci_ub",
    "p",
    "cal_ci_lb",
    "cal_ci_ub",
    "cal_p",
    "max_smd_after",
    "equipoise_share",
    "suppressed_reason",
]

ROSTER_COLUMNS = ["outcome_id", "kind", "true_hr", "parent"]

ERROR_MODEL_COLUMNS = [
    "database", "analysis", "target", "comparator",
    "a", "b", "c", "d", "fitted_on",
]

ATTRITION_COLUMNS = [
    "database", "target", "comparator", "stage", "rule", "target_subjects",
    "comparator_subjects",
]

BALANCE_COLUMNS = [
    "database", "target", "comparator", "covariate_id", "smd_before", "smd_after",
]

_ESTIMATE_FIELDS = ["log_hr", "se", "hr", "ci_lb", "ci_ub", "p"]

_INT_COLUMNS = {
    "target": np.int64, "comparator": np.int64, "outcome": np.int64,
    "is_control": np.int64, "n_target": np.int64, "n_comparator": np.int64,
    "events_target": np.int64, "events_comparator": np.int64,
    "outcome_id": np.int64, "fitted_on": np.int64, "stage": np.int64,
    "target_subjects": np.int64, "comparator_subjects": np.int64,
    "covariate_id": np.int64,
}


def _empty_frame(columns):
    return pd.DataFrame({c: pd.Series(dtype=_INT_COLUMNS.get(c, object)) for c in columns})


def _normalize(frame: pd.DataFrame, columns, sort_by) -> pd.DataFrame:
    if frame is None or len(frame) == 0:
        return _empty_frame(columns)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigurationError(f"missing columns: {missing}")
    out = frame[columns].copy()
    for c, dtype in _INT_COLUMNS.items():
        if c in out.columns:
            out[c] = out[c].astype(dtype)
    if "parent" in out.columns:
        out["parent"] = out["parent"].astype(float)
    if "suppressed_reason" in out.columns:
        # None and NaN must serialize identically, so canonicalize to NaN.
        out["suppressed_reason"] = out["suppressed_reason"].astype(object)
        out.loc[out["suppressed_reason"].isna(), "suppressed_reason"] = np.nan
    return out.sort_values(sort_by, kind="stable").reset_index(drop=True)


@dataclass
class ResultStore:
    """All tables produced by one grid run."""

    estimates: pd.DataFrame = field(default_factory=lambda: _empty_frame(ESTIMATES_COLUMNS))
    roster: pd.DataFrame = field(default_factory=lambda: _empty_frame(ROSTER_COLUMNS))
    error_models: pd.DataFrame = field(default_factory=lambda: _empty_frame(ERROR_MODEL_COLUMNS))
    attrition: pd.DataFrame = field(default_factory=lambda: _empty_frame(ATTRITION_COLUMNS))
    balance: pd.DataFrame = field(default_factory=lambda: _empty_frame(BALANCE_COLUMNS))

    @classmethod
    def from_records(cls, estimates, roster=(), error_models=(), attrition=(), balance=()):
        """Assemble a store from record dicts, normalizing order and dtypes."""
        store = cls(
            estimates=_normalize(pd.DataFrame(list(estimates)), ESTIMATES_COLUMNS, KEY_COLUMNS),
            roster=_normalize(pd.DataFrame(list(roster)), ROSTER_COLUMNS, ["outcome_id"]),
            error_models=_normalize(
                pd.DataFrame(list(error_models)), ERROR_MODEL_COLUMNS,
                ["database", "analysis", "target", "comparator"],
            ),
            attrition=_normalize(
                pd.DataFrame(list(attrition)), ATTRITION_COLUMNS,
                ["database", "target", "comparator", "stage"],
            ),
            balance=_normalize(
                pd.DataFrame(list(balance)), BALANCE_COLUMNS,
                ["database", "target", "comparator", "covariate_id"],
            ),
        )
        store.validate()
        return store

    def validate(self):
        """Check key uniqueness and the estimate-or-suppressed contract."""
        est = self.estimates
        if est.duplicated(KEY_COLUMNS).any():
            raise ConfigurationError("duplicate estimate keys")
        open_rows = est[est.suppressed_reason.isna()]
        for column in _ESTIMATE_FIELDS:
            bad = ~np.isfinite(open_rows[column].astype(float))
            if bad.any():
                raise ConfigurationError(
                    f"unsuppressed record with non-finite {column}"
                )

    def write(self, out_dir: str) -> dict:
        """Write all tables as CSV files; deterministic for identical stores."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        for name, frame in (
            (ESTIMATES_FILE, self.estimates),
            (ROSTER_FILE, self.roster),
            (ERROR_MODELS_FILE, self.error_models),
            (ATTRITION_FILE, self.attrition),
            (BALANCE_FILE, self.balance),
        ):
            path = os.path.join(out_dir, name)
            frame.to_csv(path, index=False, lineterminator="\n")
            paths[name] = path
        return paths


def read_store(store_dir: str) -> ResultStore:
    """Load a store directory written by :meth:`ResultStore.write`."""
    def load(name, columns):
        path = os.path.join(store_dir, name)
        if not os.path.exists(path):
            raise ConfigurationError(f"store file missing: {path}")
        frame = pd.read_csv(path)
        if len(frame) == 0:
            return _empty_frame(columns)
        for c, dtype in _INT_COLUMNS.items():
            if c in frame.columns:
                frame[c] = frame[c].astype(dtype)
        if "suppressed_reason" in frame.columns:
            frame["suppressed_reason"] = frame["suppressed_reason"].astype(object)
        if "parent" in frame.columns:
            frame["parent"] = frame["parent"].astype(float)
        return frame[columns]

    store = ResultStore(
        estimates=load(ESTIMATES_FILE, ESTIMATES_COLUMNS),
        roster=load(ROSTER_FILE, ROSTER_COLUMNS),
        error_models=load(ERROR_MODELS_FILE, ERROR_MODEL_COLUMNS),
        attrition=load(ATTRITION_FILE, ATTRITION_COLUMNS),
        balance=load(BALANCE_FILE, BALANCE_COLUMNS),
    )
    store.validate()
    return store
