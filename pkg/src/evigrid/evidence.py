"""Evidence-base diagnostics across the estimate grid: between-database
heterogeneity (I squared) and effect transitivity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .calibration import SystematicErrorModel, calibrate_intervals
from .cox import Z_95
from .exceptions import ConfigurationError

I2_THRESHOLD = 0.25
HISTOGRAM_BINS = 20


def compute_i2(log_hrs, ses):
    """Higgins I squared from independent estimates of one effect.

    Returns NaN when fewer than two estimates are supplied (heterogeneity is
    undefined), 0.0 when the estimates agree exactly.
    """
    y = np.asarray(log_hrs, dtype=float)
    se = np.asarray(ses, dtype=float)
    if y.shape != se.shape:
        raise ConfigurationError("estimates and standard errors must align")
    if y.size < 2:
        return float("nan")
    if np.any(~np.isfinite(y)) or np.any(~np.isfinite(se)) or np.any(se <= 0):
        raise ConfigurationError("estimates must be finite with positive se")
    w = 1.0 / se**2
    ybar = float(np.sum(w * y) / np.sum(w))
    q = float(np.sum(w * (y - ybar) ** 2))
    if q == 0.0:
        return 0.0
    return max(0.0, (q - (y.size - 1)) / q)


@dataclass(frozen=True)
class I2Summary:
    """Distribution of I squared over cross-database triplets."""

    values: pd.DataFrame
    histogram_counts: np.ndarray
    bin_edges: np.ndarray
    share_below_threshold: float
    n_triplets: int


def two_sided_calibrated_mask(frame, margin: float = 19.5):
    """Rows whose calibrated interval is two-sided: both bounds exist, are
    ordered, and sit inside the root-search bracket rather than on its edge
    (a bound at the edge means that side could not be rejected at all, so
    no midpoint or implied SE can be derived from the interval)."""
    log_hr = frame["log_hr"].astype(float)
    lb = frame["cal_ci_lb"].astype(float)
    ub = frame["cal_ci_ub"].astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = np.isfinite(lb) & np.isfinite(ub) & (lb > 0) & (ub > lb)
        ok &= np.log(ub.where(ok, 1.0)) < log_hr + margin
        ok &= np.log(lb.where(ok, 1.0)) > log_hr - margin
    return ok


def i2_summary(store, calibrated: bool = False, threshold: float = I2_THRESHOLD):
    """I squared per (analysis, target, comparator, outcome) cell present in
    every database of the store.

    With ``calibrated`` set, estimates enter as the calibrated-interval
    midpoint on the log scale with the implied standard error
    (log ub - log lb) / (2 * 1.959964); rows without a usable two-sided
    calibrated interval drop out, and cells missing any database are skipped.
    """
    est = store.estimates
    n_db = est["database"].nunique()
    rows = []
    if n_db >= 2:
        usable = est[est["suppressed_reason"].isna()].copy()
        if calibrated:
            ok = two_sided_calibrated_mask(usable)
            usable = usable[ok]
            log_lb = np.log(usable["cal_ci_lb"].astype(float))
            log_ub = np.log(usable["cal_ci_ub"].astype(float))
            usable["_y"] = (log_lb + log_ub) / 2.0
            usable["_se"] = (log_ub - log_lb) / (2.0 * Z_95)
        else:
            usable["_y"] = usable["log_hr"].astype(float)
            usable["_se"] = usable["se"].astype(float)
        grouped = usable.groupby(["analysis", "target", "comparator", "outcome"])
        for key, group in grouped:
            if group["database"].nunique() < n_db:
                continue
            value = compute_i2(group["_y"].to_numpy(), group["_se"].to_numpy())
            rows.append(
                {"analysis": key[0], "target": key[1], "comparator": key[2],
                 "outcome": key[3], "i2": value}
            )
    values = pd.DataFrame(rows, columns=["analysis", "target", "comparator", "outcome", "i2"])
    if len(values):
        values = values.sort_values(
            ["analysis", "target", "comparator", "outcome"], kind="stable"
        ).reset_index(drop=True)
    counts, edges = np.histogram(
        values["i2"].to_numpy(dtype=float) if len(values) else np.empty(0),
        bins=HISTOGRAM_BINS, range=(0.0, 1.0),
    )
    share = float(np.mean(values["i2"] < threshold)) if len(values) else float("nan")
    return I2Summary(
        values=values, histogram_counts=counts, bin_edges=edges,
        share_below_threshold=share, n_triplets=len(values),
    )


@dataclass(frozen=True)
class TransitivityAudit:
    """Counts of A>B>C triplets whose A-vs-C estimate is also elevated."""

    n_triplets: int
    n_holding: int
    fraction: float
    triplets: pd.DataFrame


def _context_models(store, database, analysis):
    models = {}
    table = store.error_models
    mask = (table["database"] == database) & (table["analysis"] == analysis)
    for row in table[mask].itertuples():
        models[(int(row.target), int(row.comparator))] = SystematicErrorModel(
            a=float(row.a), b=float(row.b), c=float(row.c), d=float(row.d),
            fitted_on=int(row.fitted_on),
        )
    return models


def transitivity_audit(store, database, analysis, alpha: float = 0.05):
    """Audit whether significantly elevated risks chain transitively.

    A triplet (A, B, C, outcome) qualifies when the A-vs-B and B-vs-C
    calibrated intervals lie strictly above 1 and the A-vs-C estimate exists;
    it holds when the A-vs-C calibrated interval lies strictly above 1 too.
    Intervals are recomputed from each pair's fitted error model at the
    requested ``alpha``; pairs without an error model never qualify.
    """
    est = store.estimates
    mask = (
        (est["database"] == database)
        & (est["analysis"] == analysis)
        & est["suppressed_reason"].isna()
    )
    rows = est[mask]
    models = _context_models(store, database, analysis)
    lower = {}
    estimable = set()
    for (target, comparator), group in rows.groupby(["target", "comparator"]):
        key_pairs = list(zip(group["outcome"], group["log_hr"], group["se"]))
        for outcome, _, _ in key_pairs:
            estimable.add((int(target), int(comparator), int(outcome)))
        model = models.get((int(target), int(comparator)))
        if model is None:
            continue
        lb, _, failed = calibrate_intervals(
            group["log_hr"].to_numpy(dtype=float),
            group["se"].to_numpy(dtype=float),
            model, alpha=alpha,
        )
        for (outcome, _, _), bound, bad in zip(key_pairs, lb, failed):
            if not bad:
                lower[(int(target), int(comparator), int(outcome))] = float(bound)

    treatments = sorted(set(rows["target"]) | set(rows["comparator"]))
    outcomes = sorted(set(rows["outcome"]))
    records = []
    for a in treatments:
        for b in treatments:
            if b == a:
                continue
            for c in treatments:
                if c == a or c == b:
                    continue
                for outcome in outcomes:
                    if lower.get((a, b, outcome), 0.0) <= 1.0:
                        continue
                    if lower.get((b, c, outcome), 0.0) <= 1.0:
                        continue
                    if (a, c, outcome) not in estimable:
                        continue
                    holds = lower.get((a, c, outcome), 0.0) > 1.0
                    records.append(
                        {"a": a, "b": b, "c": c, "outcome": outcome, "holds": holds}
                    )
    triplets = pd.DataFrame(records, columns=["a", "b", "c", "outcome", "holds"])
    n = len(triplets)
    holding = int(triplets["holds"].sum()) if n else 0
    fraction = holding / n if n else float("nan")
    return TransitivityAudit(
        n_triplets=n, n_holding=holding, fraction=fraction, triplets=triplets
    )
