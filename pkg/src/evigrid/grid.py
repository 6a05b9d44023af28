"""End-to-end grid runner.

``run_grid`` evaluates every ordered treatment pair against every outcome of
interest, every negative control, and every synthetic positive control, in
every database and under every analysis of a :class:`RunConfig`, and returns
the results as a :class:`ResultStore`.

Per (database, target, comparator) the pipeline is: build the base cohort
pair once, fit one propensity model on it, then answer each outcome question
on the subset of subjects without that outcome before index (re-stratified
propensity scores, stratified Cox). Negative controls that clear the
count gates spawn synthetic positive controls at each configured hazard
ratio. After all questions are answered, a systematic error model is fitted
per analysis from the control estimates and calibrated intervals are
attached to every estimable record of that context.

Failures of a single question (non-estimable Cox fit, arm below the minimum
size) are recorded in the store with a suppression reason; they never abort
the run.
"""

from __future__ import annotations

import hashlib
import math
import multiprocessing
from types import SimpleNamespace

import numpy as np

from . import penalized
from .calibration import (
    ControlEstimate,
    calibrate_intervals,
    calibrated_p_value,
    fit_error_model,
)
from .cohorts import CohortCriteria, build_cohort_pair, risk_window_ends
from .config import RunConfig
from .controls import (
    NEGATIVE,
    POSITIVE,
    check_eligibility,
    fit_outcome_rate_model,
    inject_positive_control,
)
from .covariates import extract_covariates, filter_low_prevalence, standardized_differences
from .cox import SurvivalDataset, fit_stratified_cox
from .data import read_database
from .exceptions import (
    CalibrationUnavailableError,
    ConfigurationError,
    DegenerateFitError,
    DiagnosticsError,
)
from .propensity import fit_propensity_model, overlap_diagnostics, stratify
from .simulate import generate_database
from .store import ResultStore

SYNTHETIC_OUTCOME_BASE = 9_000_000

# State inherited by forked worker processes; populated by run_grid just
# before the pool is created and cleared afterwards.
_WORKER_STATE: dict = {}


def synthetic_outcome_id(parent: int, level_index: int) -> int:
    """Deterministic id for the synthetic outcome injected from ``parent``
    at the ``level_index``-th configured hazard ratio."""
    return SYNTHETIC_OUTCOME_BASE + int(parent) * 10 + level_index + 1


def _stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from a tuple of labels."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def load_database(spec):
    """Materialize one database: simulate it or read it from disk."""
    if spec.sim is not None:
        return generate_database(spec.sim)
    return read_database(spec.path)


def _first_event_days(person_ids: np.ndarray, table) -> np.ndarray:
    """First event day per subject from a condition-occurrence table,
    -1 for subjects without an event. The table must cover only subjects
    present in ``person_ids``."""
    days = np.full(len(person_ids), -1, dtype=np.int64)
    if len(table) == 0:
        return days
    tp = table["person_id"].to_numpy()
    td = table["day"].to_numpy()
    # table is sorted by (person_id, day): the first occurrence per person
    # is their earliest event
    uniq, first_idx = np.unique(tp, return_index=True)
    order = np.argsort(person_ids, kind="stable")
    pos = np.searchsorted(person_ids[order], uniq)
    days[order[pos]] = td[first_idx]
    return days


def _blank_record(db_name, analysis, target, comparator, outcome, is_control, true_hr):
    nan = float("nan")
    return {
        "database": db_name,
        "analysis": analysis,
        "target": int(target),
        "comparator": int(comparator),
        "outcome": int(outcome),
        "is_control": int(is_control),
        "true_hr": float(true_hr),
        "n_target": 0,
        "n_comparator": 0,
        "events_target": 0,
        "events_comparator": 0,
        "log_hr": nan,
        "se": nan,
        "hr": nan,
        "ci_lb": nan,
        "ci_ub": nan,
        "p": nan,
        "cal_ci_lb": nan,
        "cal_ci_ub": nan,
        "cal_p": nan,
        "max_smd_after": nan,
        "equipoise_share": nan,
        "suppressed_reason": None,
    }


def _estimate_record(base_record, est, max_smd_after, equipoise_share):
    r = dict(base_record)
    n_t, n_c, ev_t, ev_c = est.counts
    r.update(
        n_target=n_t,
        n_comparator=n_c,
        events_target=ev_t,
        events_comparator=ev_c,
        max_smd_after=float(max_smd_after),
        equipoise_share=float(equipoise_share),
    )
    if est.estimable:
        r.update(
            log_hr=est.log_hr,
            se=est.se_log_hr,
            hr=est.hr,
            ci_lb=est.ci95[0],
            ci_ub=est.ci95[1],
            p=est.p,
        )
    else:
        r["suppressed_reason"] = est.suppressed_reason
    return r


def _suppressed_record(base_record, n_t, n_c, reason):
    r = dict(base_record)
    r.update(n_target=int(n_t), n_comparator=int(n_c), suppressed_reason=reason)
    return r


def _true_hr_of_interest(db, target, comparator, outcome) -> float:
    gt = db.ground_truth
    if gt and (target, outcome) in gt and (comparator, outcome) in gt:
        return float(math.exp(gt[(target, outcome)] - gt[(comparator, outcome)]))
    return float("nan")


def _evaluate_unit(unit):
    db_name, target, comparator = unit
    config = _WORKER_STATE["config"]
    db = _WORKER_STATE["databases"][db_name]
    return evaluate_pair(db, db_name, config, target, comparator)


def evaluate_pair(db, db_name: str, config: RunConfig, target: int, comparator: int):
    """Answer every outcome question for one ordered treatment pair in one
    database. Returns a payload dict with estimate records, roster rows,
    error-model rows, attrition rows, and balance rows."""
    records = []
    roster = [
        {"outcome_id": int(o), "kind": NEGATIVE, "true_hr": 1.0, "parent": float("nan")}
        for o in config.negative_controls
    ]
    error_rows = []
    attrition_rows = []
    balance_rows = []

    criteria = CohortCriteria(washout_days=config.washout_days)
    base = build_cohort_pair(db, target, comparator, None, criteria)
    for stage, row in enumerate(base.attrition_table().itertuples(index=False)):
        attrition_rows.append(
            {
                "database": db_name,
                "target": int(target),
                "comparator": int(comparator),
                "stage": stage,
                "rule": row.rule,
                "target_subjects": int(row.target),
                "comparator_subjects": int(row.comparator),
            }
        )

    outcome_plan = [(int(o), False) for o in config.outcomes]
    outcome_plan += [(int(o), True) for o in config.negative_controls]
    min_arm = config.min_arm_size

    def base_record_for(outcome, analysis_kind, is_negative):
        true_hr = 1.0 if is_negative else _true_hr_of_interest(db, target, comparator, outcome)
        return _blank_record(
            db_name, analysis_kind, target, comparator, outcome, int(is_negative), true_hr
        )

    payload = {
        "records": records,
        "roster": roster,
        "error_models": error_rows,
        "attrition": attrition_rows,
        "balance": balance_rows,
    }

    n_rows = base.n_target + base.n_comparator
    too_small = base.n_target < min_arm or base.n_comparator < min_arm
    if too_small or base.n_target == 0 or base.n_comparator == 0 or n_rows < config.ps_strata:
        if too_small:
            reason = f"fewer than {min_arm} subjects in an arm"
        else:
            reason = "too few subjects to stratify"
        for outcome, is_neg in outcome_plan:
            for policy in config.analyses:
                records.append(
                    _suppressed_record(
                        base_record_for(outcome, policy.kind, is_neg),
                        base.n_target,
                        base.n_comparator,
                        reason,
                    )
                )
        return payload

    # one propensity model per pair, shared across outcome questions
    m = filter_low_prevalence(
        extract_covariates(db, base, config.lookback_days), config.min_covariate_persons
    )
    treated = base.is_target
    lam_max = penalized.lambda_max(m.matrix, treated.astype(np.float64))
    grid_values = penalized.lambda_grid(lam_max, n_values=config.ps_lambda_grid_size)
    ps_fit = fit_propensity_model(
        m,
        treated,
        grid=grid_values,
        n_folds=config.ps_cv_folds,
        seed=_stable_seed(config.rng_seed, db_name, target, comparator, "ps"),
    )
    scores = ps_fit.predict(m)

    # balance is a property of the comparison, assessed once on the base pair
    base_strata = stratify(scores, config.ps_strata).stratum_of
    try:
        balance = standardized_differences(m, treated, base_strata)
        pair_max_smd = balance.max_abs_smd_after
        for cid, before, after in zip(balance.ids, balance.smd_before, balance.smd_after):
            balance_rows.append(
                {
                    "database": db_name,
                    "target": int(target),
                    "comparator": int(comparator),
                    "covariate_id": int(cid),
                    "smd_before": float(before),
                    "smd_after": float(after),
                }
            )
    except DiagnosticsError:
        pair_max_smd = float("nan")

    pids = base.person_ids
    idx = base.index_days
    window_ends = {}
    for policy in config.analyses:
        w_t = risk_window_ends(db, pids[: base.n_target], idx[: base.n_target], target, policy)
        w_c = risk_window_ends(db, pids[base.n_target :], idx[base.n_target :], comparator, policy)
        window_ends[policy.kind] = np.concatenate([w_t, w_c])
    injection_policy = config.analyses[0]

    for outcome, is_negative in outcome_plan:
        lookup = db.condition_lookup(outcome)
        prior = lookup.any_between(pids, 0, idx - 1)
        keep = ~prior
        keep_t = int(keep[: base.n_target].sum())
        keep_c = int(keep[base.n_target :].sum())

        if (
            keep_t < min_arm
            or keep_c < min_arm
            or keep_t == 0
            or keep_c == 0
            or (keep_t + keep_c) < config.ps_strata
        ):
            if keep_t < min_arm or keep_c < min_arm:
                reason = f"fewer than {min_arm} subjects in an arm"
            else:
                reason = "too few subjects to stratify"
            for policy in config.analyses:
                records.append(
                    _suppressed_record(
                        base_record_for(outcome, policy.kind, is_negative),
                        keep_t,
                        keep_c,
                        reason,
                    )
                )
            continue

        sub_pids = pids[keep]
        sub_idx = idx[keep]
        sub_treated = treated[keep]
        strata = stratify(scores[keep], config.ps_strata).stratum_of
        equipoise = overlap_diagnostics(scores[keep], sub_treated).equipoise_share

        event_day, found = lookup.first_on_or_after(sub_pids, sub_idx)
        follow_injection = None
        event_injection = None
        for policy in config.analyses:
            w_end = window_ends[policy.kind][keep]
            event = found & (event_day <= w_end)
            follow = np.where(event, event_day - sub_idx, w_end - sub_idx)
            est = fit_stratified_cox(SurvivalDataset(follow, event, sub_treated, strata))
            records.append(
                _estimate_record(
                    base_record_for(outcome, policy.kind, is_negative),
                    est,
                    pair_max_smd,
                    equipoise,
                )
            )
            if policy.kind == injection_policy.kind:
                follow_injection = follow
                event_injection = event

        if not is_negative:
            continue

        # negative controls that clear the count gates spawn positives
        eligibility = check_eligibility(
            int(event_injection.sum()),
            int(event_injection[sub_treated].sum()),
            config.min_model_persons,
            config.min_inject_persons,
        )
        if not (eligibility.model_ok and eligibility.inject_ok):
            continue
        sub_m = m.subset_rows(keep)
        person_days = follow_injection.astype(np.float64) + 1.0
        lam_rate = penalized.lambda_max(
            sub_m.matrix,
            event_injection.astype(np.float64),
            family=penalized.POISSON,
            offset=np.log(person_days),
        )
        lam_rate = max(lam_rate / config.rate_lambda_divisor, 1e-12)
        try:
            rate_model = fit_outcome_rate_model(
                sub_m, event_injection.astype(np.float64), person_days, lam_rate
            )
        except DegenerateFitError:
            continue
        pair_view = SimpleNamespace(n_target=keep_t, person_ids=sub_pids, index_days=sub_idx)
        for level_index, level in enumerate(config.positive_hazard_ratios):
            sid = synthetic_outcome_id(outcome, level_index)
            table, definition = inject_positive_control(
                pair_view,
                outcome,
                rate_model,
                level,
                (follow_injection, event_injection),
                _stable_seed(
                    config.rng_seed, db_name, target, comparator, outcome, "inject", level_index
                ),
                sub_m,
                sid,
            )
            roster.append(
                {
                    "outcome_id": definition.outcome_id,
                    "kind": POSITIVE,
                    "true_hr": definition.true_hr,
                    "parent": float(definition.parent_negative),
                }
            )
            syn_day = _first_event_days(sub_pids, table)
            has_event = syn_day >= 0
            for policy in config.analyses:
                w_end = window_ends[policy.kind][keep]
                event_s = has_event & (syn_day <= w_end)
                follow_s = np.where(event_s, syn_day - sub_idx, w_end - sub_idx)
                est = fit_stratified_cox(
                    SurvivalDataset(follow_s, event_s, sub_treated, strata)
                )
                rec = _blank_record(
                    db_name, policy.kind, target, comparator, sid, 1, float(level)
                )
                records.append(_estimate_record(rec, est, pair_max_smd, equipoise))

    # per-analysis systematic error model over this pair's control estimates
    parent_of = {int(o): int(o) for o in config.negative_controls}
    for row in roster:
        if row["kind"] == POSITIVE:
            parent_of[row["outcome_id"]] = int(row["parent"])
    for policy in config.analyses:
        kind = policy.kind
        open_rows = [
            r for r in records if r["analysis"] == kind and r["suppressed_reason"] is None
        ]
        controls = [
            ControlEstimate(
                log_hr_hat=r["log_hr"],
                se=r["se"],
                true_log_hr=math.log(r["true_hr"]),
                parent_negative=parent_of[r["outcome"]],
            )
            for r in open_rows
            if r["is_control"] == 1
        ]
        try:
            model = fit_error_model(
                controls,
                minimum_controls=config.minimum_controls,
                context=(db_name, kind, int(target), int(comparator)),
            )
        except (CalibrationUnavailableError, ConfigurationError):
            continue
        error_rows.append(
            {
                "database": db_name,
                "analysis": kind,
                "target": int(target),
                "comparator": int(comparator),
                "a": model.a,
                "b": model.b,
                "c": model.c,
                "d": model.d,
                "fitted_on": model.fitted_on,
            }
        )
        if not open_rows:
            continue
        y = np.array([r["log_hr"] for r in open_rows])
        se = np.array([r["se"] for r in open_rows])
        lower, upper, failed = calibrate_intervals(y, se, model)
        for r, lb, ub, bad in zip(open_rows, lower, upper, failed):
            if bad:
                continue
            r["cal_ci_lb"] = float(lb)
            r["cal_ci_ub"] = float(ub)
            r["cal_p"] = calibrated_p_value(r["log_hr"], r["se"], model)
    return payload


def run_grid(config: RunConfig, workers: int = 1) -> ResultStore:
    """Run the full evidence grid described by ``config``.

    Every ordered pair of distinct treatments is evaluated against every
    outcome of interest and every control in every database under every
    analysis. The returned store is deterministic: rerunning the same
    config, with any worker count, produces byte-identical files.
    """
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    databases = {spec.name: load_database(spec) for spec in config.databases}
    units = [
        (spec.name, int(t), int(c))
        for spec in config.databases
        for t in config.treatments
        for c in config.treatments
        if t != c
    ]
    _WORKER_STATE["config"] = config
    _WORKER_STATE["databases"] = databases
    try:
        if workers == 1 or len(units) <= 1:
            payloads = [_evaluate_unit(u) for u in units]
        else:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=min(workers, len(units))) as pool:
                payloads = pool.map(_evaluate_unit, units)
    finally:
        _WORKER_STATE.clear()

    estimates = [r for p in payloads for r in p["records"]]
    roster_map = {}
    for p in payloads:
        for row in p["roster"]:
            roster_map[row["outcome_id"]] = row
    return ResultStore.from_records(
        estimates,
        roster=list(roster_map.values()),
        error_models=[r for p in payloads for r in p["error_models"]],
        attrition=[r for p in payloads for r in p["attrition"]],
        balance=[r for p in payloads for r in p["balance"]],
    )
