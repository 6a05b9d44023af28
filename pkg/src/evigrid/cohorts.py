"""New-user cohort construction and time-at-risk windows.

A cohort pair holds first-ever users of a target and a comparator drug.
Exclusion rules are applied in a fixed order and every rule's removals are
recorded per arm, so attrition tables always reconcile with final arm sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import PatientDatabase
from .exceptions import ConfigurationError

ON_TREATMENT = "on_treatment"
INTENT_TO_TREAT = "intent_to_treat"

ATTRITION_RULES = (
    "washout",
    "no_indication",
    "exclusion_condition",
    "prior_outcome",
    "other_drug_exposure",
    "in_both_arms",
    "calendar_overlap",
)


@dataclass(frozen=True)
class CohortCriteria:
    """Inclusion/exclusion rules shared by both arms of a comparison."""

    washout_days: int = 365
    indication_condition: int | None = None
    exclusion_conditions: tuple = ()
    exclude_prior_outcome: bool = True
    exclude_both_exposed: bool = True
    restrict_calendar_overlap: bool = True

    def __post_init__(self):
        if self.washout_days < 0:
            raise ConfigurationError("washout_days must be >= 0")
        object.__setattr__(
            self, "exclusion_conditions", tuple(int(c) for c in self.exclusion_conditions)
        )


@dataclass(frozen=True)
class TimeAtRiskPolicy:
    """Risk-window rule: on_treatment follows merged exposure eras,
    intent_to_treat runs to end of observation."""

    kind: str
    gap_days: int = 30

    def __post_init__(self):
        if self.kind not in (ON_TREATMENT, INTENT_TO_TREAT):
            raise ConfigurationError(f"unknown time-at-risk kind: {self.kind!r}")
        if self.gap_days < 0:
            raise ConfigurationError("gap_days must be >= 0")


@dataclass
class CohortPair:
    """Subjects of one target/comparator comparison, target rows first."""

    target: int
    comparator: int
    target_person_ids: np.ndarray
    target_index_days: np.ndarray
    comparator_person_ids: np.ndarray
    comparator_index_days: np.ndarray
    initial_target: int
    initial_comparator: int
    attrition: list = field(default_factory=list)

    @property
    def target_subjects(self):
        return list(zip(self.target_person_ids.tolist(), self.target_index_days.tolist()))

    @property
    def comparator_subjects(self):
        return list(zip(self.comparator_person_ids.tolist(), self.comparator_index_days.tolist()))

    @property
    def n_target(self) -> int:
        return len(self.target_person_ids)

    @property
    def n_comparator(self) -> int:
        return len(self.comparator_person_ids)

    @property
    def person_ids(self) -> np.ndarray:
        return np.concatenate([self.target_person_ids, self.comparator_person_ids])

    @property
    def index_days(self) -> np.ndarray:
        return np.concatenate([self.target_index_days, self.comparator_index_days])

    @property
    def is_target(self) -> np.ndarray:
        return np.concatenate(
            [
                np.ones(self.n_target, dtype=bool),
                np.zeros(self.n_comparator, dtype=bool),
            ]
        )

    def attrition_table(self) -> pd.DataFrame:
        rows = [("eligible_new_users", self.initial_target, self.initial_comparator)]
        rows += [
            (rule, removed_t, removed_c) for rule, removed_t, removed_c in self.attrition
        ]
        rows.append(("final", self.n_target, self.n_comparator))
        return pd.DataFrame(rows, columns=["rule", "target", "comparator"])


def _known_condition_ids(db: PatientDatabase) -> set:
    ids = set(int(c) for c in db.condition_ids())
    if db.ground_truth is not None:
        ids.update(int(o) for (_, o) in db.ground_truth)
    return ids


def _require_condition(db: PatientDatabase, condition_id: int) -> None:
    if int(condition_id) not in _known_condition_ids(db):
        raise ConfigurationError(f"unknown condition id: {condition_id}")


def _require_drug(db: PatientDatabase, drug_id: int) -> None:
    if int(drug_id) not in set(int(d) for d in db.drug_ids()):
        raise ConfigurationError(f"unknown drug id: {drug_id}")


def _first_use(db: PatientDatabase, drug_id: int):
    """Sorted person ids with their first exposure start day for one drug."""
    key = ("first_use", int(drug_id))
    if key not in db._lookup_cache:
        rows = db.drug_exposure_rows(drug_id)
        pid = rows["person_id"].to_numpy(dtype=np.int64)
        start = rows["start_day"].to_numpy(dtype=np.int64)
        order = np.lexsort((start, pid))
        pid, start = pid[order], start[order]
        first = np.ones(len(pid), dtype=bool)
        first[1:] = pid[1:] != pid[:-1]
        db._lookup_cache[key] = (pid[first], start[first])
    return db._lookup_cache[key]


def _first_era_ends(db: PatientDatabase, drug_id: int, gap_days: int):
    """Per first-ever user, the end day of the exposure era that starts at the
    first exposure, merging same-drug exposures separated by <= gap_days
    (measured end day to next start day)."""
    key = ("first_era_end", int(drug_id), int(gap_days))
    if key not in db._lookup_cache:
        rows = db.drug_exposure_rows(drug_id)
        pid = rows["person_id"].to_numpy(dtype=np.int64)
        start = rows["start_day"].to_numpy(dtype=np.int64)
        end = rows["end_day"].to_numpy(dtype=np.int64)
        order = np.lexsort((start, pid))
        pid, start, end = pid[order], start[order], end[order]
        era_end = end.copy()
        if len(pid):
            running = pd.Series(end).groupby(pid).cummax().to_numpy()
            new_person = np.zeros(len(pid), dtype=bool)
            new_person[0] = True
            new_person[1:] = pid[1:] != pid[:-1]
            breaks = new_person.copy()
            breaks[1:] |= start[1:] - running[:-1] > gap_days
            chain = np.cumsum(breaks) - 1
            chain_end = np.zeros(chain[-1] + 1, dtype=np.int64)
            np.maximum.at(chain_end, chain, end)
            era_end = chain_end[chain]
        first = np.ones(len(pid), dtype=bool)
        if len(pid):
            first[1:] = pid[1:] != pid[:-1]
        db._lookup_cache[key] = (pid[first], era_end[first])
    return db._lookup_cache[key]


def build_cohort_pair(
    db: PatientDatabase,
    target: int,
    comparator: int,
    outcome: int | None,
    criteria: CohortCriteria,
) -> CohortPair:
    """Build both arms, recording removals per rule in application order.

    ``outcome`` may be None to build the outcome-independent base pair (the
    prior-outcome rule is then skipped regardless of the criteria flag).
    """
    if target == comparator:
        raise ConfigurationError("target and comparator must differ")
    _require_drug(db, target)
    _require_drug(db, comparator)
    if outcome is not None:
        _require_condition(db, outcome)
    if criteria.indication_condition is not None:
        _require_condition(db, criteria.indication_condition)
    for cid in criteria.exclusion_conditions:
        _require_condition(db, cid)

    arm_pid = {}
    arm_idx = {}
    alive = {}
    for name, drug in (("t", target), ("c", comparator)):
        pid, idx = _first_use(db, drug)
        arm_pid[name], arm_idx[name] = pid, idx
        alive[name] = np.ones(len(pid), dtype=bool)
    initial = {name: int(alive[name].sum()) for name in ("t", "c")}

    attrition = []

    def apply_rule(rule, keep_t, keep_c):
        removed = []
        for name, keep in (("t", keep_t), ("c", keep_c)):
            drop = alive[name] & ~keep
            removed.append(int(drop.sum()))
            alive[name] &= keep
        attrition.append((rule, removed[0], removed[1]))

    # Washout: the observation period covering index must start at least
    # washout_days before it.
    keeps = {}
    for name in ("t", "c"):
        start, _end, ok = db.observation_bounds(arm_pid[name], arm_idx[name])
        keeps[name] = ok & (arm_idx[name] - start >= criteria.washout_days)
    apply_rule("washout", keeps["t"], keeps["c"])

    if criteria.indication_condition is not None:
        lookup = db.condition_lookup(criteria.indication_condition)
        apply_rule(
            "no_indication",
            lookup.any_between(arm_pid["t"], 0, arm_idx["t"]),
            lookup.any_between(arm_pid["c"], 0, arm_idx["c"]),
        )

    if criteria.exclusion_conditions:
        keeps = {name: np.ones(len(arm_pid[name]), dtype=bool) for name in ("t", "c")}
        for cid in criteria.exclusion_conditions:
            lookup = db.condition_lookup(cid)
            for name in ("t", "c"):
                keeps[name] &= ~lookup.any_between(arm_pid[name], 0, arm_idx[name])
        apply_rule("exclusion_condition", keeps["t"], keeps["c"])

    if criteria.exclude_prior_outcome and outcome is not None:
        lookup = db.condition_lookup(outcome)
        apply_rule(
            "prior_outcome",
            ~lookup.any_between(arm_pid["t"], 0, arm_idx["t"] - 1),
            ~lookup.any_between(arm_pid["c"], 0, arm_idx["c"] - 1),
        )

    if criteria.exclude_both_exposed:
        t_starts = db.drug_lookup(target)
        c_starts = db.drug_lookup(comparator)
        apply_rule(
            "other_drug_exposure",
            ~c_starts.any_between(arm_pid["t"], 0, arm_idx["t"]),
            ~t_starts.any_between(arm_pid["c"], 0, arm_idx["c"]),
        )
        both = np.intersect1d(arm_pid["t"][alive["t"]], arm_pid["c"][alive["c"]])
        apply_rule(
            "in_both_arms",
            ~np.isin(arm_pid["t"], both),
            ~np.isin(arm_pid["c"], both),
        )

    if criteria.restrict_calendar_overlap:
        windows = {}
        for drug in (target, comparator):
            rows = db.drug_exposure_rows(drug)
            windows[drug] = (
                int(rows["start_day"].min()),
                int(rows["end_day"].max()),
            )
        lo = max(windows[target][0], windows[comparator][0])
        hi = min(windows[target][1], windows[comparator][1])
        apply_rule(
            "calendar_overlap",
            (arm_idx["t"] >= lo) & (arm_idx["t"] <= hi),
            (arm_idx["c"] >= lo) & (arm_idx["c"] <= hi),
        )

    return CohortPair(
        target=int(target),
        comparator=int(comparator),
        target_person_ids=arm_pid["t"][alive["t"]],
        target_index_days=arm_idx["t"][alive["t"]],
        comparator_person_ids=arm_pid["c"][alive["c"]],
        comparator_index_days=arm_idx["c"][alive["c"]],
        initial_target=initial["t"],
        initial_comparator=initial["c"],
        attrition=attrition,
    )


def risk_window_ends(
    db: PatientDatabase,
    person_ids: np.ndarray,
    index_days: np.ndarray,
    drug: int,
    policy: TimeAtRiskPolicy,
) -> np.ndarray:
    """Absolute last day at risk for each subject, independent of any outcome.

    Subjects must come from a built cohort, so every index day lies inside an
    observation period.
    """
    person_ids = np.asarray(person_ids, dtype=np.int64)
    index_days = np.asarray(index_days, dtype=np.int64)
    _start, obs_end, ok = db.observation_bounds(person_ids, index_days)
    if len(person_ids) and not ok.all():
        raise ConfigurationError("subject index day outside every observation period")
    if policy.kind == ON_TREATMENT:
        era_pid, era_end = _first_era_ends(db, drug, policy.gap_days)
        pos = np.searchsorted(era_pid, person_ids)
        pos_c = np.minimum(pos, max(len(era_pid) - 1, 0))
        if len(era_pid) == 0 or not np.array_equal(era_pid[pos_c], person_ids):
            raise ConfigurationError("subject without exposure to the cohort drug")
        return np.minimum(era_end[pos_c], obs_end)
    return obs_end


def time_at_risk_bulk(
    db: PatientDatabase,
    person_ids: np.ndarray,
    index_days: np.ndarray,
    drug: int,
    outcome: int,
    policy: TimeAtRiskPolicy,
):
    """Vectorized risk windows for one arm.

    Returns (follow_up_days, event) arrays.
    """
    person_ids = np.asarray(person_ids, dtype=np.int64)
    index_days = np.asarray(index_days, dtype=np.int64)
    window_end = risk_window_ends(db, person_ids, index_days, drug, policy)
    out_day, found = db.condition_lookup(outcome).first_on_or_after(person_ids, index_days)
    event = found & (out_day <= window_end)
    follow = np.where(event, out_day - index_days, window_end - index_days)
    return follow.astype(np.int64), event


def time_at_risk(
    db: PatientDatabase,
    subject,
    drug: int,
    outcome: int,
    policy: TimeAtRiskPolicy,
):
    """Single-subject risk window: (follow_up_days, event)."""
    person_id, index_day = subject
    follow, event = time_at_risk_bulk(
        db, np.array([person_id]), np.array([index_day]), drug, outcome, policy
    )
    return int(follow[0]), bool(event[0])
