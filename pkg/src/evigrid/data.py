"""Longitudinal patient database: table schemas, validation, and fast event lookups.

The database is a set of four columnar tables (pandas DataFrames) mirroring a
minimal common-data-model layout, plus optional simulator ground truth. All
times are integer days counted from day 0 = database start.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import GroundTruthUnavailableError

PERSONS_COLUMNS = ["person_id", "birth_year", "sex"]
OBSERVATION_COLUMNS = ["person_id", "start_day", "end_day"]
EXPOSURE_COLUMNS = ["person_id", "drug_id", "start_day", "end_day"]
CONDITION_COLUMNS = ["person_id", "condition_id", "day"]
GROUND_TRUTH_COLUMNS = ["treatment", "outcome", "true_log_hr"]

TABLE_FILES = {
    "persons": "persons.csv",
    "observation_periods": "observation_periods.csv",
    "drug_exposures": "drug_exposures.csv",
    "condition_occurrences": "condition_occurrences.csv",
}
GROUND_TRUTH_FILE = "ground_truth.csv"

# Composite (person_id, day) sort keys assume days below this bound.
_DAY_BOUND = 10**7


def _empty(columns) -> pd.DataFrame:
    return pd.DataFrame({c: pd.Series(dtype=np.int64) for c in columns})


class EventLookup:
    """Sorted (person_id, day) pairs supporting vectorized range queries.

    Built once per (table, id) and reused by cohort construction, covariate
    extraction, and time-at-risk scans.
    """

    def __init__(self, person_ids: np.ndarray, days: np.ndarray):
        person_ids = np.asarray(person_ids, dtype=np.int64)
        days = np.asarray(days, dtype=np.int64)
        key = person_ids * _DAY_BOUND + days
        order = np.argsort(key, kind="stable")
        self.person_ids = person_ids[order]
        self.days = days[order]
        self._key = key[order]

    def __len__(self) -> int:
        return len(self._key)

    def count_between(self, person_ids, lo, hi) -> np.ndarray:
        """Number of events per person with lo <= day <= hi (elementwise bounds)."""
        pid = np.asarray(person_ids, dtype=np.int64)
        lo = np.broadcast_to(np.asarray(lo, dtype=np.int64), pid.shape)
        hi = np.broadcast_to(np.asarray(hi, dtype=np.int64), pid.shape)
        left = np.searchsorted(self._key, pid * _DAY_BOUND + lo, side="left")
        right = np.searchsorted(self._key, pid * _DAY_BOUND + hi, side="right")
        return (right - left).astype(np.int64)

    def any_between(self, person_ids, lo, hi) -> np.ndarray:
        return self.count_between(person_ids, lo, hi) > 0

    def first_on_or_after(self, person_ids, day):
        """Per person, the earliest event day >= day.

        Returns (days, found): days is undefined where found is False.
        """
        pid = np.asarray(person_ids, dtype=np.int64)
        day = np.broadcast_to(np.asarray(day, dtype=np.int64), pid.shape)
        pos = np.searchsorted(self._key, pid * _DAY_BOUND + day, side="left")
        pos_c = np.minimum(pos, max(len(self._key) - 1, 0))
        if len(self._key) == 0:
            return np.zeros(pid.shape, dtype=np.int64), np.zeros(pid.shape, dtype=bool)
        found = (pos < len(self._key)) & (self.person_ids[pos_c] == pid)
        return self.days[pos_c], found


@dataclass
class PatientDatabase:
    """Four event tables plus optional map (treatment, outcome) -> true log HR."""

    persons: pd.DataFrame
    observation_periods: pd.DataFrame
    drug_exposures: pd.DataFrame
    condition_occurrences: pd.DataFrame
    ground_truth: dict | None = None

    _lookup_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @staticmethod
    def empty() -> "PatientDatabase":
        return PatientDatabase(
            persons=_empty(PERSONS_COLUMNS),
            observation_periods=_empty(OBSERVATION_COLUMNS),
            drug_exposures=_empty(EXPOSURE_COLUMNS),
            condition_occurrences=_empty(CONDITION_COLUMNS),
        )

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on the first violation."""
        persons = set(self.persons["person_id"].tolist())
        if len(persons) != len(self.persons):
            raise ValueError("duplicate person_id in persons")
        for name in ("observation_periods", "drug_exposures", "condition_occurrences"):
            table = getattr(self, name)
            if not set(table["person_id"].tolist()) <= persons:
                raise ValueError(f"{name} references unknown person_id")
        obs = self.observation_periods.sort_values(["person_id", "start_day"])
        if (obs["start_day"] < 0).any() or (obs["end_day"] < obs["start_day"]).any():
            raise ValueError("observation periods must have 0 <= start_day <= end_day")
        same_person = obs["person_id"].to_numpy()[1:] == obs["person_id"].to_numpy()[:-1]
        overlap = obs["start_day"].to_numpy()[1:] <= obs["end_day"].to_numpy()[:-1]
        if np.any(same_person & overlap):
            raise ValueError("observation periods overlap within a person")
        for name, start_col, end_col in (
            ("drug_exposures", "start_day", "end_day"),
            ("condition_occurrences", "day", "day"),
        ):
            table = getattr(self, name)
            if len(table) == 0:
                continue
            if (table[start_col] < 0).any():
                raise ValueError(f"{name} has negative days")
            if (table[end_col].to_numpy() < table[start_col].to_numpy()).any():
                raise ValueError(f"{name} has end before start")
            per = self._periods_lookup()
            inside = per.covers(
                table["person_id"].to_numpy(), table[start_col].to_numpy(), table[end_col].to_numpy()
            )
            if not inside.all():
                raise ValueError(f"{name} has rows outside any observation period")

    def _periods_lookup(self) -> "_PeriodLookup":
        if "periods" not in self._lookup_cache:
            self._lookup_cache["periods"] = _PeriodLookup(self.observation_periods)
        return self._lookup_cache["periods"]

    def condition_lookup(self, condition_id: int) -> EventLookup:
        key = ("cond", int(condition_id))
        if key not in self._lookup_cache:
            table = self.condition_occurrences
            mask = table["condition_id"].to_numpy() == condition_id
            self._lookup_cache[key] = EventLookup(
                table["person_id"].to_numpy()[mask], table["day"].to_numpy()[mask]
            )
        return self._lookup_cache[key]

    def drug_lookup(self, drug_id: int) -> EventLookup:
        """Exposure starts of one drug as an event lookup."""
        key = ("drug", int(drug_id))
        if key not in self._lookup_cache:
            table = self.drug_exposures
            mask = table["drug_id"].to_numpy() == drug_id
            self._lookup_cache[key] = EventLookup(
                table["person_id"].to_numpy()[mask], table["start_day"].to_numpy()[mask]
            )
        return self._lookup_cache[key]

    def drug_exposure_rows(self, drug_id: int) -> pd.DataFrame:
        return self.drug_exposures[self.drug_exposures["drug_id"] == drug_id]

    def condition_ids(self) -> np.ndarray:
        return np.unique(self.condition_occurrences["condition_id"].to_numpy())

    def drug_ids(self) -> np.ndarray:
        return np.unique(self.drug_exposures["drug_id"].to_numpy())

    def observation_bounds(self, person_ids, reference_day):
        """Per person, the (start, end) of the observation period covering
        reference_day; found is False where no period covers it."""
        return self._periods_lookup().bounds(person_ids, reference_day)


class _PeriodLookup:
    def __init__(self, periods: pd.DataFrame):
        df = periods.sort_values(["person_id", "start_day"])
        self.pid = df["person_id"].to_numpy(dtype=np.int64)
        self.start = df["start_day"].to_numpy(dtype=np.int64)
        self.end = df["end_day"].to_numpy(dtype=np.int64)
        self._key = self.pid * _DAY_BOUND + self.start

    def _locate(self, person_ids, day):
        pid = np.asarray(person_ids, dtype=np.int64)
        day = np.broadcast_to(np.asarray(day, dtype=np.int64), pid.shape)
        pos = np.searchsorted(self._key, pid * _DAY_BOUND + day, side="right") - 1
        pos_c = np.maximum(pos, 0)
        ok = (
            (pos >= 0)
            & (len(self.pid) > 0)
            & (self.pid[pos_c] == pid)
            & (self.end[pos_c] >= day)
        )
        return pos_c, ok

    def bounds(self, person_ids, day):
        pos, ok = self._locate(person_ids, day)
        if len(self.pid) == 0:
            z = np.zeros(np.shape(person_ids), dtype=np.int64)
            return z, z, np.zeros(np.shape(person_ids), dtype=bool)
        return self.start[pos], self.end[pos], ok

    def covers(self, person_ids, lo, hi):
        pos, ok = self._locate(person_ids, lo)
        if len(self.pid) == 0:
            return np.zeros(np.shape(person_ids), dtype=bool)
        return ok & (np.asarray(hi) <= self.end[pos])


def ground_truth_table(db: PatientDatabase) -> pd.DataFrame:
    """All ordered treatment pairs with their true hazard ratio per outcome.

    true_hr(T, C, O) = exp(true_log_hr[T, O] - true_log_hr[C, O]).
    """
    if db.ground_truth is None:
        raise GroundTruthUnavailableError("database carries no ground truth")
    treatments = sorted({t for t, _ in db.ground_truth})
    outcomes = sorted({o for _, o in db.ground_truth})
    rows = []
    for target in treatments:
        for comparator in treatments:
            if target == comparator:
                continue
            for outcome in outcomes:
                log_hr = db.ground_truth[(target, outcome)] - db.ground_truth[(comparator, outcome)]
                rows.append((target, comparator, outcome, float(np.exp(log_hr))))
    return pd.DataFrame(rows, columns=["treatment", "comparator", "outcome", "true_hr"])


def write_database(db: PatientDatabase, out_dir: str) -> dict:
    """Write the four tables (and ground truth, when present) as CSV files.

    Row order and float formatting are deterministic, so identical databases
    serialize byte-identically.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    sort_keys = {
        "persons": ["person_id"],
        "observation_periods": ["person_id", "start_day"],
        "drug_exposures": ["person_id", "drug_id", "start_day"],
        "condition_occurrences": ["person_id", "condition_id", "day"],
    }
    for name, filename in TABLE_FILES.items():
        path = os.path.join(out_dir, filename)
        table = getattr(db, name).sort_values(sort_keys[name], kind="stable")
        table.to_csv(path, index=False, lineterminator="\n")
        paths[name] = path
    if db.ground_truth is not None:
        path = os.path.join(out_dir, GROUND_TRUTH_FILE)
        rows = sorted((t, o, v) for (t, o), v in db.ground_truth.items())
        pd.DataFrame(rows, columns=GROUND_TRUTH_COLUMNS).to_csv(
            path, index=False, lineterminator="\n"
        )
        paths["ground_truth"] = path
    return paths


def read_database(in_dir: str) -> PatientDatabase:
    tables = {}
    for name, filename in TABLE_FILES.items():
        path = os.path.join(in_dir, filename)
        tables[name] = pd.read_csv(path, dtype=np.int64)
    truth_path = os.path.join(in_dir, GROUND_TRUTH_FILE)
    ground_truth = None
    if os.path.exists(truth_path):
        truth = pd.read_csv(truth_path)
        ground_truth = {
            (int(r.treatment), int(r.outcome)): float(r.true_log_hr)
            for r in truth.itertuples()
        }
    db = PatientDatabase(ground_truth=ground_truth, **tables)
    db.validate()
    return db
