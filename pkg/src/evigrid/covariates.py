"""Sparse baseline covariate extraction and balance diagnostics.

Covariate columns get stable integer ids so they survive serialization:
demographics, windowed and any-time condition/drug indicators, and one
distinct-condition count score. All history is read strictly before the
index day.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import PatientDatabase
from .exceptions import DiagnosticsError

AGE_BASE = 1 * 10**10
SEX_ID = 2 * 10**10
YEAR_BASE = 3 * 10**10
COND_WINDOW_BASE = 4 * 10**10
COND_EVER_BASE = 5 * 10**10
DRUG_WINDOW_BASE = 6 * 10**10
DRUG_EVER_BASE = 7 * 10**10
COUNT_SCORE_ID = 8 * 10**10

DEMOGRAPHIC = "demographic"
CONDITION = "condition"
DRUG = "drug"
COUNT_SCORE = "count-score"

BALANCE_THRESHOLD = 0.1


@dataclass
class SparseCovariateMatrix:
    """Subjects-by-covariates sparse matrix, target rows first."""

    n_rows: int
    ids: np.ndarray
    descriptions: list
    classes: list
    matrix: sp.csr_matrix

    @property
    def n_columns(self) -> int:
        return len(self.ids)

    @property
    def nonzero_counts(self) -> np.ndarray:
        return np.diff(self.matrix.tocsc().indptr)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def column_for(self, covariate_id: int) -> int:
        pos = int(np.searchsorted(self.ids, covariate_id))
        if pos >= len(self.ids) or self.ids[pos] != covariate_id:
            raise KeyError(f"no covariate with id {covariate_id}")
        return pos

    def subset_rows(self, rows) -> "SparseCovariateMatrix":
        """Matrix restricted to the given rows (mask or indices); columns kept."""
        sub = self.matrix[np.asarray(rows)]
        return SparseCovariateMatrix(
            n_rows=int(sub.shape[0]), ids=self.ids,
            descriptions=self.descriptions, classes=self.classes, matrix=sub,
        )


@dataclass
class BalanceReport:
    """Per-covariate absolute standardized mean differences."""

    ids: np.ndarray
    smd_before: np.ndarray
    smd_after: np.ndarray

    @property
    def max_abs_smd_after(self) -> float:
        return float(np.max(self.smd_after)) if len(self.smd_after) else 0.0

    def balanced(self, threshold: float = BALANCE_THRESHOLD) -> bool:
        return self.max_abs_smd_after < threshold


def _subject_rows(person_ids: np.ndarray):
    """Return (sorted ids, row index per sorted position)."""
    order = np.argsort(person_ids, kind="stable")
    return person_ids[order], order


def _match_rows(sorted_pids, row_of_sorted, event_pids):
    pos = np.searchsorted(sorted_pids, event_pids)
    pos_c = np.minimum(pos, max(len(sorted_pids) - 1, 0))
    ok = (pos < len(sorted_pids)) & (sorted_pids[pos_c] == event_pids)
    return row_of_sorted[pos_c], ok


def _event_pairs(table_pid, table_id, table_day, sorted_pids, row_of_sorted,
                 index_days, lookback_days):
    """Deduplicated (row, raw id) pairs for the lookback window and for
    any-time-before-index history."""
    rows, ok = _match_rows(sorted_pids, row_of_sorted, table_pid)
    rows = rows[ok]
    ids = table_id[ok]
    days = table_day[ok]
    idx = index_days[rows]
    ever_mask = days <= idx - 1
    window_mask = ever_mask & (days > idx - lookback_days)

    def dedupe(mask):
        r, i = rows[mask], ids[mask]
        if len(r) == 0:
            return r, i
        key = r.astype(np.int64) * (ids.max() + 1) + i
        _, first = np.unique(key, return_index=True)
        return r[first], i[first]

    return dedupe(window_mask), dedupe(ever_mask)


def extract_covariates(db: PatientDatabase, pair, lookback_days: int = 365) -> SparseCovariateMatrix:
    """One row per subject (target arm first), columns as documented above.

    The lookback window is (index - lookback_days, index - 1]; the any-time
    window is every day <= index - 1.
    """
    person_ids = pair.person_ids
    index_days = pair.index_days
    n = len(person_ids)
    sorted_pids, row_of_sorted = _subject_rows(person_ids)

    persons = db.persons
    p_sorted = np.argsort(persons["person_id"].to_numpy(), kind="stable")
    p_ids = persons["person_id"].to_numpy()[p_sorted]
    p_birth = persons["birth_year"].to_numpy()[p_sorted]
    p_sex = persons["sex"].to_numpy()[p_sorted]
    pos = np.searchsorted(p_ids, person_ids)
    birth_year = p_birth[pos]
    sex = p_sex[pos]

    # age at index in whole years; day 0 sits in calendar year 0
    index_year = index_days // 365
    age = index_year - birth_year
    age_bin = age // 5

    cond = db.condition_occurrences
    (cw_rows, cw_ids), (ce_rows, ce_ids) = _event_pairs(
        cond["person_id"].to_numpy(), cond["condition_id"].to_numpy(),
        cond["day"].to_numpy(), sorted_pids, row_of_sorted, index_days,
        lookback_days,
    )
    drug = db.drug_exposures
    (dw_rows, dw_ids), (de_rows, de_ids) = _event_pairs(
        drug["person_id"].to_numpy(), drug["drug_id"].to_numpy(),
        drug["start_day"].to_numpy(), sorted_pids, row_of_sorted, index_days,
        lookback_days,
    )
    count_score = np.bincount(cw_rows, minlength=n).astype(float)

    blocks = []

    def add_block(rows, raw_ids, values, base, cls, describe):
        uniq = np.unique(raw_ids)
        col_of = {int(r): j for j, r in enumerate(uniq)}
        cols = np.array([col_of[int(r)] for r in raw_ids], dtype=np.int64)
        ids = base + uniq.astype(np.int64)
        blocks.append(
            (
                ids,
                [describe(int(r)) for r in uniq],
                cls,
                rows,
                cols,
                values,
            )
        )

    all_rows = np.arange(n, dtype=np.int64)
    add_block(
        all_rows, age_bin, np.ones(n), AGE_BASE, DEMOGRAPHIC,
        lambda b: f"age [{5 * b},{5 * b + 5})",
    )
    sex_rows = all_rows[sex == 1]
    blocks.append(
        (
            np.array([SEX_ID], dtype=np.int64),
            ["sex=1"],
            DEMOGRAPHIC,
            sex_rows,
            np.zeros(len(sex_rows), dtype=np.int64),
            np.ones(len(sex_rows)),
        )
    )
    add_block(
        all_rows, index_year, np.ones(n), YEAR_BASE, DEMOGRAPHIC,
        lambda y: f"index year {y}",
    )
    if len(cw_rows):
        add_block(cw_rows, cw_ids, np.ones(len(cw_rows)), COND_WINDOW_BASE,
                  CONDITION, lambda c: f"condition {c} in lookback")
    if len(ce_rows):
        add_block(ce_rows, ce_ids, np.ones(len(ce_rows)), COND_EVER_BASE,
                  CONDITION, lambda c: f"condition {c} any time prior")
    if len(dw_rows):
        add_block(dw_rows, dw_ids, np.ones(len(dw_rows)), DRUG_WINDOW_BASE,
                  DRUG, lambda d: f"drug {d} in lookback")
    if len(de_rows):
        add_block(de_rows, de_ids, np.ones(len(de_rows)), DRUG_EVER_BASE,
                  DRUG, lambda d: f"drug {d} any time prior")
    score_rows = all_rows[count_score > 0]
    blocks.append(
        (
            np.array([COUNT_SCORE_ID], dtype=np.int64),
            ["distinct conditions in lookback"],
            COUNT_SCORE,
            score_rows,
            np.zeros(len(score_rows), dtype=np.int64),
            count_score[count_score > 0],
        )
    )

    ids = np.concatenate([b[0] for b in blocks])
    descriptions = [d for b in blocks for d in b[1]]
    classes = [b[2] for b in blocks for _ in b[1]]
    offsets = np.cumsum([0] + [len(b[0]) for b in blocks])
    rows = np.concatenate([b[3] for b in blocks])
    cols = np.concatenate(
        [b[4] + offsets[i] for i, b in enumerate(blocks)]
    )
    vals = np.concatenate([b[5] for b in blocks])

    order = np.argsort(ids, kind="stable")
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    matrix = sp.csr_matrix(
        (vals, (rows, rank[cols])), shape=(n, len(ids)), dtype=np.float64
    )
    return SparseCovariateMatrix(
        n_rows=n,
        ids=ids[order],
        descriptions=[descriptions[i] for i in order],
        classes=[classes[i] for i in order],
        matrix=matrix,
    )


def filter_low_prevalence(m: SparseCovariateMatrix, min_nonzero: int) -> SparseCovariateMatrix:
    """Drop columns with fewer than min_nonzero nonzero entries."""
    if min_nonzero < 0:
        raise ValueError("min_nonzero must be >= 0")
    keep = m.nonzero_counts >= min_nonzero
    cols = np.nonzero(keep)[0]
    return SparseCovariateMatrix(
        n_rows=m.n_rows,
        ids=m.ids[keep],
        descriptions=[m.descriptions[i] for i in cols],
        classes=[m.classes[i] for i in cols],
        matrix=m.matrix[:, cols].tocsr(),
    )


def _arm_moments(matrix: sp.csr_matrix, mask: np.ndarray):
    """(n, per-column sum, per-column sum of squares) for the rows in mask."""
    sub = matrix[mask.nonzero()[0], :]
    s = np.asarray(sub.sum(axis=0)).ravel()
    sq = np.asarray(sub.multiply(sub).sum(axis=0)).ravel()
    return int(mask.sum()), s, sq


def _smd(mean_t, var_t, mean_c, var_c):
    pooled = (var_t + var_c) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        smd = np.abs(mean_t - mean_c) / np.sqrt(pooled)
    return np.where(pooled <= 0, 0.0, smd)


def standardized_differences(
    m: SparseCovariateMatrix,
    is_target: np.ndarray,
    strata: np.ndarray | None = None,
) -> BalanceReport:
    """Absolute SMD per column, before and (when strata given) after
    stratification.

    Unstratified: |mean_T - mean_C| / sqrt((var_T + var_C) / 2) with
    population variances, 0 when both variances are 0. Stratified: arm means
    and variances are combined across strata with weights equal to each
    stratum's share of the pooled population; strata missing an arm are
    dropped and the weights renormalized.
    """
    is_target = np.asarray(is_target, dtype=bool)
    if is_target.all() or (~is_target).all():
        raise DiagnosticsError("both arms must be non-empty for balance")

    n_t, s_t, sq_t = _arm_moments(m.matrix, is_target)
    n_c, s_c, sq_c = _arm_moments(m.matrix, ~is_target)
    mean_t, mean_c = s_t / n_t, s_c / n_c
    var_t = sq_t / n_t - mean_t**2
    var_c = sq_c / n_c - mean_c**2
    before = _smd(mean_t, np.maximum(var_t, 0), mean_c, np.maximum(var_c, 0))

    if strata is None:
        after = before.copy()
    else:
        strata = np.asarray(strata)
        labels = np.unique(strata)
        usable = []
        for s in labels:
            in_s = strata == s
            if (in_s & is_target).any() and (in_s & ~is_target).any():
                usable.append(s)
        if not usable:
            raise DiagnosticsError("no stratum contains both arms")
        weights = np.array([float((strata == s).sum()) for s in usable])
        weights /= weights.sum()
        mean_t = np.zeros(m.n_columns)
        mean_c = np.zeros(m.n_columns)
        var_t = np.zeros(m.n_columns)
        var_c = np.zeros(m.n_columns)
        for w, s in zip(weights, usable):
            in_s = strata == s
            nt, st, sqt = _arm_moments(m.matrix, in_s & is_target)
            nc, sc, sqc = _arm_moments(m.matrix, in_s & ~is_target)
            mt, mc = st / nt, sc / nc
            mean_t += w * mt
            mean_c += w * mc
            var_t += w * np.maximum(sqt / nt - mt**2, 0)
            var_c += w * np.maximum(sqc / nc - mc**2, 0)
        after = _smd(mean_t, var_t, mean_c, var_c)

    return BalanceReport(ids=m.ids.copy(), smd_before=before, smd_after=after)
