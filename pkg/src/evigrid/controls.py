"""Negative-control bookkeeping and synthetic positive-control injection.

Positive controls are manufactured from a negative control by adding
simulated events to the target arm at rate (target_hr - 1) times each
subject's predicted outcome rate, so the synthetic outcome carries a known
hazard ratio while inheriting the negative control's confounding structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import penalized
from .covariates import SparseCovariateMatrix
from .data import CONDITION_COLUMNS
from .exceptions import ConfigurationError, DegenerateFitError

NEGATIVE = "negative"
POSITIVE = "positive"

MIN_MODEL_PERSONS = 100
MIN_INJECT_PERSONS = 25
POSITIVE_HAZARD_RATIOS = (1.5, 2.0, 4.0)


@dataclass(frozen=True)
class ControlDefinition:
    """One control outcome with its known true hazard ratio."""

    outcome_id: int
    kind: str
    true_hr: float
    parent_negative: int | None = None

    def __post_init__(self):
        if self.kind == NEGATIVE:
            if self.true_hr != 1.0:
                raise ConfigurationError("negative controls must have true_hr 1.0")
            if self.parent_negative is not None:
                raise ConfigurationError("negative controls have no parent")
        elif self.kind == POSITIVE:
            if self.true_hr <= 1.0:
                raise ConfigurationError("positive controls must have true_hr > 1")
            if self.parent_negative is None:
                raise ConfigurationError("positive controls need a parent negative")
        else:
            raise ConfigurationError(f"unknown control kind: {self.kind!r}")


@dataclass(frozen=True)
class Eligibility:
    model_ok: bool
    inject_ok: bool


def check_eligibility(
    total_outcome_persons: int,
    pre_injection_persons_in_arm: int,
    min_model: int = MIN_MODEL_PERSONS,
    min_inject: int = MIN_INJECT_PERSONS,
) -> Eligibility:
    """Outcome-count gates: rate models need min_model persons with the
    outcome overall, injection needs min_inject in the target arm. Both
    boundaries are inclusive (exactly at the minimum passes)."""
    if total_outcome_persons < 0 or pre_injection_persons_in_arm < 0:
        raise ConfigurationError("eligibility counts must be >= 0")
    return Eligibility(
        model_ok=total_outcome_persons >= min_model,
        inject_ok=pre_injection_persons_in_arm >= min_inject,
    )


@dataclass
class OutcomeRateModel:
    """Penalized Poisson model of per-day outcome rates."""

    intercept: float
    coefficients: dict
    lam: float
    converged: bool
    _ids: np.ndarray = field(default=None, repr=False)
    _beta: np.ndarray = field(default=None, repr=False)

    def rates(self, m) -> np.ndarray:
        """Predicted events per person-day, one value per row of m."""
        if isinstance(m, SparseCovariateMatrix):
            X, ids = m.matrix, m.ids
        else:
            X, ids = m, np.arange(m.shape[1], dtype=np.int64)
        if self._ids is not None and len(ids) == len(self._ids) and np.array_equal(ids, self._ids):
            beta = self._beta
        else:
            beta = np.zeros(X.shape[1])
            pos = np.searchsorted(ids, self._ids)
            ok = (pos < len(ids)) & (ids[np.minimum(pos, len(ids) - 1)] == self._ids)
            beta[pos[ok]] = self._beta[ok]
        eta = self.intercept + X @ beta
        return np.exp(np.clip(eta, -30, 30))


def fit_outcome_rate_model(m, events, person_days, lam: float) -> OutcomeRateModel:
    """L1 Poisson regression of event counts with a log person-days offset."""
    events = np.asarray(events, dtype=np.float64)
    person_days = np.asarray(person_days, dtype=np.float64)
    if np.any(person_days <= 0):
        raise ConfigurationError("person_days must be positive for every row")
    if events.sum() <= 0:
        raise DegenerateFitError("no events to model")
    if isinstance(m, SparseCovariateMatrix):
        X, ids = m.matrix, m.ids
    else:
        X, ids = m, np.arange(np.asarray(m).shape[1], dtype=np.int64)
    intercept, beta, converged, _ = penalized.fit_penalized_glm(
        X, events, lam, family=penalized.POISSON, offset=np.log(person_days)
    )
    nz = np.nonzero(beta != 0)[0]
    return OutcomeRateModel(
        intercept=float(intercept),
        coefficients={int(ids[j]): float(beta[j]) for j in nz},
        lam=float(lam),
        converged=bool(converged),
        _ids=np.asarray(ids).copy(),
        _beta=beta,
    )


def inject_positive_control(
    pair,
    negative_outcome: int,
    model: OutcomeRateModel,
    target_hr: float,
    tar,
    seed: int,
    covariates: SparseCovariateMatrix,
    synthetic_outcome_id: int,
):
    """Synthesize one positive control from a negative control.

    tar is (follow_up_days, event) for every pair row (target arm first)
    under the analysis's risk windows. Target-arm subject i receives
    k_i ~ Poisson((target_hr - 1) * rate_i * t_i) injected events; when
    k_i >= 1 a single injected day lands uniformly on {0..t_i} and the
    synthetic first event is the earlier of it and the original event day.
    Comparator rows pass through unchanged.

    Returns (table, definition): a condition-occurrence-shaped table of the
    synthetic outcome's in-window first events for all pair subjects, and
    the positive ControlDefinition. Deterministic given the seed.
    """
    if target_hr <= 1.0:
        raise ConfigurationError("target_hr must exceed 1")
    follow_up, event = tar
    follow_up = np.asarray(follow_up, dtype=np.int64)
    event = np.asarray(event, dtype=bool)
    n_t = pair.n_target
    rates_all = model.rates(covariates)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mean = (target_hr - 1.0) * rates_all[:n_t] * follow_up[:n_t]
    k = rng.poisson(mean)
    u = rng.random(n_t)
    injected_offset = np.floor(u * (follow_up[:n_t] + 1)).astype(np.int64)
    injected_offset = np.minimum(injected_offset, follow_up[:n_t])

    orig_offset = np.where(event[:n_t], follow_up[:n_t], np.iinfo(np.int64).max)
    has_injection = k >= 1
    synth_offset = np.where(
        has_injection, np.minimum(orig_offset, injected_offset), orig_offset
    )
    synth_event_t = has_injection | event[:n_t]

    person_ids = pair.person_ids
    index_days = pair.index_days
    rows_pid = []
    rows_day = []
    rows_pid.append(person_ids[:n_t][synth_event_t])
    rows_day.append((index_days[:n_t] + synth_offset)[synth_event_t])
    comp_event = event[n_t:]
    rows_pid.append(person_ids[n_t:][comp_event])
    rows_day.append((index_days[n_t:] + follow_up[n_t:])[comp_event])

    table = pd.DataFrame(
        {
            "person_id": np.concatenate(rows_pid),
            "condition_id": np.int64(synthetic_outcome_id),
            "day": np.concatenate(rows_day),
        }
    ).sort_values(["person_id", "day"], kind="stable").reset_index(drop=True)[
        CONDITION_COLUMNS
    ]
    definition = ControlDefinition(
        outcome_id=int(synthetic_outcome_id),
        kind=POSITIVE,
        true_hr=float(target_hr),
        parent_negative=int(negative_outcome),
    )
    return table, definition
