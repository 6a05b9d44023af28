"""Deterministic generator of synthetic patient databases with known effects.

The generative model (documented here because downstream claims are tested
against it):

* Each person gets one observation period of ``observation_years`` starting at
  a uniform day in [0, 365], a latent confounder U ~ N(0, 1), and binary
  baseline covariates X_j ~ Bernoulli(prevalence_j), each recorded as a
  condition occurrence (id ``COVARIATE_CONDITION_BASE + j``) at a uniform day
  before treatment start.
* Treatment choice is a multinomial logit over the covariates: logit_t =
  channeling_strength * (g_t . X) + d_t * U, with g_t,j ~ N(0, 1) and
  d_t = +1/-1 for odd/even treatment ids, active only when
  unmeasured_confounder_strength is nonzero.
* The chosen treatment starts at a uniform day in the observation period and
  runs as a chain of exposure eras with geometric day counts (mean
  ``mean_treatment_days``); after each era a new one follows with probability
  ``gap_probability`` after a geometric gap (mean ``GAP_MEAN_DAYS`` days).
* Each outcome o is a first-event time from a piecewise-constant daily hazard
  baseline_hazard_per_day * exp(X . b_o + strength * U + true_log_hr[t, o]
  during exposure eras), with b_j,o ~ N(0, OUTCOME_COEF_SD).

U is never written to the tables, so it acts as unmeasured confounding
whenever ``unmeasured_confounder_strength`` is nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import (
    CONDITION_COLUMNS,
    EXPOSURE_COLUMNS,
    OBSERVATION_COLUMNS,
    PERSONS_COLUMNS,
    PatientDatabase,
)
from .exceptions import ConfigurationError

COVARIATE_CONDITION_BASE = 10_000
MAX_ERAS = 6
GAP_MEAN_DAYS = 20.0
OUTCOME_COEF_SD = 0.3
AGE_RANGE = (18, 80)


@dataclass
class SimConfig:
    """Parameters of one simulated database."""

    n_persons: int
    n_treatments: int
    n_outcomes: int
    n_baseline_covariates: int
    covariate_prevalences: tuple
    channeling_strength: float
    unmeasured_confounder_strength: float
    true_log_hr: dict
    baseline_hazard_per_day: float
    mean_treatment_days: float
    gap_probability: float
    observation_years: float
    rng_seed: int

    def __post_init__(self):
        self.covariate_prevalences = tuple(float(p) for p in self.covariate_prevalences)
        if self.n_persons < 0 or self.n_treatments < 1 or self.n_outcomes < 0:
            raise ConfigurationError("counts must be non-negative (>=1 treatment)")
        if len(self.covariate_prevalences) != self.n_baseline_covariates:
            raise ConfigurationError(
                "covariate_prevalences must have one entry per baseline covariate"
            )
        if any(not 0.0 <= p <= 1.0 for p in self.covariate_prevalences):
            raise ConfigurationError("covariate prevalences must lie in [0, 1]")
        if not 0.0 <= self.gap_probability <= 1.0:
            raise ConfigurationError("gap_probability must lie in [0, 1]")
        for name in ("baseline_hazard_per_day", "mean_treatment_days", "observation_years"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if self.mean_treatment_days < 1.0:
            raise ConfigurationError("mean_treatment_days must be >= 1 day")
        if self.n_outcomes >= COVARIATE_CONDITION_BASE:
            raise ConfigurationError(
                f"n_outcomes must be below {COVARIATE_CONDITION_BASE}"
            )
        self.true_log_hr = {
            (int(t), int(o)): float(v) for (t, o), v in self.true_log_hr.items()
        }
        for t in range(1, self.n_treatments + 1):
            for o in range(1, self.n_outcomes + 1):
                if (t, o) not in self.true_log_hr:
                    raise ConfigurationError(f"true_log_hr missing pair ({t}, {o})")

    @property
    def treatment_ids(self):
        return list(range(1, self.n_treatments + 1))

    @property
    def outcome_ids(self):
        return list(range(1, self.n_outcomes + 1))


def complete_true_log_hr(n_treatments: int, n_outcomes: int, default: float = 0.0,
                         overrides: dict | None = None) -> dict:
    """Full (treatment, outcome) -> log HR map, `default` everywhere except
    `overrides`."""
    truth = {
        (t, o): default
        for t in range(1, n_treatments + 1)
        for o in range(1, n_outcomes + 1)
    }
    if overrides:
        for key, value in overrides.items():
            t, o = key
            if (t, o) not in truth:
                raise ConfigurationError(f"override for unknown pair ({t}, {o})")
            truth[(t, o)] = float(value)
    return truth


def generate_database(config: SimConfig) -> PatientDatabase:
    """Generate one database; identical configs yield identical tables."""
    n = config.n_persons
    n_cov = config.n_baseline_covariates
    ground_truth = dict(config.true_log_hr)
    if n == 0:
        db = PatientDatabase.empty()
        db.ground_truth = ground_truth
        return db

    rng = np.random.default_rng(np.random.SeedSequence(config.rng_seed))
    obs_days = int(round(config.observation_years * 365))

    birth_year = rng.integers(-AGE_RANGE[1], -(AGE_RANGE[0] - 1), size=n)
    sex = rng.integers(0, 2, size=n)
    obs_start = rng.integers(0, 366, size=n)
    obs_end = obs_start + obs_days
    confounder = rng.standard_normal(n)

    prev = np.asarray(config.covariate_prevalences)
    covariates = rng.random((n, n_cov)) < prev[None, :] if n_cov else np.zeros((n, 0), bool)
    cov_day_frac = rng.random((n, n_cov)) if n_cov else np.zeros((n, 0))

    channel_coef = rng.standard_normal((config.n_treatments, n_cov))
    gumbel = rng.gumbel(size=(n, config.n_treatments))
    logits = config.channeling_strength * (covariates.astype(float) @ channel_coef.T)
    if config.unmeasured_confounder_strength != 0.0:
        loading = np.where(np.arange(1, config.n_treatments + 1) % 2 == 1, 1.0, -1.0)
        logits = logits + confounder[:, None] * loading[None, :]
    treatment = 1 + np.argmax(logits + gumbel, axis=1)

    start_frac = rng.random(n)
    treat_start = obs_start + np.floor(start_frac * (obs_days + 1)).astype(np.int64)

    dur = rng.geometric(1.0 / config.mean_treatment_days, size=(n, MAX_ERAS))
    gaps = rng.geometric(1.0 / GAP_MEAN_DAYS, size=(n, MAX_ERAS))
    cont = rng.random((n, MAX_ERAS))

    era_start = np.zeros((n, MAX_ERAS), dtype=np.int64)
    era_end = np.zeros((n, MAX_ERAS), dtype=np.int64)
    era_valid = np.zeros((n, MAX_ERAS), dtype=bool)
    era_start[:, 0] = treat_start
    era_end[:, 0] = np.minimum(treat_start + dur[:, 0] - 1, obs_end)
    era_valid[:, 0] = True
    for k in range(1, MAX_ERAS):
        continues = era_valid[:, k - 1] & (cont[:, k - 1] < config.gap_probability)
        start_k = era_end[:, k - 1] + gaps[:, k - 1]
        valid = continues & (start_k <= obs_end)
        era_start[:, k] = np.where(valid, start_k, era_end[:, k - 1])
        era_end[:, k] = np.where(
            valid, np.minimum(start_k + dur[:, k] - 1, obs_end), era_end[:, k - 1]
        )
        era_valid[:, k] = valid

    outcome_coef = rng.standard_normal((n_cov, config.n_outcomes)) * OUTCOME_COEF_SD

    # Piecewise-constant hazard segments: boundaries alternate era starts and
    # era ends + 1; invalid eras collapse to zero-width segments.
    boundaries = np.empty((n, 2 * MAX_ERAS + 2), dtype=np.int64)
    boundaries[:, 0] = obs_start
    for k in range(MAX_ERAS):
        boundaries[:, 2 * k + 1] = np.where(era_valid[:, k], era_start[:, k], 0)
        boundaries[:, 2 * k + 2] = np.where(era_valid[:, k], era_end[:, k] + 1, 0)
    boundaries[:, -1] = obs_end + 1
    boundaries = np.maximum.accumulate(boundaries, axis=1)
    durations = np.diff(boundaries, axis=1).astype(float)
    exposed = np.zeros(2 * MAX_ERAS + 1, dtype=bool)
    exposed[1::2] = True

    x_float = covariates.astype(float)
    event_person = []
    event_outcome = []
    event_day = []
    for o in range(1, config.n_outcomes + 1):
        log_rate = (
            np.log(config.baseline_hazard_per_day)
            + (x_float @ outcome_coef[:, o - 1] if n_cov else 0.0)
            + config.unmeasured_confounder_strength * confounder
        )
        base_rate = np.exp(log_rate)
        theta = np.array([config.true_log_hr[(t, o)] for t in config.treatment_ids])
        mult = np.exp(theta[treatment - 1])
        seg_rate = base_rate[:, None] * np.where(exposed[None, :], mult[:, None], 1.0)
        cumhaz = np.cumsum(seg_rate * durations, axis=1)
        draws = rng.exponential(size=n)
        has_event = draws < cumhaz[:, -1]
        seg_idx = np.sum(cumhaz < draws[:, None], axis=1)
        seg_idx_c = np.minimum(seg_idx, cumhaz.shape[1] - 1)
        prev_cum = np.where(
            seg_idx_c > 0,
            np.take_along_axis(cumhaz, np.maximum(seg_idx_c - 1, 0)[:, None], axis=1)[:, 0],
            0.0,
        )
        rate_at = np.take_along_axis(seg_rate, seg_idx_c[:, None], axis=1)[:, 0]
        seg_left = np.take_along_axis(boundaries, seg_idx_c[:, None], axis=1)[:, 0]
        t_abs = seg_left + (draws - prev_cum) / np.maximum(rate_at, 1e-300)
        day = np.minimum(np.floor(t_abs).astype(np.int64), obs_end)
        idx = np.nonzero(has_event)[0]
        event_person.append(idx + 1)
        event_outcome.append(np.full(idx.shape, o, dtype=np.int64))
        event_day.append(day[idx])

    # Baseline covariates recorded as condition occurrences before treatment start.
    cov_person = []
    cov_condition = []
    cov_day = []
    for j in range(n_cov):
        idx = np.nonzero(covariates[:, j])[0]
        span = np.maximum(treat_start[idx] - obs_start[idx], 1)
        day = obs_start[idx] + np.floor(cov_day_frac[idx, j] * span).astype(np.int64)
        day = np.minimum(day, np.maximum(treat_start[idx] - 1, obs_start[idx]))
        cov_person.append(idx + 1)
        cov_condition.append(np.full(idx.shape, COVARIATE_CONDITION_BASE + j + 1, dtype=np.int64))
        cov_day.append(day)

    person_id = np.arange(1, n + 1, dtype=np.int64)
    persons = pd.DataFrame(
        {"person_id": person_id, "birth_year": birth_year, "sex": sex}
    )[PERSONS_COLUMNS]
    observation_periods = pd.DataFrame(
        {"person_id": person_id, "start_day": obs_start, "end_day": obs_end}
    )[OBSERVATION_COLUMNS]

    exp_pid = np.repeat(person_id, MAX_ERAS)
    exp_valid = era_valid.ravel()
    drug_exposures = pd.DataFrame(
        {
            "person_id": exp_pid[exp_valid],
            "drug_id": np.repeat(treatment, MAX_ERAS)[exp_valid],
            "start_day": era_start.ravel()[exp_valid],
            "end_day": era_end.ravel()[exp_valid],
        }
    )[EXPOSURE_COLUMNS]

    all_person = cov_person + event_person
    all_condition = cov_condition + event_outcome
    all_day = cov_day + event_day
    if all_person:
        condition_occurrences = pd.DataFrame(
            {
                "person_id": np.concatenate(all_person),
                "condition_id": np.concatenate(all_condition),
                "day": np.concatenate(all_day),
            }
        )
    else:
        condition_occurrences = pd.DataFrame(
            {c: np.array([], dtype=np.int64) for c in CONDITION_COLUMNS}
        )
    condition_occurrences = condition_occurrences.sort_values(
        ["person_id", "condition_id", "day"], kind="stable"
    ).reset_index(drop=True)[CONDITION_COLUMNS]

    return PatientDatabase(
        persons=persons,
        observation_periods=observation_periods,
        drug_exposures=drug_exposures.sort_values(
            ["person_id", "drug_id", "start_day"], kind="stable"
        ).reset_index(drop=True),
        condition_occurrences=condition_occurrences,
        ground_truth=ground_truth,
    )
