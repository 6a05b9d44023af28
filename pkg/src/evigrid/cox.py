"""Stratified Cox model for a single binary treatment effect.

The partial likelihood uses the Breslow tie correction. With one binary
covariate the per-event-time risk sets reduce to four counts, so the Newton
iterations are closed-form array expressions.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import erfc, exp, log, sqrt

import numpy as np

from .exceptions import ConfigurationError

Z_95 = 1.959964
SCORE_TOLERANCE = 1e-8
STEP_TOLERANCE = 1e-10
MAX_NEWTON_ITERATIONS = 50
_MAX_STEP = 5.0


@dataclass
class SurvivalDataset:
    """Per-subject follow-up, event flag, arm flag, and stratum label."""

    follow_up: np.ndarray
    event: np.ndarray
    treated: np.ndarray
    stratum: np.ndarray

    def __post_init__(self):
        self.follow_up = np.asarray(self.follow_up, dtype=np.int64)
        self.event = np.asarray(self.event, dtype=bool)
        self.treated = np.asarray(self.treated, dtype=bool)
        self.stratum = np.asarray(self.stratum, dtype=np.int64)
        n = len(self.follow_up)
        if not (len(self.event) == len(self.treated) == len(self.stratum) == n):
            raise ConfigurationError("survival arrays must share one length")
        if n and self.follow_up.min() < 0:
            raise ConfigurationError("follow-up days must be >= 0")

    def __len__(self) -> int:
        return len(self.follow_up)

    def counts(self):
        t = self.treated
        e = self.event
        return (
            int(t.sum()),
            int((~t).sum()),
            int((t & e).sum()),
            int((~t & e).sum()),
        )


@dataclass
class EffectEstimate:
    """One hazard-ratio estimate with its uncertainty and cohort counts."""

    log_hr: float
    se_log_hr: float
    hr: float
    ci95: tuple
    p: float
    counts: tuple
    estimable: bool
    suppressed_reason: str | None = None
    calibrated_ci95: tuple | None = None
    calibrated_p: float | None = None

    @staticmethod
    def unavailable(counts, reason: str) -> "EffectEstimate":
        nan = float("nan")
        return EffectEstimate(
            log_hr=nan,
            se_log_hr=nan,
            hr=nan,
            ci95=(nan, nan),
            p=nan,
            counts=counts,
            estimable=False,
            suppressed_reason=reason,
        )


def _risk_table(data: SurvivalDataset):
    """Per (stratum, event time): event count d, treated event count dx, and
    treated/untreated at-risk counts n1, n0. Rows without both arms at risk
    carry no contrast and are dropped."""
    _, inv = np.unique(data.stratum, return_inverse=True)
    span = int(data.follow_up.max()) + 2 if len(data) else 2
    keys = inv * span + data.follow_up
    treated_keys = np.sort(keys[data.treated])
    control_keys = np.sort(keys[~data.treated])

    event_keys = keys[data.event]
    uk, d = np.unique(event_keys, return_counts=True)
    te_keys = keys[data.event & data.treated]
    dx = np.zeros(len(uk), dtype=np.int64)
    if len(te_keys):
        uk_te, c_te = np.unique(te_keys, return_counts=True)
        dx[np.searchsorted(uk, uk_te)] = c_te

    s_of = uk // span
    upper = (s_of + 1) * span
    n1 = np.searchsorted(treated_keys, upper) - np.searchsorted(treated_keys, uk)
    n0 = np.searchsorted(control_keys, upper) - np.searchsorted(control_keys, uk)
    contrast = (n1 > 0) & (n0 > 0)
    return d[contrast], dx[contrast], n1[contrast], n0[contrast]


def fit_stratified_cox(data: SurvivalDataset) -> EffectEstimate:
    """Newton maximization of the stratified Breslow partial likelihood.

    Strata lacking events or one of the arms contribute no score and drop
    out; when nothing informative remains, or the likelihood is monotone in
    beta (event ordering completely separates the arms), the estimate comes
    back flagged non-estimable instead of raising.
    """
    counts = data.counts()
    d, dx, n1, n0 = _risk_table(data)
    if len(d) == 0:
        return EffectEstimate.unavailable(counts, "no informative strata")
    total_d = int(d.sum())
    total_dx = int(dx.sum())
    if total_dx == 0 or total_dx == total_d:
        return EffectEstimate.unavailable(counts, "monotone partial likelihood")

    d_f = d.astype(np.float64)
    n1_f = n1.astype(np.float64)
    n0_f = n0.astype(np.float64)
    beta = 0.0
    info = float("nan")
    converged = False
    for _ in range(MAX_NEWTON_ITERATIONS):
        e = exp(beta)
        denom = n1_f * e + n0_f
        frac = n1_f * e / denom
        score = total_dx - float(np.dot(d_f, frac))
        info = float(np.dot(d_f, frac * (n0_f / denom)))
        if abs(score) < SCORE_TOLERANCE:
            converged = True
            break
        if info <= 0:
            return EffectEstimate.unavailable(counts, "vanishing information")
        step = score / info
        if step > _MAX_STEP:
            step = _MAX_STEP
        elif step < -_MAX_STEP:
            step = -_MAX_STEP
        beta += step
        if abs(step) < STEP_TOLERANCE:
            converged = True
            break
    if not converged:
        return EffectEstimate.unavailable(counts, "no convergence")
    if info <= 0:
        return EffectEstimate.unavailable(counts, "vanishing information")

    se = sqrt(1.0 / info)
    lb, ub = wald_interval(beta, se, 0.05)
    z = abs(beta) / se
    p = erfc(z / sqrt(2.0))
    return EffectEstimate(
        log_hr=beta,
        se_log_hr=se,
        hr=exp(beta),
        ci95=(lb, ub),
        p=p,
        counts=counts,
        estimable=True,
    )


def normal_quantile(q: float) -> float:
    """Upper-tail standard normal quantile via scipy, with the conventional
    constant at the 97.5th percentile."""
    if abs(q - 0.975) < 1e-12:
        return Z_95
    from scipy.stats import norm

    return float(norm.ppf(q))


def wald_interval(log_hr: float, se: float, alpha: float = 0.05):
    """Symmetric normal-theory interval on the hazard-ratio scale."""
    if se <= 0:
        raise ConfigurationError("se must be positive")
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    z = normal_quantile(1 - alpha / 2)
    return exp(log_hr - z * se), exp(log_hr + z * se)
