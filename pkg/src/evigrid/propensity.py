"""Propensity model fitting, score stratification, and overlap diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import penalized
from .covariates import SparseCovariateMatrix
from .exceptions import DegenerateFitError, DiagnosticsError

DEFAULT_STRATA = 10
EQUIPOISE_LO = 0.3
EQUIPOISE_HI = 0.7
HISTOGRAM_BINS = 50


@dataclass
class PenalizedLogisticFit:
    """Fitted L1 logistic model with covariate-id keyed coefficients."""

    intercept: float
    coefficients: dict
    lam: float
    converged: bool
    iterations: int
    cv_log_likelihoods: dict | None = None
    _ids: np.ndarray = field(default=None, repr=False)
    _beta: np.ndarray = field(default=None, repr=False)

    def linear_predictor(self, m) -> np.ndarray:
        X, ids = _design(m)
        if self._ids is not None and len(ids) == len(self._ids) and np.array_equal(ids, self._ids):
            beta = self._beta
        else:
            # align by covariate id for matrices with different column sets
            beta = np.zeros(X.shape[1])
            pos = np.searchsorted(ids, self._ids)
            ok = (pos < len(ids)) & (ids[np.minimum(pos, len(ids) - 1)] == self._ids)
            beta[pos[ok]] = self._beta[ok]
        return self.intercept + X @ beta

    def predict(self, m) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-np.clip(self.linear_predictor(m), -30, 30)))


@dataclass
class PropensityStrata:
    """Scores with their pooled-quantile stratum assignment."""

    scores: np.ndarray
    stratum_of: np.ndarray
    boundaries: np.ndarray
    n_strata: int


@dataclass
class OverlapReport:
    """Histogram data per arm plus the preference-score equipoise share."""

    bin_edges: np.ndarray
    target_hist: np.ndarray
    comparator_hist: np.ndarray
    equipoise_share: float


def _design(m):
    """(csc matrix, covariate id array) from either matrix type."""
    if isinstance(m, SparseCovariateMatrix):
        return m.matrix.tocsc(), m.ids
    X = m.tocsc() if sp.issparse(m) else sp.csc_matrix(np.asarray(m, dtype=np.float64))
    return X, np.arange(X.shape[1], dtype=np.int64)


def _check_labels(label) -> np.ndarray:
    label = np.asarray(label).astype(np.float64)
    if label.min() == label.max():
        raise DegenerateFitError("both treatment labels must be present")
    return label


def fit_l1_logistic(m, label, lam: float) -> PenalizedLogisticFit:
    """One penalized fit at a fixed lambda."""
    X, ids = _design(m)
    y = _check_labels(label)
    intercept, beta, converged, cycles = penalized.fit_penalized_glm(
        X, y, lam, family=penalized.LOGISTIC
    )
    nz = beta != 0
    return PenalizedLogisticFit(
        intercept=float(intercept),
        coefficients={int(ids[j]): float(beta[j]) for j in np.nonzero(nz)[0]},
        lam=float(lam),
        converged=bool(converged),
        iterations=int(cycles),
        _ids=ids.copy(),
        _beta=beta,
    )


def select_lambda_cv(m, label, grid=None, n_folds: int = 10, seed: int = 0):
    """Cross-validated lambda selection on the logistic objective."""
    X, _ = _design(m)
    y = _check_labels(label)
    return penalized.select_lambda_cv(
        X, y, grid=grid, n_folds=n_folds, seed=seed, family=penalized.LOGISTIC
    )


def fit_propensity_model(
    m, label, grid=None, n_folds: int = 10, seed: int = 0
) -> PenalizedLogisticFit:
    """CV-selected lambda followed by a final fit on all rows."""
    lam, cv_map = select_lambda_cv(m, label, grid=grid, n_folds=n_folds, seed=seed)
    fit = fit_l1_logistic(m, label, lam)
    fit.cv_log_likelihoods = cv_map
    return fit


def stratify(scores, n_strata: int = DEFAULT_STRATA) -> PropensityStrata:
    """Assign rows to pooled-quantile strata; score ties go to the lower
    stratum."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n_strata < 1:
        raise ValueError("n_strata must be >= 1")
    if n < n_strata:
        raise ValueError("need at least n_strata rows")
    ordered = np.sort(scores)
    # boundary k is the ceil(n*k/n_strata)-th smallest score
    ks = np.arange(1, n_strata)
    idx = np.ceil(n * ks / n_strata).astype(np.int64) - 1
    boundaries = ordered[np.clip(idx, 0, n - 1)]
    stratum = np.searchsorted(boundaries, scores, side="left")
    return PropensityStrata(
        scores=scores,
        stratum_of=stratum.astype(np.int64),
        boundaries=boundaries,
        n_strata=int(n_strata),
    )


def preference_scores(scores, is_target) -> np.ndarray:
    """Propensity scores shifted so arm-size imbalance is removed:
    logit(pref) = logit(ps) - logit(target share)."""
    scores = np.clip(np.asarray(scores, dtype=np.float64), 1e-12, 1 - 1e-12)
    share = float(np.mean(is_target))
    share = min(max(share, 1e-12), 1 - 1e-12)
    logit = np.log(scores / (1 - scores)) - np.log(share / (1 - share))
    return 1.0 / (1.0 + np.exp(-logit))


def overlap_diagnostics(scores, is_target) -> OverlapReport:
    """Score histograms per arm and the share of subjects near equipoise."""
    is_target = np.asarray(is_target, dtype=bool)
    if is_target.all() or not is_target.any():
        raise DiagnosticsError("both arms must be present")
    scores = np.asarray(scores, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    t_hist, _ = np.histogram(scores[is_target], bins=edges)
    c_hist, _ = np.histogram(scores[~is_target], bins=edges)
    pref = preference_scores(scores, is_target)
    share = float(np.mean((pref >= EQUIPOISE_LO) & (pref <= EQUIPOISE_HI)))
    return OverlapReport(
        bin_edges=edges,
        target_hist=t_hist,
        comparator_hist=c_hist,
        equipoise_share=share,
    )
