"""L1-penalized GLM fitting by cyclic coordinate descent.

Shared numeric core for the logistic propensity model and the Poisson
outcome-rate model. The objective is

    (1/n) * sum_i loss(eta_i; y_i) + lambda * sum_j |beta_j|

with an unpenalized intercept; eta_i = intercept + x_i . beta + offset_i.
Fitting runs an outer quadratic approximation around the current linear
predictor and an inner coordinate-descent pass over the working least
squares, glmnet style. All updates are deterministic.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numba import njit

from .exceptions import CvDegenerateError, DegenerateFitError

LOGISTIC = "logistic"
POISSON = "poisson"

COORD_TOLERANCE = 1e-7
MAX_CYCLES = 10_000
KKT_TOLERANCE = 1e-4
_ETA_CLAMP = 30.0
_MIN_WEIGHT = 1e-10
_MAX_OUTER = 200


@njit(cache=True)
def _wls_cycles(indptr, indices, data, n, w, r, beta, intercept, lam, tol, max_cycles):
    """Coordinate descent on the penalized weighted least squares.

    r holds the working residual z - eta_model - offset and is updated in
    place together with beta. Returns (intercept, cycles, last_max_change).
    """
    p = len(indptr) - 1
    h = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            acc += w[indices[k]] * data[k] * data[k]
        h[j] = acc / n
    sw = 0.0
    for i in range(n):
        sw += w[i]
    max_change = 0.0
    cycles = 0
    for _ in range(max_cycles):
        cycles += 1
        max_change = 0.0
        num = 0.0
        for i in range(n):
            num += w[i] * r[i]
        d0 = num / sw
        intercept += d0
        for i in range(n):
            r[i] -= d0
        if abs(d0) > max_change:
            max_change = abs(d0)
        for j in range(p):
            if h[j] <= 0.0:
                continue
            g = 0.0
            for k in range(indptr[j], indptr[j + 1]):
                g += w[indices[k]] * data[k] * r[indices[k]]
            g = g / n + h[j] * beta[j]
            if g > lam:
                new = (g - lam) / h[j]
            elif g < -lam:
                new = (g + lam) / h[j]
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for k in range(indptr[j], indptr[j + 1]):
                    r[indices[k]] -= data[k] * d
                if abs(d) > max_change:
                    max_change = abs(d)
        if max_change < tol:
            break
    return intercept, cycles, max_change


def _moments(eta, y, family):
    """Mean and working weight per row, clamped away from degeneracy."""
    eta_c = np.clip(eta, -_ETA_CLAMP, _ETA_CLAMP)
    if family == LOGISTIC:
        mu = 1.0 / (1.0 + np.exp(-eta_c))
        w = np.maximum(mu * (1.0 - mu), _MIN_WEIGHT)
    elif family == POISSON:
        mu = np.exp(eta_c)
        w = np.maximum(mu, _MIN_WEIGHT)
    else:
        raise ValueError(f"unknown family: {family}")
    return mu, w


def _as_csc(X) -> sp.csc_matrix:
    if sp.issparse(X):
        return X.tocsc()
    return sp.csc_matrix(np.asarray(X, dtype=np.float64))


def fit_penalized_glm(
    X,
    y,
    lam: float,
    family: str = LOGISTIC,
    offset=None,
    beta_start=None,
    intercept_start=None,
    coord_tolerance: float = COORD_TOLERANCE,
    max_cycles: int = MAX_CYCLES,
):
    """Fit one penalized GLM. Returns (intercept, beta, converged, cycles).

    beta_start/intercept_start allow warm starts along a lambda path.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    X = _as_csc(X)
    n, p = X.shape
    if n == 0:
        raise DegenerateFitError("empty design matrix")
    y = np.asarray(y, dtype=np.float64)
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    beta = np.zeros(p) if beta_start is None else np.array(beta_start, dtype=np.float64)
    if intercept_start is None:
        if family == LOGISTIC:
            ybar = min(max(y.mean(), 1e-10), 1 - 1e-10)
            intercept = float(np.log(ybar / (1 - ybar)))
        else:
            intercept = float(np.log(max(y.mean(), 1e-10) / np.exp(offset).mean()))
    else:
        intercept = float(intercept_start)

    eta = intercept + X @ beta + offset
    total_cycles = 0
    converged = False
    for _ in range(_MAX_OUTER):
        mu, w = _moments(eta, y, family)
        r = (y - mu) / w
        beta_prev = beta.copy()
        intercept_prev = intercept
        budget = max_cycles - total_cycles
        if budget <= 0:
            break
        intercept, cycles, _ = _wls_cycles(
            X.indptr, X.indices, X.data, n, w, r, beta, intercept, lam,
            coord_tolerance * 0.1, budget,
        )
        total_cycles += cycles
        eta = intercept + X @ beta + offset
        change = max(
            float(np.max(np.abs(beta - beta_prev))) if p else 0.0,
            abs(intercept - intercept_prev),
        )
        if change < coord_tolerance:
            converged = True
            break
    return intercept, beta, converged, total_cycles


def penalized_objective(X, y, intercept, beta, lam, family=LOGISTIC, offset=None):
    """Mean loss plus L1 penalty, for oracle comparisons."""
    X = _as_csc(X)
    n = X.shape[0]
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    eta = intercept + X @ np.asarray(beta, dtype=np.float64) + offset
    y = np.asarray(y, dtype=np.float64)
    if family == LOGISTIC:
        loss = np.maximum(eta, 0) - y * eta + np.log1p(np.exp(-np.abs(eta)))
    else:
        loss = np.exp(eta) - y * eta
    return float(loss.mean() + lam * np.abs(beta).sum())


def mean_log_likelihood(y, eta, family=LOGISTIC):
    """Per-row mean log likelihood (dropping data-only constants for Poisson)."""
    y = np.asarray(y, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if family == LOGISTIC:
        ll = y * eta - (np.maximum(eta, 0) + np.log1p(np.exp(-np.abs(eta))))
    else:
        ll = y * eta - np.exp(eta)
    return float(ll.mean())


def kkt_residual(X, y, intercept, beta, lam, family=LOGISTIC, offset=None) -> float:
    """Max violation of the subgradient optimality conditions.

    Zero coefficients require |grad_j| <= lambda; nonzero ones require
    grad_j = -lambda * sign(beta_j); the intercept gradient must vanish.
    """
    X = _as_csc(X)
    n = X.shape[0]
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    eta = intercept + X @ beta + offset
    mu, _ = _moments(eta, np.asarray(y, float), family)
    resid = mu - np.asarray(y, dtype=np.float64)
    grad = np.asarray(X.T @ resid).ravel() / n
    worst = abs(float(resid.mean()))
    nonzero = beta != 0
    if nonzero.any():
        worst = max(worst, float(np.max(np.abs(grad[nonzero] + lam * np.sign(beta[nonzero])))))
    if (~nonzero).any():
        worst = max(worst, float(np.max(np.maximum(np.abs(grad[~nonzero]) - lam, 0.0))))
    return worst


def lambda_max(X, y, family=LOGISTIC, offset=None) -> float:
    """Smallest lambda at which the all-zero coefficient vector is optimal."""
    X = _as_csc(X)
    n = X.shape[0]
    y = np.asarray(y, dtype=np.float64)
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    if family == LOGISTIC:
        mu = np.full(n, min(max(y.mean(), 1e-10), 1 - 1e-10))
    else:
        scale = np.exp(np.clip(offset, -_ETA_CLAMP, _ETA_CLAMP))
        mu = scale * (y.sum() / scale.sum())
    grad = np.asarray(X.T @ (mu - y)).ravel() / n
    return float(np.max(np.abs(grad))) if grad.size else 0.0


def lambda_grid(lam_max: float, n_values: int = 20, ratio: float = 1000.0) -> np.ndarray:
    """Log-spaced path from lam_max down to lam_max/ratio."""
    if lam_max <= 0:
        lam_max = 1e-4
    return np.geomspace(lam_max, lam_max / ratio, n_values)


def stratified_folds(labels, n_folds: int, seed: int) -> np.ndarray:
    """Fold id per row: seeded permutation within each label class, assigned
    round-robin so every fold sees both classes."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < n_folds or n_folds < 2:
        raise CvDegenerateError("need at least n_folds rows and n_folds >= 2")
    folds = np.empty(n, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for value in np.unique(labels):
        idx = np.nonzero(labels == value)[0]
        if len(idx) < n_folds:
            raise CvDegenerateError(
                f"label class {value} has fewer rows than folds"
            )
        perm = rng.permutation(len(idx))
        folds[idx[perm]] = np.arange(len(idx)) % n_folds
    return folds


def fit_path(X, y, grid, family=LOGISTIC, offset=None):
    """Warm-started fits along a descending lambda path.

    Yields (lam, intercept, beta, converged) with beta reused across steps.
    """
    grid = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    beta = None
    intercept = None
    for lam in grid:
        intercept, beta, converged, _ = fit_penalized_glm(
            X, y, float(lam), family=family, offset=offset,
            beta_start=beta, intercept_start=intercept,
        )
        yield float(lam), intercept, beta.copy(), converged


def select_lambda_cv(
    X,
    y,
    grid=None,
    n_folds: int = 10,
    seed: int = 0,
    family: str = LOGISTIC,
    offset=None,
):
    """Pick the lambda maximizing mean held-out log likelihood.

    Returns (lambda, {lambda: mean held-out log likelihood}). Ties prefer the
    larger lambda (heavier shrinkage).
    """
    X = _as_csc(X)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    offset_arr = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    if grid is None:
        grid = lambda_grid(lambda_max(X, y, family=family, offset=offset_arr))
    grid = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    if len(grid) == 0 or grid[-1] <= 0:
        raise ValueError("lambda grid must be non-empty and positive")
    stratify_by = y if family == LOGISTIC else (y > 0).astype(np.int64)
    folds = stratified_folds(stratify_by, n_folds, seed)
    scores = np.zeros(len(grid))
    for f in range(n_folds):
        train = folds != f
        held = ~train
        X_train = X[train.nonzero()[0], :]
        X_held = X[held.nonzero()[0], :]
        for i, (lam, intercept, beta, _) in enumerate(
            fit_path(X_train, y[train], grid, family=family, offset=offset_arr[train])
        ):
            eta_held = intercept + X_held @ beta + offset_arr[held]
            scores[i] += mean_log_likelihood(y[held], eta_held, family=family)
    scores /= n_folds
    best = 0
    for i in range(1, len(grid)):
        if scores[i] > scores[best]:
            best = i
    cv_map = {float(grid[i]): float(scores[i]) for i in range(len(grid))}
    return float(grid[best]), cv_map
