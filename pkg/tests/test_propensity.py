"""Tests for propensity fitting, stratification, and overlap diagnostics."""

import numpy as np
import pytest
import scipy.sparse as sp

from evigrid.covariates import SparseCovariateMatrix
from evigrid.exceptions import DegenerateFitError, DiagnosticsError
from evigrid.propensity import (
    fit_l1_logistic,
    fit_propensity_model,
    overlap_diagnostics,
    preference_scores,
    stratify,
)


def wrap(dense, ids=None):
    dense = np.asarray(dense, dtype=float)
    ids = np.arange(1, dense.shape[1] + 1) if ids is None else np.asarray(ids)
    return SparseCovariateMatrix(
        n_rows=dense.shape[0],
        ids=ids.astype(np.int64),
        descriptions=[str(i) for i in ids],
        classes=["condition"] * dense.shape[1],
        matrix=sp.csr_matrix(dense),
    )


def labeled_instance(seed=0, n=300, p=8):
    rng = np.random.default_rng(seed)
    dense = (rng.random((n, p)) < 0.3).astype(float)
    eta = -0.2 + dense @ rng.normal(0, 1.2, p)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return wrap(dense), y


def test_fit_reports_nonzero_coefficients_by_id():
    m, y = labeled_instance(1)
    fit = fit_l1_logistic(m, y, 0.01)
    assert fit.converged
    assert all(v != 0 for v in fit.coefficients.values())
    assert set(fit.coefficients) <= set(int(i) for i in m.ids)


def test_single_label_raises():
    m, _ = labeled_instance(2, n=40)
    with pytest.raises(DegenerateFitError):
        fit_l1_logistic(m, np.ones(40), 0.01)


def test_scores_strictly_inside_unit_interval():
    m, y = labeled_instance(3)
    fit = fit_l1_logistic(m, y, 0.005)
    scores = fit.predict(m)
    assert np.all(scores > 0) and np.all(scores < 1)


def test_cv_fit_attaches_cv_map():
    m, y = labeled_instance(4, n=200)
    fit = fit_propensity_model(m, y, n_folds=4, seed=0)
    assert fit.cv_log_likelihoods is not None
    assert fit.lam in fit.cv_log_likelihoods


def test_constant_column_changes_no_stratum():
    m, y = labeled_instance(5, n=250)
    fit = fit_l1_logistic(m, y, 0.01)
    dense = m.to_dense()
    with_const = wrap(
        np.column_stack([dense, np.ones(len(y))]),
        ids=list(m.ids) + [999],
    )
    fit2 = fit_l1_logistic(with_const, y, 0.01)
    s1 = stratify(fit.predict(m), 5)
    s2 = stratify(fit2.predict(with_const), 5)
    assert np.array_equal(s1.stratum_of, s2.stratum_of)


def test_stratify_all_identical_scores():
    s = stratify(np.full(40, 0.37), 10)
    assert np.all(s.stratum_of == 0)


def test_stratify_uniform_grid_balanced():
    scores = np.linspace(0.005, 0.995, 100)
    s = stratify(scores, 10)
    sizes = np.bincount(s.stratum_of, minlength=10)
    assert sizes.tolist() == [10] * 10


def test_stratify_matches_sort_slice_oracle():
    rng = np.random.default_rng(8)
    scores = rng.random(1000)
    s = stratify(scores, 10)
    order = np.argsort(scores, kind="stable")
    oracle = np.empty(1000, dtype=int)
    oracle[order] = np.arange(1000) // 100
    assert np.array_equal(np.bincount(s.stratum_of), np.bincount(oracle))


def test_stratify_ties_go_to_lower_stratum():
    scores = np.array([0.1] * 5 + [0.9] * 5)
    s = stratify(scores, 2)
    assert s.boundaries.tolist() == [0.1]
    assert s.stratum_of.tolist() == [0] * 5 + [1] * 5


def test_boundaries_nondecreasing_and_consistent():
    rng = np.random.default_rng(9)
    scores = np.round(rng.random(500), 2)  # force ties
    s = stratify(scores, 10)
    assert np.all(np.diff(s.boundaries) >= 0)
    expected = np.searchsorted(s.boundaries, scores, side="left")
    assert np.array_equal(s.stratum_of, expected)


def test_overlap_perfect_equipoise():
    scores = np.full(60, 0.5)
    arm = np.repeat([True, False], 30)
    rep = overlap_diagnostics(scores, arm)
    assert rep.equipoise_share == 1.0
    assert rep.target_hist.sum() == 30
    assert rep.comparator_hist.sum() == 30


def test_overlap_complete_separation():
    scores = np.concatenate([np.full(30, 0.995), np.full(30, 0.005)])
    arm = np.repeat([True, False], 30)
    rep = overlap_diagnostics(scores, arm)
    assert rep.equipoise_share == 0.0


def test_overlap_matches_direct_recount():
    rng = np.random.default_rng(10)
    scores = rng.beta(2, 3, 400)
    arm = rng.random(400) < 0.3
    arm[:2] = [True, False]
    rep = overlap_diagnostics(scores, arm)
    share = float(np.mean(arm))
    logit = np.log(scores / (1 - scores)) - np.log(share / (1 - share))
    pref = 1 / (1 + np.exp(-logit))
    expected = float(np.mean((pref >= 0.3) & (pref <= 0.7)))
    assert rep.equipoise_share == pytest.approx(expected)


def test_preference_score_centers_arm_share():
    # subjects whose ps equals the target share sit at preference 0.5
    arm = np.zeros(10, dtype=bool)
    arm[:2] = True
    pref = preference_scores(np.full(10, 0.2), arm)
    assert np.allclose(pref, 0.5)


def test_overlap_requires_both_arms():
    with pytest.raises(DiagnosticsError):
        overlap_diagnostics(np.full(5, 0.5), np.ones(5, dtype=bool))
