"""Tests for control eligibility, rate models, and injection."""

import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp
from scipy.stats import spearmanr

from evigrid.cohorts import CohortCriteria, TimeAtRiskPolicy, build_cohort_pair, time_at_risk_bulk
from evigrid.controls import (
    ControlDefinition,
    OutcomeRateModel,
    check_eligibility,
    fit_outcome_rate_model,
    inject_positive_control,
)
from evigrid.covariates import SparseCovariateMatrix, extract_covariates
from evigrid.cox import SurvivalDataset, fit_stratified_cox
from evigrid.exceptions import ConfigurationError, DegenerateFitError
from evigrid.penalized import lambda_max, penalized_objective
from evigrid.simulate import SimConfig, complete_true_log_hr, generate_database
from tests.oracles import brute_force_l1_min


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


def test_eligibility_boundaries():
    assert check_eligibility(99, 30) == check_eligibility(99, 30)
    assert not check_eligibility(99, 30).model_ok
    e = check_eligibility(150, 24)
    assert e.model_ok and not e.inject_ok
    e = check_eligibility(100, 25)
    assert e.model_ok and e.inject_ok
    with pytest.raises(ConfigurationError):
        check_eligibility(-1, 5)


def test_control_definition_invariants():
    ControlDefinition(7, "negative", 1.0)
    ControlDefinition(1_000_001, "positive", 2.0, parent_negative=7)
    with pytest.raises(ConfigurationError):
        ControlDefinition(7, "negative", 1.5)
    with pytest.raises(ConfigurationError):
        ControlDefinition(8, "positive", 1.0, parent_negative=7)
    with pytest.raises(ConfigurationError):
        ControlDefinition(8, "positive", 2.0)
    with pytest.raises(ConfigurationError):
        ControlDefinition(8, "neutral", 1.0)


def test_rate_model_null_closed_form():
    m = wrap(np.zeros((100, 3)))
    events = np.zeros(100)
    events[:10] = 1
    person_days = np.full(100, 10.0)
    model = fit_outcome_rate_model(m, events, person_days, lam=0.01)
    assert model.intercept == pytest.approx(np.log(0.01), abs=1e-6)
    assert model.coefficients == {}
    assert np.allclose(model.rates(m), 0.01, atol=1e-7)


def test_rate_model_heavy_lambda_shrinks_to_null():
    rng = np.random.default_rng(0)
    dense = (rng.random((200, 4)) < 0.4).astype(float)
    events = (rng.random(200) < 0.15).astype(float)
    person_days = rng.integers(50, 400, 200).astype(float)
    model = fit_outcome_rate_model(wrap(dense), events, person_days, lam=1e6)
    assert model.coefficients == {}
    expected = np.log(events.sum() / person_days.sum())
    assert model.intercept == pytest.approx(expected, abs=1e-6)


def test_rate_model_matches_brute_force():
    rng = np.random.default_rng(4)
    dense = (rng.random((25, 2)) < 0.5).astype(float)
    person_days = rng.integers(30, 300, 25).astype(float)
    mu = np.exp(-4.5 + dense @ np.array([0.9, -0.6])) * person_days
    events = rng.poisson(mu).astype(float)
    lam = 0.02
    model = fit_outcome_rate_model(wrap(dense), events, person_days, lam)
    beta = np.zeros(2)
    for cid, v in model.coefficients.items():
        beta[cid - 1] = v
    mine = penalized_objective(
        dense, events, model.intercept, beta, lam,
        family="poisson", offset=np.log(person_days),
    )
    oracle, _ = brute_force_l1_min(
        dense, events, lam, family="poisson", offset=np.log(person_days)
    )
    assert abs(mine - oracle) <= 1e-6


def test_rate_model_rejects_bad_inputs():
    m = wrap(np.zeros((10, 2)))
    with pytest.raises(DegenerateFitError):
        fit_outcome_rate_model(m, np.zeros(10), np.full(10, 5.0), 0.01)
    with pytest.raises(ConfigurationError):
        fit_outcome_rate_model(m, np.ones(10), np.zeros(10), 0.01)


def _pair_fixture(seed=11, n=4000, strength=0.0):
    cfg = SimConfig(
        n_persons=n,
        n_treatments=2,
        n_outcomes=1,
        n_baseline_covariates=8,
        covariate_prevalences=tuple([0.2] * 8),
        channeling_strength=strength,
        unmeasured_confounder_strength=0.0,
        true_log_hr=complete_true_log_hr(2, 1),
        baseline_hazard_per_day=3e-4,
        mean_treatment_days=200,
        gap_probability=0.2,
        observation_years=5.0,
        rng_seed=seed,
    )
    db = generate_database(cfg)
    pair = build_cohort_pair(db, 1, 2, 1, CohortCriteria(washout_days=365))
    policy = TimeAtRiskPolicy("on_treatment", gap_days=30)
    f_t, e_t = time_at_risk_bulk(
        db, pair.target_person_ids, pair.target_index_days, 1, 1, policy
    )
    f_c, e_c = time_at_risk_bulk(
        db, pair.comparator_person_ids, pair.comparator_index_days, 2, 1, policy
    )
    follow = np.concatenate([f_t, f_c])
    event = np.concatenate([e_t, e_c])
    m = extract_covariates(db, pair)
    return db, pair, m, follow, event


def _rate_model(m, follow, event):
    person_days = follow.astype(float) + 1.0
    lam = max(lambda_max(m.matrix, event.astype(float),
                         family="poisson", offset=np.log(person_days)) / 50.0, 1e-8)
    return fit_outcome_rate_model(m, event.astype(float), person_days, lam)


def test_injection_deterministic_and_conservative():
    db, pair, m, follow, event = _pair_fixture()
    model = _rate_model(m, follow, event)
    table1, definition = inject_positive_control(
        pair, 1, model, 2.0, (follow, event), seed=5, covariates=m,
        synthetic_outcome_id=1_000_000,
    )
    table2, _ = inject_positive_control(
        pair, 1, model, 2.0, (follow, event), seed=5, covariates=m,
        synthetic_outcome_id=1_000_000,
    )
    pd.testing.assert_frame_equal(table1, table2)
    assert definition.kind == "positive"
    assert definition.true_hr == 2.0
    assert definition.parent_negative == 1

    n_t = pair.n_target
    target_ids = set(pair.target_person_ids.tolist())
    synth_target = table1[table1.person_id.isin(target_ids)]
    assert len(synth_target) >= int(event[:n_t].sum())
    comp_ids = set(pair.comparator_person_ids.tolist())
    synth_comp = table1[table1.person_id.isin(comp_ids)]
    assert len(synth_comp) == int(event[n_t:].sum())
    # a different seed moves the injected days
    table3, _ = inject_positive_control(
        pair, 1, model, 2.0, (follow, event), seed=6, covariates=m,
        synthetic_outcome_id=1_000_000,
    )
    assert not table1.equals(table3)


def test_injection_requires_hr_above_one():
    db, pair, m, follow, event = _pair_fixture()
    model = _rate_model(m, follow, event)
    with pytest.raises(ConfigurationError):
        inject_positive_control(
            pair, 1, model, 1.0, (follow, event), seed=0, covariates=m,
            synthetic_outcome_id=1_000_000,
        )


def test_injection_zero_rate_returns_parent():
    db, pair, m, follow, event = _pair_fixture()
    null_model = OutcomeRateModel(
        intercept=-np.inf, coefficients={}, lam=1.0, converged=True,
        _ids=m.ids.copy(), _beta=np.zeros(m.n_columns),
    )
    table, _ = inject_positive_control(
        pair, 1, null_model, 4.0, (follow, event), seed=0, covariates=m,
        synthetic_outcome_id=1_000_000,
    )
    pids = pair.person_ids
    expected_pid = pids[event]
    expected_day = (pair.index_days + follow)[event]
    expected = pd.DataFrame(
        {"person_id": expected_pid, "condition_id": np.int64(1_000_000), "day": expected_day}
    ).sort_values(["person_id", "day"], kind="stable").reset_index(drop=True)
    pd.testing.assert_frame_equal(table, expected)


def test_injected_counts_track_predicted_rates():
    db, pair, m, follow, event = _pair_fixture(strength=1.0)
    model = _rate_model(m, follow, event)
    rates = model.rates(m)[: pair.n_target]
    exposure = rates * follow[: pair.n_target]
    rng = np.random.default_rng(np.random.SeedSequence(9))
    k = rng.poisson(3.0 * exposure)  # target_hr 4 -> multiplier 3
    rho = spearmanr(k, exposure).correlation
    assert rho > 0


def _synthetic_follow_event(pair, table, follow, event):
    day_of = dict(zip(table.person_id.to_numpy(), table.day.to_numpy()))
    follow2 = follow.copy()
    event2 = event.copy()
    pids = pair.person_ids
    idx = pair.index_days
    for i, pid in enumerate(pids):
        if pid in day_of:
            follow2[i] = day_of[pid] - idx[i]
            event2[i] = True
        else:
            event2[i] = False
    return follow2, event2


def test_injection_recovers_target_hazard_ratio():
    db, pair, m, follow, event = _pair_fixture(n=10_000)
    model = _rate_model(m, follow, event)
    assert int(event[: pair.n_target].sum()) >= 25
    estimates = []
    ses = []
    for seed in range(20):
        table, _ = inject_positive_control(
            pair, 1, model, 2.0, (follow, event), seed=seed, covariates=m,
            synthetic_outcome_id=1_000_000 + seed,
        )
        f2, e2 = _synthetic_follow_event(pair, table, follow, event)
        est = fit_stratified_cox(
            SurvivalDataset(
                follow_up=f2,
                event=e2,
                treated=pair.is_target,
                stratum=np.zeros(len(f2), dtype=int),
            )
        )
        assert est.estimable
        estimates.append(est.log_hr)
        ses.append(est.se_log_hr)
    mean_est = float(np.mean(estimates))
    assert abs(mean_est - np.log(2.0)) <= 3 * float(np.mean(ses))
