import numpy as np
import pandas as pd
import pytest

from evigrid.config import DatabaseSpec, RunConfig, run_config_from_dict
from evigrid.exceptions import ConfigurationError
from evigrid.grid import load_database, run_grid, synthetic_outcome_id
from evigrid.store import ESTIMATES_COLUMNS, read_store

N_TREATMENTS = 3
OUTCOMES = (1, 2)
NEGATIVES = (3, 4, 5, 6, 7, 8)


def world_dict(**overrides):
    raw = {
        "rng_seed": 3,
        "treatments": list(range(1, N_TREATMENTS + 1)),
        "outcomes": list(OUTCOMES),
        "negative_controls": list(NEGATIVES),
        "analyses": [{"kind": "on_treatment", "gap_days": 30}],
        "min_arm_size": 50,
        "ps_strata": 5,
        "ps_lambda_grid_size": 6,
        "ps_cv_folds": 4,
        "min_model_persons": 15,
        "min_inject_persons": 5,
        "databases": [
            {
                "name": "simdb",
                "simulate": {
                    "n_persons": 5000,
                    "n_treatments": N_TREATMENTS,
                    "n_outcomes": 8,
                    "n_baseline_covariates": 5,
                    "covariate_prevalence": 0.25,
                    "channeling_strength": 0.8,
                    "unmeasured_confounder_strength": 0.0,
                    "true_log_hr": {
                        "default": 0.0,
                        "overrides": [
                            {"treatment": 1, "outcome": 1, "value": 0.5},
                            {"treatment": 2, "outcome": 2, "value": -0.3},
                        ],
                    },
                    "baseline_hazard_per_day": 4e-4,
                    "mean_treatment_days": 200,
                    "observation_years": 4,
                    "rng_seed": 21,
                },
            }
        ],
    }
    raw.update(overrides)
    return raw


@pytest.fixture(scope="module")
def config():
    return run_config_from_dict(world_dict())


@pytest.fixture(scope="module")
def store(config):
    return run_grid(config)


def test_every_question_has_exactly_one_record(store, config):
    est = store.estimates
    n_pairs = N_TREATMENTS * (N_TREATMENTS - 1)
    assert est[["target", "comparator"]].drop_duplicates().shape[0] == n_pairs
    # per pair: outcomes + negatives + positives actually injected for it
    positives = store.roster[store.roster.kind == "positive"]
    for (t, c), group in est.groupby(["target", "comparator"]):
        injected = group[group.outcome.isin(positives.outcome_id)].outcome.nunique()
        expected = len(OUTCOMES) + len(NEGATIVES) + injected
        assert len(group) == expected, (t, c)
    assert list(est.columns) == ESTIMATES_COLUMNS
    keys = est[["database", "analysis", "target", "comparator", "outcome"]]
    assert not keys.duplicated().any()


def test_true_hr_columns(store):
    est = store.estimates
    of_interest = est[est.is_control == 0]
    # simulated ground truth: effect of 1 on outcome 1 is 0.5, others 0
    row = of_interest[
        (of_interest.target == 1) & (of_interest.comparator == 2) & (of_interest.outcome == 1)
    ].iloc[0]
    assert row.true_hr == pytest.approx(np.exp(0.5))
    row = of_interest[
        (of_interest.target == 3) & (of_interest.comparator == 2) & (of_interest.outcome == 1)
    ].iloc[0]
    assert row.true_hr == pytest.approx(1.0)
    negatives = est[est.outcome.isin(NEGATIVES)]
    assert (negatives.is_control == 1).all()
    assert (negatives.true_hr == 1.0).all()
    synth = est[est.outcome >= synthetic_outcome_id(0, 0)]
    assert (synth.is_control == 1).all()
    assert set(synth.true_hr) <= {1.5, 2.0, 4.0}


def test_roster_links_positives_to_parents(store):
    roster = store.roster
    assert set(roster[roster.kind == "negative"].outcome_id) == set(NEGATIVES)
    positives = roster[roster.kind == "positive"]
    assert positives.parent.isin(NEGATIVES).all()
    for row in positives.itertuples(index=False):
        level_index = {1.5: 0, 2.0: 1, 4.0: 2}[row.true_hr]
        assert row.outcome_id == synthetic_outcome_id(int(row.parent), level_index)


def test_suppression_is_sound(store):
    est = store.estimates
    suppressed = est[est.suppressed_reason.notna()]
    open_rows = est[est.suppressed_reason.isna()]
    for column in ("log_hr", "se", "hr", "ci_lb", "ci_ub", "p"):
        assert suppressed[column].isna().all()
        assert np.isfinite(open_rows[column]).all()
    assert (open_rows.se > 0).all()
    assert (open_rows.ci_lb <= open_rows.hr).all()
    assert (open_rows.hr <= open_rows.ci_ub).all()


def test_ordered_pairs_share_subjects(store):
    est = store.estimates
    fwd = est[(est.target == 1) & (est.comparator == 2) & (est.outcome == 1)].iloc[0]
    rev = est[(est.target == 2) & (est.comparator == 1) & (est.outcome == 1)].iloc[0]
    assert fwd.n_target == rev.n_comparator
    assert fwd.n_comparator == rev.n_target
    assert fwd.events_target == rev.events_comparator


def test_error_models_per_pair_and_calibration_attached(store, config):
    models = store.error_models
    n_pairs = N_TREATMENTS * (N_TREATMENTS - 1)
    assert len(models) == n_pairs * len(config.analyses)
    assert (models.fitted_on >= config.minimum_controls).all()
    open_rows = store.estimates[store.estimates.suppressed_reason.isna()]
    calibrated = open_rows.cal_ci_lb.notna()
    assert calibrated.mean() > 0.9
    both = open_rows[calibrated]
    assert (both.cal_ci_lb <= both.cal_ci_ub).all()
    assert ((both.cal_p >= 0.0) & (both.cal_p <= 1.0)).all()


def test_balance_and_attrition_populated(store):
    balance = store.balance
    assert len(balance) > 0
    assert np.isfinite(balance.smd_before).all()
    assert np.isfinite(balance.smd_after).all()
    attrition = store.attrition
    assert set(attrition.rule).issuperset({"eligible_new_users", "final"})
    finals = attrition[attrition.rule == "final"]
    assert (finals.target_subjects > 0).all()


def test_rerun_is_byte_identical(store, config, tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    paths = store.write(str(first))
    run_grid(config, workers=2).write(str(second))
    for name in paths:
        a = (first / paths[name].split("/")[-1]).read_bytes()
        b = (second / paths[name].split("/")[-1]).read_bytes()
        assert a == b, name


def test_store_round_trips_through_disk(store, tmp_path):
    out = tmp_path / "persisted"
    store.write(str(out))
    loaded = read_store(str(out))
    pd.testing.assert_frame_equal(loaded.estimates, store.estimates)
    pd.testing.assert_frame_equal(loaded.roster, store.roster)
    pd.testing.assert_frame_equal(loaded.error_models, store.error_models)


def test_huge_min_arm_suppresses_everything():
    config = run_config_from_dict(world_dict(min_arm_size=10**6))
    store = run_grid(config)
    est = store.estimates
    n_pairs = N_TREATMENTS * (N_TREATMENTS - 1)
    # no injections happen, so the grid is outcomes + negatives only
    assert len(est) == n_pairs * (len(OUTCOMES) + len(NEGATIVES))
    assert est.suppressed_reason.notna().all()
    assert est.log_hr.isna().all()
    assert len(store.error_models) == 0
    assert (store.roster.kind == "negative").all()
    store.validate()


def test_rejects_bad_worker_count(config):
    with pytest.raises(ConfigurationError):
        run_grid(config, workers=0)


def test_load_database_reads_simulated_spec(config):
    db = load_database(config.databases[0])
    assert db.ground_truth[(1, 1)] == pytest.approx(0.5)
    assert len(db.persons) == 5000
