"""Tests for the systematic-error model and calibrated intervals."""

import math

import numpy as np
import pytest

import evigrid.calibration as calibration
from evigrid.calibration import (
    BRACKET_HALF_WIDTH,
    ControlEstimate,
    SystematicErrorModel,
    calibrate_ci,
    calibrate_intervals,
    calibrated_p_value,
    coverage,
    fit_error_model,
    loo_cross_validate,
)
from evigrid.cox import wald_interval
from evigrid.exceptions import CalibrationUnavailableError, ConfigurationError

THETAS = (0.0, math.log(1.5), math.log(2.0), math.log(4.0))


def make_controls(n, bias=0.0, slope=0.0, spread=0.0, se=0.1, seed=0, parents=None):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = np.tile(THETAS, n // 4 + 1)[:n]
    ses = np.full(n, se) if np.isscalar(se) else np.asarray(se)
    total_sd = np.sqrt(ses**2 + spread**2)
    y = theta + bias + slope * theta + rng.normal(0.0, 1.0, n) * total_sd
    if parents is None:
        parents = np.zeros(n, dtype=int)
    return [
        ControlEstimate(float(y[i]), float(ses[i]), float(theta[i]), int(parents[i]))
        for i in range(n)
    ]


def test_control_estimate_validation():
    with pytest.raises(ConfigurationError):
        ControlEstimate(0.1, 0.0, 0.0, 1)
    with pytest.raises(ConfigurationError):
        ControlEstimate(np.nan, 0.1, 0.0, 1)


def test_exact_controls_give_null_model():
    controls = [
        ControlEstimate(t, 0.01, t, 0) for t in np.tile(THETAS, 5)
    ]
    model = fit_error_model(controls)
    assert abs(model.a) < 1e-3
    assert abs(model.b) < 1e-3
    assert math.exp(model.c) < 0.01


def test_constant_bias_recovered():
    rng = np.random.default_rng(np.random.SeedSequence(1))
    ses = rng.uniform(0.05, 0.2, 100)
    controls = make_controls(100, bias=0.2, se=ses, seed=2)
    model = fit_error_model(controls)
    assert abs(model.a - 0.2) < 0.05
    assert abs(model.b) < 0.05


def test_doubled_controls_same_argmax():
    controls = make_controls(40, bias=0.1, spread=0.1, seed=3)
    single = fit_error_model(controls)
    double = fit_error_model(controls + controls)
    assert single.a == pytest.approx(double.a, abs=1e-4)
    assert single.b == pytest.approx(double.b, abs=1e-4)
    assert single.c == pytest.approx(double.c, abs=1e-4)
    assert single.d == pytest.approx(double.d, abs=1e-4)
    assert double.fitted_on == 80


def test_minimum_controls_enforced():
    controls = make_controls(10, seed=4)
    fit_error_model(controls)
    with pytest.raises(CalibrationUnavailableError):
        fit_error_model(controls[:9])


def test_single_true_value_with_positives_rejected():
    controls = [ControlEstimate(0.7, 0.1, math.log(2.0), 0) for _ in range(12)]
    with pytest.raises(ConfigurationError):
        fit_error_model(controls)


def degenerate_model(a=0.0, b=0.0, c=-30.0, d=0.0):
    return SystematicErrorModel(a=a, b=b, c=c, d=d, fitted_on=50)


def log_bounds(lb, ub):
    return math.log(lb), math.log(ub)


def test_degenerate_model_matches_wald():
    est, se = 0.4, 0.12
    lb, ub = calibrate_ci(est, se, degenerate_model())
    wl, wu = wald_interval(est, se)
    assert math.log(lb) == pytest.approx(math.log(wl), abs=1e-6)
    assert math.log(ub) == pytest.approx(math.log(wu), abs=1e-6)


def test_constant_bias_shifts_interval():
    est, se = 0.4, 0.12
    base = log_bounds(*calibrate_ci(est, se, degenerate_model()))
    shifted = log_bounds(*calibrate_ci(est, se, degenerate_model(a=0.2)))
    assert shifted[0] == pytest.approx(base[0] - 0.2, abs=1e-6)
    assert shifted[1] == pytest.approx(base[1] - 0.2, abs=1e-6)


def test_matched_spread_widens_by_sqrt_two():
    est, se = 0.1, 0.08
    nominal = log_bounds(*calibrate_ci(est, se, degenerate_model()))
    inflated = log_bounds(*calibrate_ci(est, se, degenerate_model(c=math.log(se))))
    nominal_half = (nominal[1] - nominal[0]) / 2.0
    inflated_half = (inflated[1] - inflated[0]) / 2.0
    assert inflated_half == pytest.approx(math.sqrt(2.0) * nominal_half, abs=1e-6)


def test_midpoint_matches_bias_inversion():
    est, se = 0.9, 0.15
    model = degenerate_model(a=0.3, b=0.25)
    lb, ub = calibrate_ci(est, se, model)
    midpoint = (math.log(lb) + math.log(ub)) / 2.0
    assert midpoint == pytest.approx((est - 0.3) / 1.25, abs=1e-6)


def test_fitted_null_model_round_trip():
    controls = [ControlEstimate(t, 0.1, t, 0) for t in np.tile(THETAS, 5)]
    model = fit_error_model(controls)
    est, se = 0.5, 0.15
    lb, ub = calibrate_ci(est, se, model)
    wl, wu = wald_interval(est, se)
    assert math.log(lb) == pytest.approx(math.log(wl), abs=1e-4)
    assert math.log(ub) == pytest.approx(math.log(wu), abs=1e-4)


def test_uncalibratable_flagged_not_raised():
    # A mean slope at or below -1 makes the root equations non-interval-defining.
    crossed = degenerate_model(b=-2.0, c=0.0)
    lower, upper, failed = calibrate_intervals([0.0, 0.3], [1.0, 0.1], crossed)
    assert failed.all()
    assert np.isnan(lower).all() and np.isnan(upper).all()


def test_unreachable_tail_truncates_at_bracket_edge():
    # A steep spread slope flattens the upper tail so its target is never
    # reached: no value above the estimate can be rejected and the bound
    # lands on the bracket edge rather than failing the whole interval.
    runaway = SystematicErrorModel(a=0.0, b=0.0, c=0.0, d=5.0, fitted_on=50)
    lb, ub = calibrate_ci(0.0, 0.5, runaway)
    assert not math.isnan(lb) and lb < 1.0
    assert math.log(ub) == pytest.approx(BRACKET_HALF_WIDTH)


def test_mixed_batch_keeps_good_entries():
    crossed = degenerate_model(b=-2.0, c=0.0)
    lower, upper, failed = calibrate_intervals([0.0], [0.5], crossed)
    assert failed.all()
    ok_model = degenerate_model()
    lower, upper, failed = calibrate_intervals([0.0, 0.5], [0.5, 0.1], ok_model)
    assert not failed.any()
    assert np.all(lower < upper)


def test_calibrated_p_degenerate_matches_nominal():
    model = degenerate_model()
    est, se = 0.35, 0.1
    z = est / se
    expected = math.erfc(abs(z) / math.sqrt(2.0))
    assert calibrated_p_value(est, se, model) == pytest.approx(expected, abs=1e-12)


def test_calibrated_p_consistent_with_interval():
    model = SystematicErrorModel(a=0.1, b=0.0, c=math.log(0.05), d=0.0, fitted_on=50)
    rng = np.random.default_rng(np.random.SeedSequence(5))
    for _ in range(50):
        est = rng.normal(0.0, 0.5)
        se = rng.uniform(0.05, 0.3)
        p = calibrated_p_value(est, se, model)
        lb, ub = calibrate_ci(est, se, model)
        excludes_one = lb > 1.0 or ub < 1.0
        assert (p < 0.05) == excludes_one


def test_coverage_examples():
    n = 8
    truths = np.linspace(0.5, 4.0, n)
    assert coverage(np.zeros(n), np.full(n, np.inf), truths) == 1.0
    assert coverage(truths + 0.1, truths + 0.5, truths) == 0.0
    lows = np.array([0.5] * 7 + [2.0] * 3)
    highs = np.array([2.0] * 7 + [3.0] * 3)
    truths = np.ones(10)
    assert coverage(lows, highs, truths) == pytest.approx(0.7)
    with pytest.raises(ConfigurationError):
        coverage([], [], [])


def two_group_controls(n_per_group=100, seed=6, **kwargs):
    a = make_controls(n_per_group, seed=seed, parents=np.full(n_per_group, 1), **kwargs)
    b = make_controls(n_per_group, seed=seed + 1, parents=np.full(n_per_group, 2), **kwargs)
    return a + b


def test_loo_unbiased_coverage_near_nominal():
    controls = two_group_controls()
    result = loo_cross_validate(controls, levels=[0.95])
    pooled = result.table.covered.sum() / result.table.n.sum()
    assert result.table.n.sum() == 200
    assert 0.90 <= pooled <= 0.99
    assert result.n_uncalibrated == 0


def test_loo_level_zero_has_zero_coverage():
    controls = two_group_controls(n_per_group=40)
    result = loo_cross_validate(controls, levels=[0.0, 0.95])
    zero_rows = result.table[result.table.level == 0.0]
    assert len(zero_rows) > 0
    assert (zero_rows.coverage == 0.0).all()


def test_loo_runs_one_fit_per_group(monkeypatch):
    controls = []
    for parent in range(4):
        controls += make_controls(20, seed=10 + parent,
                                  parents=np.full(20, parent))
    calls = []
    original = calibration.fit_error_model

    def counting(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    monkeypatch.setattr(calibration, "fit_error_model", counting)
    result = loo_cross_validate(controls, levels=[0.9])
    assert len(calls) == 4
    assert result.n_fits == 4
    assert result.n_groups == 4


def test_loo_coverage_monotone_in_level():
    controls = two_group_controls(n_per_group=60, spread=0.05, seed=8)
    levels = [0.0, 0.5, 0.8, 0.95, 0.99]
    result = loo_cross_validate(controls, levels=levels)
    for _, group in result.table.groupby("true_hr"):
        ordered = group.sort_values("level").coverage.to_numpy()
        assert np.all(np.diff(ordered) >= 0)


def test_loo_requires_two_groups_and_propagates_unavailable():
    controls = make_controls(30, parents=np.full(30, 1))
    with pytest.raises(ConfigurationError):
        loo_cross_validate(controls, levels=[0.95])
    small = make_controls(5, seed=9, parents=np.full(5, 2))
    big = make_controls(15, seed=10, parents=np.full(15, 1))
    result = loo_cross_validate(big + small, levels=[0.95])
    assert result.n_fits == 2
    assert result.n_uncalibrated == 15
    assert result.table.n.sum() == 5
