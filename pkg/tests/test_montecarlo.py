import math

import numpy as np
import pytest

import oracles
from volstop.chain import validate_skip_free
from volstop.errors import RegressionSingular, RuleStopsAtNegativeGain, StartOrderViolated, ValidationError
from volstop.models import DiffusionVolModel
from volstop.montecarlo import (
    LsBasis,
    McConfig,
    StoppingRule,
    _first_passage,
    _killed_endpoint,
    estimate_value_timechanged,
    independence_statistic,
    ls_lower_bound_finite_T,
    probe_continuity,
    summarize,
    verify_monotonicity_coupled,
)
from volstop.rng import stream
from volstop.stopping import (
    GainFunction,
    StoppingProblem,
    extract_thresholds,
    finite_horizon_value,
    log_grid,
    solve_value_iteration,
)

K, R, SIGMA = 1.0, 0.05, 0.2
Q3 = [[-1, 1, 0], [0.5, -1, 0.5], [0, 1, -1]]
ONE = validate_skip_free([SIGMA], [[0.0]])
THREE = validate_skip_free([0.1, 0.2, 0.3], Q3)
HW = DiffusionVolModel.hull_white(0.2, 0.08)


def put_problem(model=ONE, **kw):
    return StoppingProblem(model, GainFunction.put(K), R, **kw)


def test_config_validation():
    for bad in ({"n_paths": 1}, {"dt": 0.0}, {"horizon_cap": -1.0}, {"threads": 0}):
        with pytest.raises(ValidationError):
            McConfig(**bad)


def test_summarize_interval_contains_mean():
    e = summarize(stream(0).standard_normal(1000))
    assert e.stderr >= 0 and e.ci99[0] <= e.mean <= e.ci99[1]
    flat = summarize(np.full(10, 0.3))
    assert (flat.mean, flat.stderr) == (0.3, 0.0)


def test_immediate_rule_is_exact():
    e = estimate_value_timechanged(put_problem(), StoppingRule.immediate(), McConfig(n_paths=100), x0=0.9)
    assert e.mean == pytest.approx(0.1, abs=1e-15)
    assert e.stderr == 0.0


def test_zero_horizon_pays_gain():
    e = estimate_value_timechanged(put_problem(horizon=0.0), StoppingRule.threshold([0.5]), McConfig(n_paths=10), x0=0.8)
    assert e.mean == pytest.approx(0.2) and e.stderr == 0.0


def test_optimal_rule_matches_closed_form():
    b = oracles.put_threshold(K, R, SIGMA)
    e = estimate_value_timechanged(put_problem(), StoppingRule.threshold([b]), McConfig(n_paths=20_000, seed=1))
    ref = float(oracles.put_value(K, K, R, SIGMA))
    assert abs(e.mean - ref) < 3 * e.stderr
    assert e.truncated_fraction == 0.0 and e.flags == ()


def test_threshold_rule_value_matches_closed_form():
    e = estimate_value_timechanged(put_problem(), StoppingRule.threshold([0.6]), McConfig(n_paths=20_000, seed=2))
    ref = float(oracles.threshold_rule_value(K, 0.6, K, R, SIGMA))
    assert abs(e.mean - ref) < 3 * e.stderr


@pytest.mark.parametrize("sigma", [0.2, 0.4])
def test_stop_at_maturity_matches_european_put(sigma):
    # level 0 never triggers, so the rule stops at T; covers both drift signs
    m = validate_skip_free([sigma], [[0.0]])
    e = estimate_value_timechanged(put_problem(m, horizon=1.0), StoppingRule.threshold([0.0]),
                                   McConfig(n_paths=100_000, seed=0))
    assert abs(e.mean - oracles.european_put(K, K, R, sigma, 1.0)) < 3 * e.stderr


def test_feasible_rules_below_grid_value():
    surf = solve_value_iteration(put_problem(THREE))
    b = extract_thresholds(surf).b
    cfg = McConfig(n_paths=4000, seed=3)
    for levels in (b, 0.9 * b, np.minimum(1.1 * b, 0.99), b[::-1]):
        for start in range(3):
            e = estimate_value_timechanged(put_problem(THREE), StoppingRule.threshold(levels), cfg, start=start)
            assert e.mean <= float(surf.value(K, start)) + 3 * e.stderr


def test_g_time_rule_runs_and_is_feasible():
    b = oracles.put_threshold(K, R, SIGMA)
    e = estimate_value_timechanged(put_problem(), StoppingRule.threshold([b], kind="g_time"), McConfig(n_paths=5000))
    assert e.mean <= float(oracles.put_value(K, K, R, SIGMA)) + 3 * e.stderr


def test_thread_count_does_not_change_estimate():
    rule = StoppingRule.threshold([0.75, 0.7, 0.6])
    cfg = McConfig(n_paths=10_000, seed=5)
    one = estimate_value_timechanged(put_problem(THREE), rule, cfg, start=1)
    many = estimate_value_timechanged(put_problem(THREE), rule, McConfig(n_paths=10_000, seed=5, threads=4), start=1)
    assert one.as_dict() == many.as_dict()


def test_truncation_flagged():
    e = estimate_value_timechanged(put_problem(), StoppingRule.threshold([0.5]), McConfig(n_paths=2000, horizon_cap=1.0))
    assert e.truncated_fraction > 0.01
    assert "TruncationDominates" in e.flags
    assert 0 < e.truncation_bias_bound <= math.exp(-R)


def test_antithetic_refused_for_exact_chain_sampler():
    with pytest.raises(ValidationError):
        estimate_value_timechanged(put_problem(), StoppingRule.immediate(), McConfig(antithetic=True))


def test_diffusion_estimate_deterministic_and_feasible():
    p = StoppingProblem(HW, GainFunction.put(K), R, horizon=0.5)
    rule = StoppingRule.threshold(0.8)
    cfg = McConfig(n_paths=400, dt=1e-3, seed=4, antithetic=True)
    a = estimate_value_timechanged(p, rule, cfg, start=0.2)
    b = estimate_value_timechanged(p, rule, McConfig(n_paths=400, dt=1e-3, seed=4, antithetic=True, threads=3),
                                   start=0.2)
    assert a.as_dict() == b.as_dict()
    assert 0 < a.mean < K


def test_first_passage_law():
    rng = stream(7)
    n = 200_000
    a = np.full(n, 0.5)
    # upward drift: hit with probability exp(-2 nu a)
    t = _first_passage(rng, a, np.full(n, 0.8))
    p = math.exp(-2 * 0.8 * 0.5)
    assert abs(np.isfinite(t).mean() - p) < 4 * math.sqrt(p * (1 - p) / n)
    # downward drift: mean passage time a / |nu|
    t = _first_passage(rng, a, np.full(n, -0.8))
    assert abs(t.mean() - 0.5 / 0.8) < 4 * t.std() / math.sqrt(n)
    assert np.all(np.isinf(_first_passage(rng, np.full(3, np.inf), np.full(3, -0.8))))


def test_killed_endpoint_stays_above_barrier():
    rng = stream(8)
    x = _killed_endpoint(rng, np.full(10_000, 0.3), np.zeros(10_000), np.ones(10_000))
    assert np.all(x > -0.3)
    # reflection principle: P(W_1 > 0, min > -a) = 1/2 - Phi(-2a), over P(min > -a)
    phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
    frac = (x > 0).mean()
    expected = (0.5 - phi(-0.6)) / (2 * phi(0.3) - 1)
    assert abs(frac - expected) < 4 * math.sqrt(expected * (1 - expected) / x.size)


def test_chain_coupling_has_no_violations():
    rules = [StoppingRule.threshold([0.75, 0.7, 0.6]), StoppingRule.threshold(0.8)]
    rep = verify_monotonicity_coupled(put_problem(THREE), 0, 2, rules, McConfig(n_paths=300, dt=1e-2, seed=2))
    assert rep.passed and rep.violations == 0 and rep.n == 300
    assert all(d.mean >= 0 for d in rep.differences)


def test_equal_starts_give_zero_difference():
    rule = StoppingRule.threshold(0.8)
    rep = verify_monotonicity_coupled(put_problem(THREE), 1, 1, rule, McConfig(n_paths=50, dt=1e-2))
    assert rep.passed and rep.max_gamma_gap == 0.0
    assert rep.differences[0].mean == 0.0 and rep.differences[0].stderr == 0.0


def test_coupling_start_order_guard():
    with pytest.raises(StartOrderViolated):
        verify_monotonicity_coupled(put_problem(THREE), 2, 0, StoppingRule.immediate(), McConfig(n_paths=10))


def test_negative_gain_rule_refused():
    p = StoppingProblem(THREE, GainFunction.constant(-0.5), R)
    with pytest.raises(RuleStopsAtNegativeGain):
        verify_monotonicity_coupled(p, 0, 1, StoppingRule.immediate(), McConfig(n_paths=10))


def test_diffusion_coupling_has_no_violations():
    p = StoppingProblem(HW, GainFunction.put(K), R)
    rep = verify_monotonicity_coupled(p, 0.15, 0.25, StoppingRule.threshold(0.8),
                                      McConfig(n_paths=200, dt=1e-3, seed=1), horizon=1.0)
    assert rep.passed and rep.violations == 0


def test_continuity_probe_both_directions():
    cfg = McConfig(n_paths=100, dt=1e-3, seed=3)
    down = probe_continuity(HW, 0.2, "down", 5, 1.0, cfg)
    up = probe_continuity(HW, 0.2, "up", 5, 1.0, cfg)
    assert down.monotone and down.converged
    assert up.monotone and up.converged
    assert np.all(np.diff(down.gamma_levels) > 0)
    assert np.all(np.diff(up.gamma_levels) < 0)


def test_continuity_probe_levels_equal_to_start():
    # levels y0 (1 + 10**-n) round to y0 once n passes the float precision
    rep = probe_continuity(HW, 0.25, "down", 20, 0.5, McConfig(n_paths=20, dt=1e-3))
    assert rep.gamma_levels[-1] == rep.gamma_limit
    assert rep.final_rel_gap == 0.0


def test_ls_zero_horizon_is_gain():
    e = ls_lower_bound_finite_T(put_problem(horizon=0.0), LsBasis(), McConfig(n_paths=10), x0=0.9)
    assert e.mean == pytest.approx(0.1) and e.stderr == 0.0


def test_ls_below_grid_value():
    p = put_problem(THREE, horizon=1.0)
    grid = finite_horizon_value(p, log_grid(K, 800), t_steps=400)
    e = ls_lower_bound_finite_T(p, LsBasis(n_dates=25), McConfig(n_paths=20_000, seed=6), start=1)
    assert e.mean <= float(grid.value(K, 1)) + 3 * e.stderr
    assert e.mean > 0.5 * float(grid.value(K, 1))


def test_ls_regression_singular():
    with pytest.raises(RegressionSingular):
        ls_lower_bound_finite_T(put_problem(horizon=1.0), LsBasis(degree=40, n_dates=5), McConfig(n_paths=5000))


def test_ls_dates_validated():
    with pytest.raises(ValidationError):
        ls_lower_bound_finite_T(put_problem(horizon=1.0), LsBasis(dates=[0.5, 0.4, 1.0]), McConfig(n_paths=10))


def test_independence_of_reconstructed_driver():
    rep = independence_statistic(THREE, 1, 5.0, 200, McConfig(n_paths=100, seed=9))
    assert rep.passed, rep.z_scores
