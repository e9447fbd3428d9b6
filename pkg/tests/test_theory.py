import math

import numpy as np
import pytest

from adapter import AdapterConfig, InitScaleMode, ScalingRule
from numerics import DimensionError, DomainError, RngStream, zeros
from theory import (
    MomentEstimate,
    StatisticKind,
    TrajectoryOracleInput,
    analytic_first_order_trajectory,
    expectation_identity,
    finite_diff_check,
    gradient_check_suite,
    init_gradient_norm_experiment,
    input_gradient_scaling_experiment,
    loglog_slope_fit,
    moment_scaling_experiment,
    random_oracle_input,
    ranks_for_rule,
    relative_floor,
    remainder_order_sweep,
    simulate_sgd_trajectory,
    step_one_suite,
    summarize_slope,
    trajectory_residual,
)

RANKS = [4, 16, 64, 256, 1024]


def rule(text, alpha=1.0):
    return ScalingRule.parse(text, alpha)


def slope_of(estimates):
    return summarize_slope(estimates).slope


def test_first_step_is_exact():
    rules = [rule("lora"), rule("rslora"), rule("power:0.25"), rule("power:2")]
    errors = step_one_suite(50, rules, RngStream(0))
    assert len(errors) == 50
    assert max(errors) <= 1e-13


def test_zero_steps_predicts_initial_state():
    config = AdapterConfig(3, rule("lora"))
    inp = TrajectoryOracleInput(config, 2, 4, 0.1, [], [])
    a0 = np.ones((3, 2))
    pred_b, pred_a = analytic_first_order_trajectory(inp, a0)
    assert np.array_equal(pred_b, zeros(4, 3))
    assert np.array_equal(pred_a, a0)


def test_oracle_input_validation():
    config = AdapterConfig(3, rule("lora"))
    with pytest.raises(DomainError):
        TrajectoryOracleInput(config, 2, 4, 0.1, [np.ones((2, 1))], [])
    with pytest.raises(DimensionError):
        TrajectoryOracleInput(config, 2, 4, 0.1, [np.ones((3, 1))], [np.ones((4, 1))])
    inp = TrajectoryOracleInput(config, 2, 4, 0.1, [], [])
    with pytest.raises(DimensionError):
        simulate_sgd_trajectory(inp, np.ones((2, 2)))


def test_remainder_is_third_order_in_gamma():
    # Halving alpha halves gamma; the exact-minus-first-order residual is cubic in gamma.
    for k in range(20):
        case = RngStream(3).derive("remainder", k)
        gen = case.generator()
        d1, d2 = (int(d) for d in gen.integers(1, 9, size=2))
        rank = int(gen.integers(1, 17))
        config = AdapterConfig(rank, rule("lora" if k % 2 else "rslora"))
        base, a0 = random_oracle_input(config, d1, d2, 1e-3, 10, case)
        residuals = []
        for alpha in (1.0, 0.5):
            scaled = AdapterConfig(rank, ScalingRule(config.rule.variant, alpha))
            inp = TrajectoryOracleInput(scaled, d1, d2, 1e-3, base.inputs, base.probe_grads)
            residuals.append(trajectory_residual(inp, a0))
        (abs_hi, rel_hi), (abs_lo, rel_lo) = residuals
        assert 7.0 <= abs_hi / abs_lo <= 9.0
        assert 3.0 <= rel_hi / rel_lo <= 5.0


def test_relative_remainder_slope():
    config = AdapterConfig(8, rule("rslora"))
    fit = remainder_order_sweep(config, 4, 6, 1e-3, 10, [1.0, 0.5, 0.25, 0.125], RngStream(5))
    assert fit.slope == pytest.approx(2.0, abs=0.1)
    assert fit.r_squared > 0.99


@pytest.mark.parametrize("rank,n_seeds", [(16, 4096), (256, 512)])
def test_expectation_identity(rank, n_seeds):
    mean, error = expectation_identity(rank, 2, None, n_seeds, RngStream(0))
    assert mean.shape == (2, 2)
    assert error <= 0.02


def test_output_moment_slopes():
    assert abs(slope_of(moment_scaling_experiment(rule("rslora"), RANKS, n_seeds=256))) <= 0.15
    assert -2.2 <= slope_of(moment_scaling_experiment(rule("lora"), RANKS)) <= -1.8
    assert 0.8 <= slope_of(moment_scaling_experiment(rule("power:0.25"), RANKS)) <= 1.2
    steep = rule("power:2")
    assert slope_of(moment_scaling_experiment(steep, ranks_for_rule(steep, RANKS))) <= -4.0


def test_input_gradient_slopes():
    assert abs(slope_of(input_gradient_scaling_experiment(rule("rslora"), RANKS, n_seeds=256))) <= 0.2
    assert -2.3 <= slope_of(input_gradient_scaling_experiment(rule("lora"), RANKS)) <= -1.7


def test_moment_estimates_are_reproducible_and_threadable():
    serial = moment_scaling_experiment(rule("rslora"), [4, 16], n_seeds=8, seed=9)
    threaded = moment_scaling_experiment(rule("rslora"), [4, 16], n_seeds=8, seed=9, threads=4)
    assert serial == threaded
    assert serial[0].statistic is StatisticKind.OUTPUT_MOMENT
    assert serial[0].n_seeds == 8
    assert serial[0].stderr > 0


def test_zero_steps_gives_zero_moment():
    estimates = moment_scaling_experiment(rule("rslora"), [4, 16], n_steps=0, n_seeds=4)
    assert all(e.estimate == 0.0 and e.stderr == 0.0 for e in estimates)


def test_odd_moment_needs_nonzero_input_mean():
    with pytest.raises(DomainError):
        moment_scaling_experiment(rule("rslora"), [4, 16], m=3, n_seeds=4)
    estimates = moment_scaling_experiment(rule("rslora"), [4, 16], m=3, n_seeds=4, input_mean=1.0)
    assert all(e.m == 3 for e in estimates)


def test_sweep_preconditions():
    with pytest.raises(DomainError):
        moment_scaling_experiment(rule("rslora"), [16, 4], n_seeds=4)
    with pytest.raises(DomainError):
        moment_scaling_experiment(rule("none"), [4, 16], n_seeds=4)


def test_init_gradient_norm_slopes():
    assert abs(slope_of(init_gradient_norm_experiment(rule("rslora"), [4, 16, 64, 256]))) <= 0.1
    lora = slope_of(init_gradient_norm_experiment(rule("lora"), [4, 16, 64, 256]))
    assert lora == pytest.approx(-0.5, abs=0.1)


def test_init_only_scaling_flattens_gradients_without_a_factor():
    estimates = init_gradient_norm_experiment(
        rule("none", 16.0), [4, 16, 64, 256], init_scale_mode=InitScaleMode.INIT_ONLY_SQRT
    )
    norms = [e.estimate for e in estimates]
    assert max(norms) / min(norms) <= 1.2


def test_ranks_for_steep_rules():
    assert ranks_for_rule(rule("power:2"), RANKS) == [4, 16, 64]
    assert ranks_for_rule(rule("rslora"), RANKS) == RANKS


def test_loglog_fit_recovers_power_law():
    points = [(r, 3.0 * r**-1.5) for r in RANKS]
    fit = loglog_slope_fit(points)
    assert fit.slope == pytest.approx(-1.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)


def test_loglog_fit_of_constant_is_flat():
    fit = loglog_slope_fit([(4, 2.0), (16, 2.0), (64, 2.0)])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert fit.r_squared == 1.0


@pytest.mark.parametrize(
    "points",
    [[(4, 1.0)], [(4, 1.0), (16, 0.0)], [(4, 1.0), (-1, 2.0)], [(4, 1.0), (4, 2.0)]],
)
def test_loglog_fit_rejects_bad_points(points):
    with pytest.raises(DomainError):
        loglog_slope_fit(points)


def test_summarize_slope_row():
    estimates = [
        MomentEstimate(r, rule("lora"), 2, StatisticKind.OUTPUT_MOMENT, 1.0 / r**2, 0.0, 1)
        for r in (4, 16, 64)
    ]
    summary = summarize_slope(estimates)
    assert summary.rule == "lora"
    assert summary.nu == 1.0
    assert summary.statistic == "output-moment"
    assert summary.n_points == 3
    assert summary.slope == pytest.approx(-2.0)


def test_finite_diff_check_on_quadratic():
    p = np.array([[1.0, -2.0], [0.5, 3.0]])
    error = finite_diff_check(lambda q: float(np.sum(q**2)), p, 2.0 * p, 1e-5)
    assert error <= 1e-8


def test_finite_diff_check_rejects_bad_arguments():
    p = np.ones((2, 2))
    with pytest.raises(DomainError):
        finite_diff_check(lambda q: 0.0, p, p, 0.0)
    with pytest.raises(DimensionError):
        finite_diff_check(lambda q: 0.0, p, np.ones((2, 3)), 1e-5)


def test_gradient_check_suite():
    cases = gradient_check_suite(200, RngStream(0))
    assert len(cases) == 200
    assert max(c.error for c in cases) <= 1e-5


def test_scaled_floor_ignores_near_zero_entries_the_plain_metric_flags():
    param = np.array([[1.0, 0.0]])
    # d/dp of p00^2 is [2, 0]; the second entry is off by 1e-9 in absolute terms
    analytic = np.array([[2.0, 1e-9]])

    def square(p):
        return float(p[0, 0] ** 2)

    assert finite_diff_check(square, param, analytic, 1e-5) > 0.5
    assert finite_diff_check(square, param, analytic, 1e-5, relative_floor(analytic)) < 1e-6
    assert relative_floor(analytic) == pytest.approx(0.02)
