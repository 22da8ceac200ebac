import numpy as np
from conftest import smooth_control, smooth_direction
from numpy.testing import assert_allclose

from bblab.adjoint import (
    coercivity_probe,
    compute_fg,
    derivative_check,
    first_derivative,
    hessian_form,
    linearized_state,
    principal_eigenvalue,
    second_order_state,
    solve_switch,
)
from bblab.grid import Control, ScalarField
from bblab.models import ModelRef, ProblemSpec
from bblab.state import solve_state


def test_switch_is_positive_for_logistic(grid16, logistic):
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = Control(grid16, rng.random(grid16.shape))
        theta = solve_state(logistic, m)
        assert solve_switch(logistic, m, theta).min_value > 0


def test_first_derivative_matches_finite_differences(grid16, logistic):
    m = smooth_control(grid16)
    h = smooth_direction(grid16)
    report = derivative_check(logistic, m, h, [1e-2, 1e-3, 1e-4])
    assert report.first_rel_err[-1] < 1e-3
    assert report.first_order_rate > 0.9
    rows = report.rows()
    assert [row["t"] for row in rows if row["order"] == 1] == [1e-2, 1e-3, 1e-4]
    assert len(rows) == 6


def test_second_derivative_matches_central_difference(grid16, logistic):
    report = derivative_check(logistic, smooth_control(grid16), smooth_direction(grid16), [1e-2])
    assert report.second_rel_err[0] < 1e-2


def test_penalized_derivative_subtracts_cost(grid16):
    spec = ProblemSpec(mode="penalized", c=0.1)
    m = smooth_control(grid16)
    theta = solve_state(spec, m)
    eta = solve_switch(spec, m, theta)
    ones = ScalarField.constant(grid16, 1.0)
    assert_allclose(first_derivative(spec, eta, ones), eta.eta.integral() - 0.1)
    assert_allclose(eta.free_boundary_unknown().values, eta.eta.values - 0.1)


def test_switch_pairs_with_linearized_state(grid16, logistic):
    m = smooth_control(grid16)
    theta = solve_state(logistic, m)
    eta = solve_switch(logistic, m, theta)
    h = smooth_direction(grid16)
    dtheta = linearized_state(logistic, m, theta, h)
    # d/dt int e^theta = int e^theta theta_dot
    expected = float(np.sum(np.exp(theta.variable()).reshape(-1) * dtheta) * grid16.cell_volume)
    assert_allclose(first_derivative(logistic, eta, h), expected, rtol=1e-9)


def test_hessian_form_is_symmetric(grid16, logistic):
    m = smooth_control(grid16)
    theta = solve_state(logistic, m)
    eta = solve_switch(logistic, m, theta)
    rng = np.random.default_rng(3)
    h1 = ScalarField(grid16, rng.normal(size=grid16.shape))
    h2 = ScalarField(grid16, rng.normal(size=grid16.shape))
    q12 = hessian_form(logistic, m, theta, eta, h1, h2)
    q21 = hessian_form(logistic, m, theta, eta, h2, h1)
    assert_allclose(q12, q21, rtol=1e-10)


def test_principal_eigenvalue_at_constant_state(grid16, logistic):
    m = Control.constant(grid16, 0.5)
    theta = solve_state(logistic, m)
    assert_allclose(principal_eigenvalue(logistic, m, theta), 0.5, rtol=1e-6)


def test_fg_sum_for_bilinear_model(grid16):
    spec = ProblemSpec(mu=0.5)
    mask = np.zeros(grid16.shape, dtype=bool)
    mask[4:10, 3:12] = True
    m = Control.from_mask(grid16, mask, 0.3)
    theta = solve_state(spec, m)
    eta = solve_switch(spec, m, theta)
    pair = compute_fg(spec, m, theta, eta)
    assert_allclose(pair.f.values + pair.g.values, 2 * eta.eta.values / 0.5, atol=1e-12)
    assert pair.min_sum > 0


def test_fg_vanishing_sum_for_additive_model(grid16):
    spec = ProblemSpec(nonlinearity=ModelRef(name="linear_interaction"), m0=0.4)
    m = Control.constant(grid16, 0.4)
    theta = solve_state(spec, m)
    eta = solve_switch(spec, m, theta)
    pair = compute_fg(spec, m, theta, eta)
    assert_allclose(pair.f.values + pair.g.values, 0.0, atol=1e-12)


def test_hessian_matches_second_order_state(grid16, logistic):
    m = smooth_control(grid16)
    theta = solve_state(logistic, m)
    eta = solve_switch(logistic, m, theta)
    h = smooth_direction(grid16)
    dtheta = linearized_state(logistic, m, theta, h)
    ddtheta = second_order_state(logistic, m, theta, h)
    weight = np.exp(theta.variable()).reshape(-1)
    expected = float(np.sum(weight * (ddtheta + dtheta**2)) * grid16.cell_volume)
    assert_allclose(hessian_form(logistic, m, theta, eta, h, h), expected, rtol=1e-8)


def test_coercivity_probe_counts(grid16, logistic):
    m = smooth_control(grid16)
    theta = solve_state(logistic, m)
    report = coercivity_probe(logistic, m, theta, solve_switch(logistic, m, theta), 8, seed=1)
    assert report["samples"] == 8
    assert 0 <= report["violations"] <= 8
    half = Control.constant(grid16, 0.5)
    theta = solve_state(logistic, half)
    empty = coercivity_probe(logistic, half, theta, solve_switch(logistic, half, theta), 4)
    assert empty == {"samples": 0, "min": None, "violations": 0}


def test_relative_error_uses_the_pairing(grid16, logistic):
    m = smooth_control(grid16)
    eta = solve_switch(logistic, m, solve_state(logistic, m)).eta.values
    h0 = smooth_direction(grid16).values
    # int eta h = 0 up to rounding
    h = ScalarField(grid16, h0 - (np.sum(eta * h0) / np.sum(eta * eta)) * eta)
    report = derivative_check(logistic, m, h, [1e-2])
    assert abs(report.first_analytic) < 1e-12
    assert report.first_rel_err[0] > 1.0
