import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bblab.adjoint import SwitchField
from bblab.errors import DegenerateInput, NoAdmissiblePerturbation
from bblab.geometry import trace_level_curves
from bblab.grid import Control, ScalarField, TorusGrid
from bblab.models import ExperimentConfig, GridConfig, ModelRef, OptimizeConfig, ProblemSpec
from bblab.optimize import (
    certify_bang_bang,
    interface_level,
    project_volume,
    rounding_pass,
    run_optimization,
    second_order_check,
    selection_count,
    threshold_step,
)
from bblab.pipeline import build_initial_control


def _disk_start(spec: ProblemSpec, n: int) -> Control:
    config = ExperimentConfig(spec=spec, grid=GridConfig(n=n), initial_control={"kind": "disk"})
    return build_initial_control(config, TorusGrid(2, n))


def test_selection_count_rounds_half_up():
    grid = TorusGrid(2, 16)
    assert selection_count(grid, 0.3) == 77
    assert selection_count(grid, 0.5) == 128


def test_threshold_step_constrained_breaks_ties_by_index(grid16, logistic):
    eta = SwitchField(ScalarField.constant(grid16, 1.0), 1.0)
    m, level = threshold_step(eta, logistic)
    assert m.mask().sum() == selection_count(grid16, 0.3)
    assert m.mask().reshape(-1)[: selection_count(grid16, 0.3)].all()
    assert level == 1.0


def test_threshold_step_penalized(grid16):
    spec = ProblemSpec(mode="penalized", c=0.5)
    x, _ = grid16.coordinates()
    eta = SwitchField(ScalarField(grid16, x), 0.0, 0.5)
    m, level = threshold_step(eta, spec)
    assert level == 0.5
    assert_array_equal(m.mask(), x > 0.5)


def test_certify_bang_bang(grid16):
    values = np.zeros(grid16.shape)
    values[0, :4] = 0.5
    assert certify_bang_bang(Control(grid16, values)) == 4 / 256
    with pytest.raises(DegenerateInput):
        certify_bang_bang(Control(grid16, values), tol=0.7)


def test_project_volume():
    v = np.random.default_rng(4).normal(0.5, 0.6, size=(16, 16))
    projected, _ = project_volume(v, 0.3)
    assert projected.min() >= 0 and projected.max() <= 1
    assert_allclose(projected.mean(), 0.3, atol=1e-12)


def test_rounding_pass_keeps_volume(grid16, logistic):
    values = np.random.default_rng(5).random(grid16.shape)
    rounded = rounding_pass(Control(grid16, values), logistic)
    assert certify_bang_bang(rounded) == 0
    assert rounded.mask().sum() == selection_count(grid16, 0.3)
    # the largest values are the ones kept
    assert values[rounded.mask()].min() >= values[~rounded.mask()].max()


def test_thresholding_reaches_a_bang_bang_fixed_point(logistic):
    report = run_optimization(logistic, OptimizeConfig(), _disk_start(logistic, 16))
    assert report.stop_reason in {"fixed_point", "cycle"}
    assert report.bang_bang_fraction == 0
    assert report.final_control.volume() == selection_count(TorusGrid(2, 16), 0.3) / 256
    assert len(report.objective_trace) == report.iterations
    if report.stop_reason == "fixed_point":
        assert report.fixed_point_residual == 0
        again = run_optimization(logistic, OptimizeConfig(), report.final_control)
        assert again.iterations == 1


def test_thresholding_huge_cost_empties_the_control():
    spec = ProblemSpec(mode="penalized", c=1e6)
    report = run_optimization(spec, OptimizeConfig(), _disk_start(spec, 16))
    assert report.final_control.volume() == 0
    assert report.final_state is None
    assert report.final_switch.min_value == 0
    assert report.converged
    assert report.objective_trace[-1] > report.objective_trace[0]


def test_projected_gradient_keeps_constant_optimum(grid16):
    spec = ProblemSpec(nonlinearity=ModelRef(name="linear_interaction"), m0=0.4)
    report = run_optimization(
        spec, OptimizeConfig(scheme="projected_gradient"), Control.constant(grid16, 0.4)
    )
    assert report.converged
    assert report.iterations == 1
    assert_allclose(report.final_control.values, 0.4, atol=1e-9)
    assert report.bang_bang_fraction == 1.0


def test_projected_gradient_objective_never_decreases(grid16, logistic):
    m = Control(grid16, np.random.default_rng(6).random(grid16.shape))
    report = run_optimization(logistic, OptimizeConfig(scheme="projected_gradient", max_iter=5), m)
    trace = report.objective_trace
    assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))
    assert_allclose(report.final_control.volume(), 0.3, atol=1e-12)


def test_second_order_check_at_a_fixed_point(logistic):
    report = run_optimization(logistic, OptimizeConfig(), _disk_start(logistic, 16))
    if report.stop_reason != "fixed_point":
        pytest.skip("thresholding cycled")
    check = second_order_check(
        logistic, report.final_control, report.final_switch, samples=20, r0=0.1, seed=1
    )
    assert check["samples"] == 20
    # swaps move mass from cells above the level to cells below it
    assert check["min_rho"] >= -1e-12
    assert check["negative"] == 0


def test_second_order_check_input_errors(grid16, logistic):
    eta = SwitchField(ScalarField.constant(grid16, 1.0), 1.0)
    with pytest.raises(DegenerateInput):
        second_order_check(logistic, Control.constant(grid16, 0.0), eta, r0=0.2)
    with pytest.raises(NoAdmissiblePerturbation):
        second_order_check(logistic, Control.constant(grid16, 0.0), eta)


def test_interface_level(grid16):
    switch = SwitchField(ScalarField(grid16, np.arange(256.0).reshape(16, 16)), 0.0)
    assert interface_level(switch, ProblemSpec(m0=0.25)) == 191.5
    assert interface_level(switch, ProblemSpec(mode="penalized", c=0.2)) == 0.2


def test_final_switch_carries_the_interface_level(logistic):
    report = run_optimization(logistic, OptimizeConfig(), _disk_start(logistic, 16))
    switch = report.final_switch
    eta = switch.eta.values
    assert eta.min() <= switch.threshold_shift <= eta.max()
    if report.stop_reason == "fixed_point":
        mask = report.final_control.mask()
        assert eta[mask].min() >= switch.threshold_shift >= eta[~mask].max()
        assert trace_level_curves(switch.free_boundary_unknown(), 0.0).count >= 1
