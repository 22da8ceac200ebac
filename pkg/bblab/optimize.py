"""Thresholding fixed point and projected-gradient baseline.

Both schemes work for the constrained problem (volume m0) and the penalized
problem (cost c per unit of control). The thresholding scheme iterates

    m_{k+1} = 1{eta_{m_k} > c_k}

with c_k chosen by the volume quantile (constrained) or equal to c
(penalized). Cycles are detected and reported; no damping is applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from bblab.adjoint import SwitchField, objective, solve_switch
from bblab.errors import (
    DegenerateInput,
    NegativeSolution,
    NoAdmissiblePerturbation,
    StepUnderflow,
)
from bblab.grid import Control, ScalarField, TorusGrid, neg_sobolev_norm
from bblab.models import OptimizeConfig, ProblemSpec, Tolerances
from bblab.registry import BILINEAR
from bblab.state import DiscreteModel, StateSolution, solve_state

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

BISECTION_STEPS = 64


@dataclass(frozen=True)
class OptimizationReport:
    final_control: Control
    objective_trace: list[float]
    threshold_trace: list[float]
    bang_bang_fraction: float
    fixed_point_residual: float
    converged: bool
    iterations: int
    stop_reason: str
    monotone_violations: list[int] = field(default_factory=list)
    final_state: StateSolution | None = field(default=None, repr=False)
    final_switch: SwitchField | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "objective_trace": list(self.objective_trace),
            "threshold_trace": list(self.threshold_trace),
            "bang_bang_fraction": self.bang_bang_fraction,
            "fixed_point_residual": self.fixed_point_residual,
            "converged": self.converged,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "monotone_violations": list(self.monotone_violations),
            "volume": self.final_control.volume(),
        }


def selection_count(grid: TorusGrid, m0: float) -> int:
    return int(np.floor(m0 * grid.size + 0.5))


def _top_cells(values: Array, count: int) -> tuple[Array, float]:
    """Mask of the `count` largest values; ties go to the smaller flat index."""
    flat = values.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:count]] = True
    level = float(flat[order[count - 1]]) if count > 0 else float(flat.max())
    return mask.reshape(values.shape), level


def threshold_step(eta: SwitchField, spec: ProblemSpec) -> tuple[Control, float]:
    """One thresholding step; returns the new control and the level c_k used."""
    grid = eta.eta.grid
    values = eta.eta.values
    if spec.mode == "constrained":
        mask, level = _top_cells(values, selection_count(grid, spec.m0))
        return Control.from_mask(grid, mask, spec.m0), level
    level = float(spec.c)
    return Control.from_mask(grid, values > level), level


def interface_level(eta: SwitchField, spec: ProblemSpec) -> float:
    """Level of eta separating the selected cells from the rest.

    Constrained: midway between the smallest selected and the largest
    unselected value of eta. Penalized: c.
    """
    if spec.mode == "penalized":
        return float(spec.c)
    flat = np.sort(eta.eta.values.reshape(-1))[::-1]
    count = selection_count(eta.eta.grid, spec.m0)
    if count <= 0:
        return float(flat[0])
    if count >= flat.size:
        return float(flat[-1])
    return 0.5 * float(flat[count - 1] + flat[count])


def _with_interface(switch: SwitchField | None, spec: ProblemSpec) -> SwitchField | None:
    if switch is None:
        return None
    return replace(switch, threshold_shift=interface_level(switch, spec))


def certify_bang_bang(m: ScalarField, tol: float = 1e-6) -> float:
    """Fraction of cells with value strictly between tol and 1 - tol."""
    if not 0.0 < tol < 0.5:
        raise DegenerateInput("tol must lie in (0, 0.5)")
    v = m.values
    return float(np.mean((v > tol) & (v < 1.0 - tol)))


def project_volume(v: Array, m0: float) -> tuple[Array, float]:
    """Euclidean projection onto {0 <= m <= 1, mean m = m0}: clip(v + s) with s by bisection."""
    lo, hi = -float(v.max()), 1.0 - float(v.min())
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if np.clip(v + mid, 0.0, 1.0).mean() < m0:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    return np.clip(v + s, 0.0, 1.0), s


def rounding_pass(m: Control, spec: ProblemSpec) -> Control:
    """Snap a relaxed control to a bang-bang one (volume-preserving when constrained)."""
    if spec.mode == "constrained":
        mask, _ = _top_cells(m.values, selection_count(m.grid, spec.m0))
        return Control.from_mask(m.grid, mask, spec.m0)
    return Control.from_mask(m.grid, m.values >= 0.5)


class _Evaluator:
    """State, switch and objective for a control, warm-started from the previous state."""

    def __init__(self, spec: ProblemSpec, tolerances: Tolerances):
        self.spec = spec
        self.tolerances = tolerances
        self.state: StateSolution | None = None

    def __call__(self, m: Control) -> tuple[StateSolution | None, SwitchField, float]:
        model = DiscreteModel(self.spec, m.grid)
        if model.coupling == BILINEAR and float(m.values.max()) <= 0.0:
            return None, *self._extinct(model, m)
        init = self.state.field if self.state else None
        state = solve_state(self.spec, m, init=init, tolerances=self.tolerances)
        switch = solve_switch(self.spec, m, state, self.tolerances)
        self.state = state
        return state, switch, objective(self.spec, m, state)

    def _extinct(self, model: DiscreteModel, m: Control) -> tuple[SwitchField, float]:
        with np.errstate(divide="ignore"):
            density = model.weights * model.objective_fn.psi(np.zeros(m.grid.size))
        if not np.all(np.isfinite(density)):
            raise NegativeSolution("Objective undefined on the trivial state")
        zero = ScalarField(m.grid, np.zeros(m.grid.shape))
        shift = self.spec.c if self.spec.mode == "penalized" else None
        self.state = None
        return SwitchField(zero, 0.0, shift), float(np.sum(density) * m.grid.cell_volume)


def _monotone_violations(trace: list[float], slack: float) -> list[int]:
    return [k + 1 for k in range(len(trace) - 1) if trace[k + 1] < trace[k] - slack]


def run_thresholding(
    spec: ProblemSpec,
    config: OptimizeConfig,
    m_init: Control,
    tolerances: Tolerances | None = None,
) -> OptimizationReport:
    tolerances = tolerances or Tolerances()
    evaluate = _Evaluator(spec, tolerances)
    m = m_init
    previous: Array | None = None
    objective_trace: list[float] = []
    threshold_trace: list[float] = []
    flipped = 1.0
    stop_reason = "max_iter"
    state, switch = None, None
    evaluated = m
    iterations = 0

    for k in range(1, config.max_iter + 1):
        iterations = k
        evaluated = m
        state, switch, value = evaluate(m)
        objective_trace.append(value)
        m_next, level = threshold_step(switch, spec)
        threshold_trace.append(level)
        flipped = float(np.mean(m_next.values != m.values))
        logger.info("thresholding it=%d J=%.12g c=%.6g flipped=%.6f", k, value, level, flipped)
        if flipped <= config.fixed_point_tol:
            stop_reason = "fixed_point"
            break
        if previous is not None and np.array_equal(m_next.values, previous):
            stop_reason = "cycle"
            logger.warning("thresholding: 2-cycle detected at iteration %d", k)
            break
        previous = m.values
        m = m_next

    violations = _monotone_violations(objective_trace, config.objective_slack)
    if violations:
        logger.warning("thresholding: objective decreased at steps %s", violations)
    converged = stop_reason == "fixed_point" and not violations
    # final state and switch belong to the last evaluated control
    return OptimizationReport(
        final_control=evaluated,
        objective_trace=objective_trace,
        threshold_trace=threshold_trace,
        bang_bang_fraction=certify_bang_bang(evaluated, tolerances.bang_bang),
        fixed_point_residual=flipped,
        converged=converged,
        iterations=iterations,
        stop_reason=stop_reason,
        monotone_violations=violations,
        final_state=state,
        final_switch=_with_interface(switch, spec),
    )


def run_projected_gradient(
    spec: ProblemSpec,
    config: OptimizeConfig,
    m_init: Control,
    tolerances: Tolerances | None = None,
) -> OptimizationReport:
    tolerances = tolerances or Tolerances()
    evaluate = _Evaluator(spec, tolerances)
    grid = m_init.grid

    def project(v: Array) -> tuple[Array, float]:
        if spec.mode == "constrained":
            return project_volume(v, spec.m0)
        return np.clip(v, 0.0, 1.0), 0.0

    values, shift = project(m_init.values)
    m = Control(grid, values, spec.m0)
    state, switch, value = evaluate(m)
    objective_trace = [value]
    threshold_trace = [shift]
    step = config.gradient_step
    floor = config.gradient_step * 1e-12
    change = np.inf
    stop_reason = "max_iter"
    iterations = 0

    for k in range(1, config.max_iter + 1):
        iterations = k
        ascent = switch.eta.values - spec.penalty
        while True:
            candidate, shift = project(m.values + step * ascent)
            m_new = Control(grid, candidate, spec.m0)
            new_state, new_switch, new_value = evaluate(m_new)
            if new_value >= value - 1e-13 * max(1.0, abs(value)):
                break
            step *= 0.5
            evaluate.state = state
            if step < floor:
                raise StepUnderflow(f"Projected-gradient step fell below {floor:.3e}", iteration=k)
        change = float(np.max(np.abs(candidate - m.values)))
        m, state, switch, value = m_new, new_state, new_switch, new_value
        objective_trace.append(value)
        threshold_trace.append(shift)
        logger.debug(
            "projected gradient it=%d J=%.12g step=%.3g change=%.3e", k, value, step, change
        )
        if change < config.pg_tol:
            stop_reason = "fixed_point"
            break

    logger.info(
        "projected gradient stopped (%s) after %d iterations, J=%.12g",
        stop_reason,
        iterations,
        value,
    )
    return OptimizationReport(
        final_control=m,
        objective_trace=objective_trace,
        threshold_trace=threshold_trace,
        bang_bang_fraction=certify_bang_bang(m, tolerances.bang_bang),
        fixed_point_residual=change,
        converged=stop_reason == "fixed_point",
        iterations=iterations,
        stop_reason=stop_reason,
        final_state=state,
        final_switch=_with_interface(switch, spec),
    )


def run_optimization(
    spec: ProblemSpec,
    config: OptimizeConfig,
    m_init: Control,
    tolerances: Tolerances | None = None,
) -> OptimizationReport:
    if config.scheme == "thresholding":
        return run_thresholding(spec, config, m_init, tolerances)
    return run_projected_gradient(spec, config, m_init, tolerances)


def _interface_cells(mask: NDArray[np.bool_]) -> Array:
    """Flat indices of cells with a neighbour in the other phase."""
    edge = np.zeros(mask.shape, dtype=bool)
    for axis in range(mask.ndim):
        for step in (1, -1):
            edge |= mask != np.roll(mask, step, axis)
    return np.flatnonzero(edge)


def second_order_check(
    spec: ProblemSpec,
    m_star: Control,
    eta: SwitchField,
    samples: int = 200,
    r0: float = 0.05,
    seed: int = 0,
) -> dict:
    """Empirical lower bound of -<grad, m - m*> / ||m - m*||^2_{W^{-1,2}}.

    Perturbations are supported in balls of radius at most r0 centred on the
    interface: volume-preserving swaps when constrained, flips when penalized.
    """
    if r0 > 0.1:
        raise DegenerateInput("r0 must not exceed 0.1")
    grid = m_star.grid
    rng = np.random.default_rng(seed)
    mask = m_star.mask()
    gradient = eta.eta.values - spec.penalty
    candidates = _interface_cells(mask)
    if candidates.size == 0:
        raise NoAdmissiblePerturbation("The control has no interface to perturb")
    flat_mask = mask.reshape(-1)
    rhos = []
    for _ in range(samples):
        center = grid.center_of(np.unravel_index(rng.choice(candidates), grid.shape))
        radius = rng.uniform(2.0 * grid.h, r0)
        ball = (grid.distance(center) < radius).reshape(-1)
        perturbation = np.zeros(grid.size)
        if spec.mode == "constrained":
            inside = np.flatnonzero(ball & flat_mask)
            outside = np.flatnonzero(ball & ~flat_mask)
            if inside.size == 0 or outside.size == 0:
                raise NoAdmissiblePerturbation(
                    "Ball misses one of the phases", center=center.tolist()
                )
            count = int(rng.integers(1, min(inside.size, outside.size) + 1))
            perturbation[rng.choice(outside, count, replace=False)] = 1.0
            perturbation[rng.choice(inside, count, replace=False)] = -1.0
        else:
            cells = np.flatnonzero(ball)
            count = int(rng.integers(1, cells.size + 1))
            chosen = rng.choice(cells, count, replace=False)
            perturbation[chosen] = 1.0 - 2.0 * flat_mask[chosen]
        pert = ScalarField(grid, perturbation.reshape(grid.shape))
        pairing = float(np.sum(gradient.reshape(-1) * perturbation) * grid.cell_volume)
        rhos.append(-pairing / neg_sobolev_norm(pert, 1).value ** 2)
    rhos_arr = np.asarray(rhos)
    report = {
        "samples": int(rhos_arr.size),
        "r0": r0,
        "min_rho": float(rhos_arr.min()),
        "median_rho": float(np.median(rhos_arr)),
        "negative": int(np.sum(rhos_arr < 0)),
    }
    logger.info(
        "second-order check: min rho %.6g over %d samples", report["min_rho"], report["samples"]
    )
    return report
