"""Forward solvers for the state equation.

Bilinear models are solved either for the population Theta,

    -mu Lap Theta = m Theta + B(Theta),

or for its logarithm theta, where the Hamilton-Jacobi operator
-mu Lap theta - mu |grad theta|^2 is discretized as -mu e^{-theta} Lap_h e^{theta}.
Additive models solve -mu Lap y = m + R(y) directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.linalg import splu, spsolve

from bblab.errors import NegativeSolution, NonConvergence, SingularSystem
from bblab.grid import (
    Control,
    ScalarField,
    TorusGrid,
    laplacian_matrix,
    laplacian_values,
    neighbor_pairs,
)
from bblab.models import ClauseResult, ComparisonReport, ProblemSpec, Tolerances, ValidationReport
from bblab.registry import (
    ADDITIVE,
    BILINEAR,
    Nonlinearity,
    Objective,
    get_nonlinearity,
    get_objective,
)

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

ARMIJO_FLOOR = 2.0**-20
MONOTONE_MAX_SWEEPS = 5000


@dataclass(frozen=True)
class StateSolution:
    field: ScalarField
    residual_norm: float
    iterations: int
    form: str
    method: str = "newton"

    def variable(self) -> Array:
        """State in the variable the derivative machinery works with (theta or y)."""
        if self.form == "bigTheta":
            return np.log(self.field.values)
        return np.asarray(self.field.values)


class DiscreteModel:
    """Discrete residual, Jacobian and objective of one (spec, grid) pair.

    The unknown ``u`` is theta for bilinear models and y for additive ones. In
    both cases the residual F(u, m) satisfies dF/dm = -I, so the derivative
    formulas of the adjoint module apply uniformly.
    """

    def __init__(self, spec: ProblemSpec, grid: TorusGrid):
        self.spec = spec
        self.grid = grid
        self.mu = float(spec.mu)
        self.nonlinearity: Nonlinearity = get_nonlinearity(
            spec.nonlinearity.name, spec.nonlinearity.params
        )
        self.objective_fn: Objective = get_objective(spec.objective.name, spec.objective.params)
        self.weights = self.objective_fn.weights(grid.axes(), grid.shape).reshape(-1)
        self.rows, self.cols = neighbor_pairs(grid)
        self.scale = self.mu / grid.h**2

    @property
    def coupling(self) -> str:
        return self.nonlinearity.coupling

    @cached_property
    def minus_laplacian(self) -> sp.csr_matrix:
        return (-laplacian_matrix(self.grid)).tocsr()

    def _edge_weights(self, u: Array) -> Array:
        return np.exp(u[self.cols] - u[self.rows])

    # residual and derivatives in u

    def residual(self, u: Array, m: Array) -> Array:
        if self.coupling == BILINEAR:
            hj = -self.scale * np.bincount(
                self.rows, np.expm1(u[self.cols] - u[self.rows]), minlength=u.size
            )
            return hj - m - self.nonlinearity.q(u)
        lap = laplacian_values(u.reshape(self.grid.shape), self.grid.h).reshape(-1)
        return -self.mu * lap - self.nonlinearity.reaction(u) - m

    def jacobian(self, u: Array) -> sp.csr_matrix:
        n = u.size
        if self.coupling == BILINEAR:
            w = self.scale * self._edge_weights(u)
            off = sp.csr_matrix((-w, (self.rows, self.cols)), shape=(n, n))
            diag = np.bincount(self.rows, w, minlength=n) - self.nonlinearity.dq(u)
            return (off + sp.diags(diag)).tocsr()
        return (self.mu * self.minus_laplacian - sp.diags(self.nonlinearity.reaction_dp(u))).tocsr()

    def second_variation(self, u: Array, v1: Array, v2: Array) -> Array:
        """F''(u)[v1, v2], cellwise."""
        if self.coupling == BILINEAR:
            w = self.scale * self._edge_weights(u)
            dv1 = v1[self.cols] - v1[self.rows]
            dv2 = v2[self.cols] - v2[self.rows]
            hj = -np.bincount(self.rows, w * dv1 * dv2, minlength=u.size)
            return hj - self.nonlinearity.d2q(u) * v1 * v2
        return -self.nonlinearity.reaction_dpp(u) * v1 * v2

    # objective integrand in u

    def j(self, u: Array) -> Array:
        if self.coupling == BILINEAR:
            return self.objective_fn.j(u, self.weights)
        return self.weights * self.objective_fn.psi(u)

    def dj(self, u: Array) -> Array:
        if self.coupling == BILINEAR:
            return self.objective_fn.dj(u, self.weights)
        return self.weights * self.objective_fn.psi_dp(u)

    def d2j(self, u: Array) -> Array:
        if self.coupling == BILINEAR:
            return self.objective_fn.d2j(u, self.weights)
        return self.weights * self.objective_fn.psi_dpp(u)

    def objective_value(self, u: Array, m: Array) -> float:
        vol = self.grid.cell_volume
        value = float(np.sum(self.j(u)) * vol)
        return value - self.spec.penalty * float(np.sum(m) * vol)

    # population form

    def population_residual(self, p: Array, m: Array) -> Array:
        lap = laplacian_values(p.reshape(self.grid.shape), self.grid.h).reshape(-1)
        return -self.mu * lap - m * p - self.nonlinearity.reaction(p)

    def population_jacobian(self, p: Array, m: Array) -> sp.csr_matrix:
        return (
            self.mu * self.minus_laplacian - sp.diags(m + self.nonlinearity.reaction_dp(p))
        ).tocsr()


def solve_linear(matrix: sp.spmatrix, rhs: Array, rel_tol: float = 1e-12) -> Array:
    """Sparse direct solve with a residual check."""
    try:
        x = spsolve(matrix.tocsc(), rhs)
    except RuntimeError as e:
        raise SingularSystem(f"Sparse factorization failed: {e}") from e
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SingularSystem("Linear solve produced non-finite values")
    scale = max(np.linalg.norm(rhs), 1e-300)
    rel = np.linalg.norm(matrix @ x - rhs) / scale
    if rel > max(rel_tol, 1e-12) * 1e3:
        raise SingularSystem(
            f"Linear solve residual {rel:.3e} above tolerance", relative_residual=rel
        )
    return x


def _rms_tolerance(grid: TorusGrid, tolerances: Tolerances) -> float:
    return tolerances.state_rms * np.sqrt(grid.size)


def _log_root(nl: Nonlinearity, level: float) -> float:
    """theta with level + Q(theta) = 0, by bisection (Q is decreasing)."""
    lo, hi = -40.0, 40.0
    f_lo = level + float(nl.q(np.array([lo]))[0])
    f_hi = level + float(nl.q(np.array([hi]))[0])
    if f_lo * f_hi > 0:
        return 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = level + float(nl.q(np.array([mid]))[0])
        if f_mid > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _additive_root(nl: Nonlinearity, level: float) -> float:
    """Largest y with level + R(y) = 0 (R eventually decreasing)."""
    hi = 1.0
    while level + float(nl.reaction(np.array([hi]))[0]) > 0 and hi < 1e8:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if level + float(nl.reaction(np.array([mid]))[0]) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bracketing_midpoint(model: DiscreteModel, m: Array) -> float:
    """Constant initial guess: midpoint of the constant sub/supersolution levels."""
    m_max = float(m.max())
    m_min = max(float(m.min()), 1e-3 * m_max)
    if model.coupling == ADDITIVE:
        nl = model.nonlinearity
        return 0.5 * (_additive_root(nl, m_min) + _additive_root(nl, m_max))
    p_lo = np.exp(_log_root(model.nonlinearity, m_min))
    p_hi = np.exp(_log_root(model.nonlinearity, m_max))
    return 0.5 * (p_lo + p_hi)


def _newton(residual, jacobian, x: Array, tol: float, max_iter: int, positive: bool = False):
    """Damped Newton with Armijo backtracking on the residual norm.

    Returns (x, norm, iterations, converged).
    """
    r = residual(x)
    norm = float(np.linalg.norm(r))
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return x, norm, it - 1, True
        try:
            dx = spsolve(jacobian(x).tocsc(), -r)
        except RuntimeError:
            logger.warning("Newton: singular Jacobian at iteration %d", it)
            return x, norm, it, False
        if not np.all(np.isfinite(dx)):
            return x, norm, it, False
        t = 1.0
        while t >= ARMIJO_FLOOR:
            trial = x + t * dx
            if not positive or np.all(trial > 0):
                r_trial = residual(trial)
                n_trial = float(np.linalg.norm(r_trial))
                if np.isfinite(n_trial) and n_trial <= (1.0 - 1e-4 * t) * norm:
                    break
            t *= 0.5
        else:
            logger.debug("Newton stalled at iteration %d (residual %.3e)", it, norm)
            return x, norm, it, False
        x, r, norm = trial, r_trial, n_trial
        logger.debug("Newton it=%d step=%.3g residual=%.3e", it, t, norm)
    return x, norm, max_iter, norm <= tol


def _monotone_sweeps(model: DiscreteModel, m: Array, tol: float) -> tuple[Array, int]:
    """Decreasing iteration from a constant supersolution.

    Solves (mu(-Lap) + K) v_{k+1} = K v_k + reaction terms; the iterates
    decrease monotonically to the maximal solution.
    """
    nl = model.nonlinearity
    m_max = float(m.max())
    if model.coupling == ADDITIVE:
        upper = _additive_root(nl, m_max) + 1.0

        def source(v):
            return m + nl.reaction(v)

        probe = np.linspace(0.0, upper, 257)
        lipschitz = float(np.max(np.abs(nl.reaction_dp(probe))))
    else:
        upper = 2.0 * np.exp(_log_root(nl, m_max)) + 1e-12

        def source(v):
            return m * v + nl.reaction(v)

        probe = np.linspace(0.0, upper, 257)
        lipschitz = m_max + float(np.max(np.abs(nl.reaction_dp(probe))))
    shift = lipschitz + 1.0
    system = (model.mu * model.minus_laplacian + shift * sp.identity(m.size)).tocsc()
    lu = splu(system)
    v = np.full(m.size, upper)
    for sweep in range(1, MONOTONE_MAX_SWEEPS + 1):
        v_new = lu.solve(shift * v + source(v))
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        if change < 1e-13 * max(1.0, upper) or (sweep % 50 == 0 and change < tol):
            break
    return v, sweep


def _polish(
    residual, jacobian, x: Array, norm: float, steps: int, positive: bool
) -> tuple[Array, float]:
    """Extra full Newton steps past the tolerance, kept only while the residual drops."""
    for _ in range(steps):
        try:
            trial = x + spsolve(jacobian(x).tocsc(), -residual(x))
        except RuntimeError:
            break
        if positive and np.any(trial <= 0):
            break
        n_trial = float(np.linalg.norm(residual(trial)))
        if not n_trial < norm:
            break
        x, norm = trial, n_trial
    return x, norm


def solve_state(
    spec: ProblemSpec,
    m: Control,
    init: ScalarField | None = None,
    tolerances: Tolerances | None = None,
    polish: int = 0,
) -> StateSolution:
    tolerances = tolerances or Tolerances()
    grid = m.grid
    model = DiscreteModel(spec, grid)
    mv = m.flat()
    tol = _rms_tolerance(grid, tolerances)

    if model.coupling == BILINEAR and float(mv.max()) <= 0.0:
        raise NegativeSolution("Control vanishes identically; only the trivial state exists")

    positive = False
    if model.coupling == ADDITIVE:
        form = "y"
        residual, jacobian = (lambda u: model.residual(u, mv)), model.jacobian
        x0 = init.flat() if init is not None else np.full(grid.size, bracketing_midpoint(model, mv))
    elif spec.form == "theta":
        form = "theta"
        residual, jacobian = (lambda u: model.residual(u, mv)), model.jacobian
        if init is not None:
            x0 = init.flat()
        else:
            x0 = np.full(grid.size, np.log(bracketing_midpoint(model, mv)))
    else:
        form, positive = "bigTheta", True
        residual = lambda p: model.population_residual(p, mv)  # noqa: E731
        jacobian = lambda p: model.population_jacobian(p, mv)  # noqa: E731
        x0 = init.flat() if init is not None else np.full(grid.size, bracketing_midpoint(model, mv))
        if np.any(x0 <= 0):
            raise NegativeSolution("Initial population must be positive")

    x, norm, its, ok = _newton(residual, jacobian, x0, tol, tolerances.newton_max_iter, positive)
    method = "newton"
    if not ok:
        logger.warning("Newton did not converge (residual %.3e); monotone fallback", norm)
        v, sweeps = _monotone_sweeps(model, mv, tol)
        if model.coupling == BILINEAR:
            if np.any(v <= 0):
                raise NegativeSolution("Population iterate lost positivity and cannot be bracketed")
            if form == "theta":
                v = np.log(v)
        x, norm, its2, ok = _newton(
            residual, jacobian, v, tol, tolerances.newton_max_iter, positive
        )
        its, method = its + sweeps + its2, "monotone"

    if not ok:
        raise NonConvergence(
            f"State solve stopped with residual {norm:.3e} above tolerance {tol:.3e}",
            residual=norm,
            iterations=its,
        )
    if polish:
        x, norm = _polish(residual, jacobian, x, norm, polish, positive)
    logger.debug("state solved form=%s method=%s its=%d residual=%.3e", form, method, its, norm)
    return StateSolution(
        field=ScalarField(grid, x.reshape(grid.shape)),
        residual_norm=norm,
        iterations=its,
        form=form,
        method=method,
    )


def state_objective(spec: ProblemSpec, m: Control, solution: StateSolution) -> float:
    model = DiscreteModel(spec, m.grid)
    return model.objective_value(solution.variable().reshape(-1), m.flat())


def comparison_check(
    spec: ProblemSpec, m: Control, m2: Control, tolerances: Tolerances | None = None
) -> ComparisonReport:
    if np.any(m.values > m2.values):
        raise ValueError("comparison_check needs m <= m2 cellwise")
    s1 = solve_state(spec, m, tolerances=tolerances)
    s2 = solve_state(spec, m2, tolerances=tolerances)
    gap = float(np.min(s2.field.values - s1.field.values))
    j_gap = state_objective(spec, m2, s2) - state_objective(spec, m, s1)
    return ComparisonReport(min_state_gap=gap, objective_gap=j_gap, tolerance=1e-8)


def validate_spec(
    spec: ProblemSpec, u_grid: Array | None = None, grid: TorusGrid | None = None
) -> ValidationReport:
    """Sample the structural assumptions on a finite range of the log variable."""
    u = np.linspace(-10.0, 5.0, 64) if u_grid is None else np.asarray(u_grid, dtype=float)
    if u.size < 32 or not np.all(np.isfinite(u)):
        raise ValueError("u_grid needs at least 32 finite samples")
    u = np.sort(u)
    grid = grid or TorusGrid(2, 16)
    nl = get_nonlinearity(spec.nonlinearity.name, spec.nonlinearity.params)
    obj = get_objective(spec.objective.name, spec.objective.params)
    clauses: list[ClauseResult] = []

    if nl.coupling != BILINEAR:
        clauses.append(
            ClauseResult(
                clause="bilinear_coupling",
                passed=False,
                detail=f"control enters '{nl.name}' additively, not multiplying the state",
            )
        )
    else:
        q = nl.q(u)
        dq = nl.dq(u)
        worst = int(np.argmax(dq))
        clauses.append(
            ClauseResult(
                clause="dQ_negative",
                passed=bool(dq[worst] < 0),
                worst_u=float(u[worst]),
                worst_value=float(dq[worst]),
            )
        )
        if spec.form == "bigTheta":
            p = np.exp(u)
            ratio = nl.reaction(p) / p
            diffs = np.diff(ratio)
            k = int(np.argmax(diffs))
            clauses.append(
                ClauseResult(
                    clause="B_over_u_decreasing",
                    passed=bool(diffs[k] < 0),
                    worst_u=float(u[k]),
                    worst_value=float(diffs[k]),
                )
            )
        tail = q[-max(2, u.size // 4) :]
        clauses.append(
            ClauseResult(
                clause="Q_to_minus_infinity",
                passed=bool(np.all(np.diff(tail) < 0) and q[-1] < -1.0),
                worst_u=float(u[-1]),
                worst_value=float(q[-1]),
            )
        )
        head = np.abs(q[: max(2, u.size // 4)])
        clauses.append(
            ClauseResult(
                clause="Q_vanishes_at_minus_infinity",
                passed=bool(head[0] <= 1e-2 and np.all(np.diff(head) >= 0)),
                worst_u=float(u[0]),
                worst_value=float(head[0]),
            )
        )

    w = obj.weights(grid.axes(), grid.shape).reshape(-1)
    dj = obj.dj(u[:, None], w[None, :])
    i, k = np.unravel_index(int(np.argmin(dj)), dj.shape)
    clauses.append(
        ClauseResult(
            clause="dj_nonnegative",
            passed=bool(dj[i, k] >= 0),
            worst_u=float(u[i]),
            worst_value=float(dj[i, k]),
        )
    )
    per_u = dj.max(axis=1)
    i = int(np.argmin(per_u))
    clauses.append(
        ClauseResult(
            clause="dj_nontrivial",
            passed=bool(per_u[i] > 0),
            worst_u=float(u[i]),
            worst_value=float(per_u[i]),
        )
    )
    report = ValidationReport(
        model=nl.name,
        objective=obj.name,
        u_range=(float(u[0]), float(u[-1])),
        samples=int(u.size),
        clauses=clauses,
    )
    for c in clauses:
        if not c.passed:
            logger.info(
                "assumption clause %s fails (u=%s value=%s)", c.clause, c.worst_u, c.worst_value
            )
    return report
