"""Switching function, objective derivatives, principal eigenvalue and f, g fields.

With A the Jacobian of the discrete state residual in the working variable
(theta for bilinear models, y for additive ones), the control derivative of
the residual is -I and

    A u' = h,      A u'' = -F''[u', u'],      A^T eta = j'(u).

Then J'(m)[h] = <eta, h> and J''(m)[h, h] = <j''(u) u', u'> - <eta, F''[u', u']>,
both exact for the discrete objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.linalg import splu

from bblab.errors import DegenerateInput, NonConvergence
from bblab.grid import Control, ScalarField, gradient_values, laplacian_values
from bblab.models import ProblemSpec, Tolerances
from bblab.registry import BILINEAR
from bblab.state import DiscreteModel, StateSolution, solve_linear, solve_state

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


@dataclass(frozen=True)
class SwitchField:
    eta: ScalarField
    min_value: float
    threshold_shift: float | None = None

    def free_boundary_unknown(self) -> ScalarField:
        """eta - shift, whose zero level set is the free boundary."""
        return self.eta.with_values(self.eta.values - (self.threshold_shift or 0.0))


@dataclass(frozen=True)
class DerivativeReport:
    direction: ScalarField
    steps: list[float]
    first_analytic: float
    first_fd: list[float]
    first_rel_err: list[float]
    second_analytic: float
    second_fd: list[float]
    second_rel_err: list[float]
    first_order_rate: float | None = None

    def rows(self) -> list[dict]:
        out = []
        series = (
            (1, self.first_fd, self.first_rel_err, self.first_analytic),
            (2, self.second_fd, self.second_rel_err, self.second_analytic),
        )
        for order, fds, errs, analytic in series:
            for t, fd, err in zip(self.steps, fds, errs):
                out.append(
                    {"order": order, "t": t, "fd_value": fd, "analytic": analytic, "rel_err": err}
                )
        return out


@dataclass(frozen=True)
class CoefficientPair:
    f: ScalarField
    g: ScalarField
    min_sum: float
    residual_rms: float = field(default=float("nan"))


def _setup(spec: ProblemSpec, m: Control, theta: StateSolution):
    model = DiscreteModel(spec, m.grid)
    return model, theta.variable().reshape(-1)


def solve_switch(
    spec: ProblemSpec,
    m: Control,
    theta: StateSolution,
    tolerances: Tolerances | None = None,
) -> SwitchField:
    tolerances = tolerances or Tolerances()
    model, u = _setup(spec, m, theta)
    a_t = model.jacobian(u).T.tocsr()
    eta = solve_linear(a_t, model.dj(u), tolerances.switch_rel)
    shift = spec.c if spec.mode == "penalized" else None
    field_ = ScalarField(m.grid, eta.reshape(m.grid.shape))
    min_value = float(eta.min())
    logger.debug("switch solved: min eta %.6g", min_value)
    return SwitchField(eta=field_, min_value=min_value, threshold_shift=shift)


def objective(spec: ProblemSpec, m: Control, theta: StateSolution) -> float:
    """Midpoint quadrature of j, minus c * int m when penalized."""
    model, u = _setup(spec, m, theta)
    return model.objective_value(u, m.flat())


def linearized_state(spec: ProblemSpec, m: Control, theta: StateSolution, h: ScalarField) -> Array:
    model, u = _setup(spec, m, theta)
    return solve_linear(model.jacobian(u), h.flat())


def second_order_state(
    spec: ProblemSpec, m: Control, theta: StateSolution, h: ScalarField
) -> Array:
    model, u = _setup(spec, m, theta)
    jac = model.jacobian(u)
    lu = splu(jac.tocsc())
    v = lu.solve(h.flat())
    return lu.solve(-model.second_variation(u, v, v))


def _hessian(model: DiscreteModel, u: Array, eta: Array, v1: Array, v2: Array) -> float:
    density = model.d2j(u) * v1 * v2 - eta * model.second_variation(u, v1, v2)
    return float(np.sum(density) * model.grid.cell_volume)


def hessian_form(
    spec: ProblemSpec,
    m: Control,
    theta: StateSolution,
    eta: SwitchField,
    h1: ScalarField,
    h2: ScalarField,
) -> float:
    """Polarized second derivative Q(h1, h2) of the objective."""
    model, u = _setup(spec, m, theta)
    lu = splu(model.jacobian(u).tocsc())
    v1 = lu.solve(h1.flat())
    v2 = lu.solve(h2.flat())
    return _hessian(model, u, eta.eta.flat(), v1, v2)


def first_derivative(spec: ProblemSpec, eta: SwitchField, h: ScalarField) -> float:
    vol = h.grid.cell_volume
    value = float(np.sum(eta.eta.flat() * h.flat()) * vol)
    return value - spec.penalty * float(np.sum(h.flat()) * vol)


def _rel(approx: float, exact: float) -> float:
    if exact == 0.0:
        return 0.0 if approx == exact else float("inf")
    return abs(approx - exact) / abs(exact)


def derivative_check(
    spec: ProblemSpec,
    m: Control,
    h: ScalarField,
    steps: list[float],
    tolerances: Tolerances | None = None,
) -> DerivativeReport:
    tolerances = tolerances or Tolerances()
    steps = [float(t) for t in steps]
    for t in steps:
        for sign in (1.0, -1.0):
            moved = m.values + sign * t * h.values
            if moved.min() < 0.0 or moved.max() > 1.0:
                raise DegenerateInput(f"m {'+' if sign > 0 else '-'} {t} h leaves [0, 1]")

    base = solve_state(spec, m, tolerances=tolerances, polish=2)
    eta = solve_switch(spec, m, base, tolerances)
    j0 = objective(spec, m, base)
    first = first_derivative(spec, eta, h)
    second = hessian_form(spec, m, base, eta, h, h)
    vol = m.grid.cell_volume
    h_norm = float(np.sqrt(np.sum(h.values**2) * vol))
    if h_norm == 0.0:
        zeros = [0.0] * len(steps)
        return DerivativeReport(h, steps, 0.0, zeros, zeros, 0.0, zeros, zeros, None)

    def j_at(t: float) -> float:
        mt = Control(m.grid, m.values + t * h.values, m.m0)
        sol = solve_state(spec, mt, init=base.field, tolerances=tolerances, polish=2)
        return objective(spec, mt, sol)

    first_fd, first_err, second_fd, second_err = [], [], [], []
    for t in steps:
        jp, jm = j_at(t), j_at(-t)
        fd1 = (jp - j0) / t
        fd2 = (jp - 2.0 * j0 + jm) / (t * t)
        first_fd.append(fd1)
        first_err.append(_rel(fd1, first))
        second_fd.append(fd2)
        second_err.append(_rel(fd2, second))
        logger.debug("t=%.1e first fd=%.10g analytic=%.10g", t, fd1, first)

    rate = None
    errs = np.asarray(first_err)
    if len(steps) >= 2 and np.all(np.isfinite(errs) & (errs > 0)):
        rate = float(np.polyfit(np.log(steps), np.log(errs), 1)[0])
    return DerivativeReport(
        direction=h,
        steps=steps,
        first_analytic=first,
        first_fd=first_fd,
        first_rel_err=first_err,
        second_analytic=second,
        second_fd=second_fd,
        second_rel_err=second_err,
        first_order_rate=rate,
    )


def principal_eigenvalue(
    spec: ProblemSpec,
    m: Control,
    theta: StateSolution,
    tolerances: Tolerances | None = None,
) -> float:
    """Principal eigenvalue of the switch operator by shifted inverse iteration."""
    tolerances = tolerances or Tolerances()
    model, u = _setup(spec, m, theta)
    op = model.jacobian(u).T.tocsr()
    diag = op.diagonal()
    off = np.asarray(abs(op).sum(axis=1)).reshape(-1) - np.abs(diag)
    # Gershgorin lower bound of the real spectrum
    sigma = float(np.min(diag - off))
    sigma -= 1e-3 * max(1.0, abs(sigma))
    lu = splu((op - sigma * sp.identity(op.shape[0])).tocsc())
    x = np.ones(op.shape[0]) / np.sqrt(op.shape[0])
    lam = np.inf
    for it in range(1, tolerances.eigen_max_iter + 1):
        y = lu.solve(x)
        ratio = float(x @ y)
        new = sigma + 1.0 / ratio
        x = y / np.linalg.norm(y)
        if np.isfinite(lam) and abs(new - lam) <= tolerances.eigen_rel * max(1.0, abs(new)):
            logger.debug("principal eigenvalue %.10g after %d iterations", new, it)
            return new
        lam = new
    raise NonConvergence("Inverse iteration did not converge", estimate=lam)


def compute_fg(
    spec: ProblemSpec, m: Control, theta: StateSolution, eta: SwitchField
) -> CoefficientPair:
    """Coefficients with -Lap eta = f 1_E - g 1_{E^c} wherever m is an indicator."""
    model, u = _setup(spec, m, theta)
    grid = m.grid
    shape = grid.shape
    mu = model.mu
    e = eta.eta.values
    ut = u.reshape(shape)
    if model.coupling == BILINEAR:
        grad_t = gradient_values(ut, grid.h)
        grad_e = gradient_values(e, grid.h)
        cross = sum(a * b for a, b in zip(grad_e, grad_t))
        grad_sq = sum(a * a for a in grad_t)
        q = model.nonlinearity.q(u).reshape(shape)
        dq = model.nonlinearity.dq(u).reshape(shape)
        dj = model.dj(u).reshape(shape)
        r = (dq * e + dj - 2.0 * mu * cross + 2.0 * e * (mu * grad_sq + q)) / mu
        f = r + 2.0 * e / mu
        g = -r
    else:
        # the control does not multiply the state: no splitting with f + g > 0
        s = (model.dj(u) + model.nonlinearity.reaction_dp(u) * e.reshape(-1)).reshape(shape) / mu
        f, g = s, -s
        logger.warning("additive coupling: f + g vanishes identically")
    mv = m.values
    residual = -laplacian_values(e, grid.h) - (f * mv - g * (1.0 - mv))
    residual_rms = float(np.sqrt(np.mean(residual**2)))
    pair = CoefficientPair(
        f=ScalarField(grid, f),
        g=ScalarField(grid, g),
        min_sum=float(np.min(f + g)),
        residual_rms=residual_rms,
    )
    logger.debug("f, g: min(f+g)=%.6g residual=%.3e", pair.min_sum, residual_rms)
    return pair


def coercivity_probe(
    spec: ProblemSpec,
    m: Control,
    theta: StateSolution,
    eta: SwitchField,
    samples: int,
    r0: float = 0.1,
    seed: int = 0,
) -> dict:
    """Second derivative along flips supported in random balls of radius <= r0."""
    rng = np.random.default_rng(seed)
    model, u = _setup(spec, m, theta)
    lu = splu(model.jacobian(u).tocsc())
    grid = m.grid
    values = []
    for _ in range(samples):
        center = rng.random(grid.d)
        radius = rng.uniform(2.0 * grid.h, r0)
        ball = grid.distance(center) < radius
        h = np.where(ball, 1.0 - 2.0 * m.values, 0.0).reshape(-1)
        if not np.any(h):
            continue
        v = lu.solve(h)
        values.append(_hessian(model, u, eta.eta.flat(), v, v))
    values_arr = np.asarray(values)
    violations = int(np.sum(values_arr < 0))
    if violations:
        logger.warning("coercivity probe: %d of %d samples negative", violations, len(values))
    return {
        "samples": len(values),
        "min": float(values_arr.min()) if values else None,
        "violations": violations,
    }
