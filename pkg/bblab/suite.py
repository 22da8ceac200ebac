"""Acceptance checks at reduced (default) or full scale.

Each check returns a verdict dict; ``run_suite`` writes one JSON file per
criterion and a summary, and reports how many failed.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from bblab.adjoint import derivative_check, solve_switch
from bblab.blowup import classify_profiles, profile_field, shooting_oracle
from bblab.errors import BBLabError
from bblab.geometry import (
    ball_annulus_scaling,
    essential_boundary,
    find_intermediate_density_point,
    smooth_random_mask,
    stability_eigenvalue,
    trace_level_curves,
)
from bblab.grid import Control, ScalarField, TorusGrid, norm_ratio_decay
from bblab.models import (
    AnalysesConfig,
    ExperimentConfig,
    GridConfig,
    ModelRef,
    OptimizeConfig,
    ProblemSpec,
)
from bblab.optimize import OptimizationReport, run_optimization, second_order_check
from bblab.persistence import write_json
from bblab.pipeline import build_initial_control, fragmentation_sweep, run_experiment
from bblab.state import solve_state
from bblab.weiss import weiss_profile

logger = logging.getLogger(__name__)

SCALES = {
    "reduced": {
        "optimum_n": 64,
        "curve_n": (64, 128),
        "sweep_n": 64,
        "density_n": 128,
        "density_masks": 20,
    },
    "full": {
        "optimum_n": 128,
        "curve_n": (128, 256),
        "sweep_n": 256,
        "density_n": 256,
        "density_masks": 50,
    },
}

LOGISTIC = ProblemSpec(mu=1.0, mode="constrained", m0=0.3)


def _verdict(criterion: int, passed: bool, **values) -> dict:
    return {"criterion": criterion, "passed": bool(passed), **values}


def _smooth_control(grid: TorusGrid, rng: np.random.Generator, mean: float, amp: float) -> Control:
    x, y = grid.coordinates()
    a, b = rng.uniform(0, 2 * np.pi, size=2)
    values = mean + amp * np.cos(2 * np.pi * x + a) * np.cos(2 * np.pi * y + b)
    return Control(grid, values, mean)


def _random_direction(grid: TorusGrid, rng: np.random.Generator) -> ScalarField:
    return ScalarField(grid, rng.uniform(0.0, 1.0, size=grid.shape))


class Suite:
    def __init__(self, scale: str = "reduced", threads: int = 1, seed: int = 0):
        if scale not in SCALES:
            raise ValueError(f"unknown scale '{scale}'")
        self.scale = scale
        self.sizes = SCALES[scale]
        self.threads = threads
        self.seed = seed
        self._optimum: OptimizationReport | None = None

    def optimum(self) -> OptimizationReport:
        """Thresholding optimum of the logistic problem, shared by several criteria."""
        if self._optimum is None:
            grid = TorusGrid(2, self.sizes["optimum_n"])
            config = ExperimentConfig(spec=LOGISTIC, grid=GridConfig(n=grid.n), seed=self.seed)
            m_init = build_initial_control(config, grid)
            self._optimum = run_optimization(LOGISTIC, OptimizeConfig(), m_init)
        return self._optimum

    def constant_solution(self) -> dict:
        grid = TorusGrid(2, 64)
        sol = solve_state(LOGISTIC, Control.constant(grid, 0.5))
        error = float(np.max(np.abs(np.exp(sol.variable()) - 0.5)))
        return _verdict(1, error < 1e-8, max_error=error)

    def _derivatives(self, count: int, steps: list[float]) -> list:
        grid = TorusGrid(2, 64)
        rng = np.random.default_rng(self.seed)
        reports = []
        for _ in range(count):
            m = _smooth_control(grid, rng, 0.5, 0.25)
            h = _random_direction(grid, rng)
            reports.append(derivative_check(LOGISTIC, m, h, steps))
        return reports

    def adjoint_duality(self) -> dict:
        reports = self._derivatives(5, [1e-2, 1e-3, 1e-4])
        errors = [r.first_rel_err[-1] for r in reports]
        rates = [r.first_order_rate for r in reports]
        passed = max(errors) < 1e-3 and all(rate is not None and rate >= 0.9 for rate in rates)
        return _verdict(2, passed, errors=errors, rates=rates)

    def hessian_identity(self) -> dict:
        reports = self._derivatives(3, [1e-2])
        errors = [r.second_rel_err[0] for r in reports]
        return _verdict(3, max(errors) < 1e-2, errors=errors)

    def switch_positivity(self) -> dict:
        grid = TorusGrid(2, 32)
        rng = np.random.default_rng(self.seed)
        minima = []
        for _ in range(20):
            m = Control(grid, rng.random(grid.shape))
            theta = solve_state(LOGISTIC, m)
            minima.append(solve_switch(LOGISTIC, m, theta).min_value)
        return _verdict(4, min(minima) > 0, min_switch=min(minima))

    def bang_bang(self) -> dict:
        report = self.optimum()
        passed = (
            report.converged
            and report.bang_bang_fraction == 0
            and report.fixed_point_residual == 0
            and not report.monotone_violations
        )
        return _verdict(
            5,
            passed,
            iterations=report.iterations,
            bang_bang_fraction=report.bang_bang_fraction,
            fixed_point_residual=report.fixed_point_residual,
        )

    def counterexamples(self) -> dict:
        grid = TorusGrid(2, 64)
        specs = {
            "linear_interaction": ProblemSpec(
                nonlinearity=ModelRef(name="linear_interaction"), m0=0.4
            ),
            "population_minimization": ProblemSpec(
                objective=ModelRef(name="negative_population"), m0=0.3
            ),
        }
        gaps = {}
        for name, spec in specs.items():
            m_init = _smooth_control(grid, np.random.default_rng(self.seed), spec.m0, 0.2)
            config = OptimizeConfig(scheme="projected_gradient", max_iter=500, gradient_step=2000.0)
            report = run_optimization(spec, config, m_init)
            gaps[name] = float(np.max(np.abs(report.final_control.values - spec.m0)))
        return _verdict(6, max(gaps.values()) < 1e-3, max_norm_gap=gaps)

    def second_order(self) -> dict:
        report = self.optimum()
        check = second_order_check(
            LOGISTIC, report.final_control, report.final_switch, 200, 0.05, self.seed
        )
        return _verdict(7, check["min_rho"] > 0, **check)

    def weiss_exactness(self) -> dict:
        grid = TorusGrid(2, 512)
        radii = [0.4, 0.3, 0.2, 0.1, 0.05]
        x0 = (0.5, 0.5)
        eta = ScalarField.from_function(grid, lambda x, y: (x - 0.5) * (y - 0.5))
        zero = ScalarField.constant(grid, 0.0)
        psi = weiss_profile(eta, zero, zero, x0, radii).psi
        worst = float(np.max(np.abs(psi)))
        spreads = []
        for f0, g0 in [(1.0, 0.0), (1.0, 0.5), (2.0, 1.0)]:
            f, g = ScalarField.constant(grid, f0), ScalarField.constant(grid, g0)
            for profile in classify_profiles(f0, g0, 12):
                values = weiss_profile(
                    profile_field(profile, grid, x0), f, g, x0, [0.4, 0.3, 0.2]
                ).psi
                scale = max(float(np.max(np.abs(values))), 1e-12)
                spreads.append(float((max(values) - min(values)) / scale))
        passed = worst < 5e-3 and max(spreads, default=0.0) <= 0.02
        return _verdict(8, passed, saddle_max_psi=worst, profile_spreads=spreads)

    def quasi_monotonicity(self, out: Path) -> dict:
        config = ExperimentConfig(
            name="weiss_check",
            spec=LOGISTIC,
            grid=GridConfig(n=self.sizes["optimum_n"]),
            analyses=AnalysesConfig(weiss=True),
            seed=self.seed,
        )
        manifest = run_experiment(config, out / "weiss_check")
        stage = next((s for s in manifest.stages if s.stage == "weiss"), None)
        if stage is None or stage.status != "done":
            return _verdict(9, False, detail=stage.error if stage else "weiss stage missing")
        points = stage.summary["points"]
        pairs = stage.summary["pairs"]
        passed = bool(points) and pairs > 0
        passed = passed and all(np.isfinite(p["C"]) and p["violations"] == 0 for p in points)
        return _verdict(9, passed, points=points, pairs=pairs)

    def catalogue(self) -> dict:
        base = classify_profiles(1.0, 0.0, 12)
        ok = len(base) == 1
        detail: dict = {"count": len(base)}
        if ok:
            profile = base[0]
            neg = sorted(profile.lengths("-"))
            pos = sorted(profile.lengths("+"))
            b1 = max(c.coefficient for c in profile.components if c.sign == "+")
            ok = (
                profile.N == 6
                and np.allclose(neg, np.pi / 2, atol=1e-9)
                and np.allclose(pos, np.pi / 6, atol=1e-9)
                and abs(b1 - 1.0 / (4.0 * np.sqrt(3.0))) < 1e-9
            )
            detail["B1"] = b1
        worst = 0.0
        for f0, g0 in [(1.0, 0.5), (1.0, 3.0), (2.0, 1.0)]:
            for profile in classify_profiles(f0, g0, 12):
                first = profile.components[0]
                shot = shooting_oracle(f0, g0, 0.0, 2.0 * first.coefficient)
                if shot is None or shot.N != profile.N:
                    worst = np.inf
                    continue
                expected = (profile.interfaces() - first.start) % (2 * np.pi)
                worst = max(worst, float(np.max(np.abs(np.sort(expected) - shot.interfaces()))))
        detail["shooting_interface_gap"] = worst
        return _verdict(10, ok and worst < 1e-6, **detail)

    def sobolev(self) -> dict:
        grid = TorusGrid(2, 256)
        table = norm_ratio_decay(grid, (0.5, 0.5), [0.4, 0.2, 0.1, 0.05])
        ratios = [ratio for _, ratio in table]
        decreasing = all(b < a for a, b in zip(ratios, ratios[1:]))
        scaling = ball_annulus_scaling(grid, (0.5, 0.5), 0.2)
        passed = decreasing and abs(scaling.exponent - scaling.target) <= 0.2
        return _verdict(11, passed, ratios=ratios, exponent=scaling.exponent)

    def intermediate_density(self) -> dict:
        grid = TorusGrid(2, self.sizes["density_n"])
        failures, seconds, tried = [], [], 0
        seed = self.seed
        while tried < self.sizes["density_masks"]:
            E = smooth_random_mask(grid, seed)
            seed += 1
            if not 0.05 <= E.volume() <= 0.95:
                continue
            tried += 1
            band = np.argwhere(essential_boundary(E).mask)
            x0 = grid.center_of(band[len(band) // 2])
            start = time.perf_counter()
            try:
                found = find_intermediate_density_point(E, x0, 0.25)
            except BBLabError as e:
                failures.append({"seed": seed - 1, "error": str(e)})
                continue
            seconds.append(time.perf_counter() - start)
            values = [v for _, v in found.trace] + [v for _, v in found.ball_densities]
            if not all(0.1 <= v <= 0.9 for v in values):
                failures.append({"seed": seed - 1, "densities": values})
        return _verdict(
            12, not failures, masks=tried, failures=failures, max_seconds=max(seconds, default=0)
        )

    def finite_curves(self) -> dict:
        counts, flagged, sigmas = [], 0, []
        for n in self.sizes["curve_n"]:
            grid = TorusGrid(2, n)
            config = ExperimentConfig(spec=LOGISTIC, grid=GridConfig(n=n), seed=self.seed)
            m_init = build_initial_control(config, grid)
            report = run_optimization(LOGISTIC, OptimizeConfig(), m_init)
            eta = report.final_switch.free_boundary_unknown()
            curves = trace_level_curves(eta, 0.0)
            counts.append(curves.count)
            for curve in curves.curves:
                if curve.near_critical:
                    flagged += 1
                else:
                    sigmas.append(stability_eigenvalue(eta, curve))
        passed = len(set(counts)) == 1 and counts[0] > 0
        passed = passed and flagged == 0 and all(s > 0 for s in sigmas)
        return _verdict(13, passed, counts=counts, near_critical=flagged, sigma=sigmas)

    def fragmentation(self, out: Path) -> dict:
        config = ExperimentConfig(
            name="fragmentation",
            spec=LOGISTIC,
            grid=GridConfig(n=self.sizes["sweep_n"]),
            initial_control={"kind": "disk"},
            seed=self.seed,
        )
        rows = fragmentation_sweep(config, [1.0, 0.25, 0.05], out / "fragmentation", self.threads)
        perims = [row.get("perimeter") for row in rows]
        passed = None not in perims and all(b > a for a, b in zip(perims, perims[1:]))
        return _verdict(14, passed, rows=rows)

    def checks(self, out: Path) -> list[tuple[str, Callable[[], dict]]]:
        return [
            ("constant_solution", self.constant_solution),
            ("adjoint_duality", self.adjoint_duality),
            ("hessian_identity", self.hessian_identity),
            ("switch_positivity", self.switch_positivity),
            ("bang_bang", self.bang_bang),
            ("counterexamples", self.counterexamples),
            ("second_order", self.second_order),
            ("weiss_exactness", self.weiss_exactness),
            ("quasi_monotonicity", lambda: self.quasi_monotonicity(out)),
            ("catalogue", self.catalogue),
            ("sobolev", self.sobolev),
            ("intermediate_density", self.intermediate_density),
            ("finite_curves", self.finite_curves),
            ("fragmentation", lambda: self.fragmentation(out)),
        ]


def run_suite(
    out: Path,
    scale: str = "reduced",
    threads: int = 1,
    seed: int = 0,
    only: list[str] | None = None,
) -> int:
    """Run the acceptance checks; returns the number of failed criteria."""
    out = Path(out)
    suite = Suite(scale, threads, seed)
    summary = []
    for name, check in suite.checks(out):
        if only and name not in only:
            continue
        logger.info("suite: %s", name)
        start = time.perf_counter()
        try:
            verdict = check()
        except BBLabError as e:
            logger.error("suite: %s raised %s", name, e)
            verdict = {"passed": False, "error": str(e), "type": type(e).__name__}
        verdict["seconds"] = time.perf_counter() - start
        verdict["scale"] = scale
        write_json(out / f"{name}.json", verdict)
        summary.append({"check": name, "passed": verdict["passed"]})
        logger.info("suite: %s %s", name, "passed" if verdict["passed"] else "FAILED")
    write_json(out / "suite.json", summary)
    return sum(not row["passed"] for row in summary)
