"""Single-experiment pipeline: solve, optimize, then the configured analyses.

Each stage appends a StageRecord to the manifest. A BBLabError stops the
experiment; the failing stage is recorded with its error type and a
truncated traceback, and the manifest carries the matching exit code.
"""

from __future__ import annotations

import logging
import traceback
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from bblab.adjoint import CoefficientPair, SwitchField, compute_fg, solve_switch
from bblab.blowup import classify_profiles, match_blowup
from bblab.errors import AnalysisFailure, BBLabError
from bblab.geometry import (
    DiscreteSet,
    connected_components,
    essential_boundary,
    find_intermediate_density_point,
    perimeter,
    stability_eigenvalue,
    trace_level_curves,
    weighted_curve_integral,
)
from bblab.grid import Control, ScalarField, TorusGrid, bilinear_sample
from bblab.models import AnalysesConfig, ExperimentConfig, Manifest, StageRecord
from bblab.optimize import (
    OptimizationReport,
    project_volume,
    run_optimization,
    second_order_check,
    selection_count,
)
from bblab.persistence import ArtifactWriter, config_sha256, write_json
from bblab.state import StateSolution, solve_state, state_objective, validate_spec
from bblab.weiss import (
    angles,
    critical_points,
    envelope_check,
    envelope_pairs,
    extract_blowup,
    weiss_profile,
)

logger = logging.getLogger(__name__)

StatusCallback = Callable[[str, dict], None]

MAX_ANALYSIS_POINTS = 4
N_MAX_PROFILES = 12


class _StageFailed(Exception):
    pass


def build_initial_control(config: ExperimentConfig, grid: TorusGrid) -> Control:
    spec = config.spec
    init = config.initial_control
    rng = np.random.default_rng(config.seed)
    volume = spec.m0 if spec.m0 is not None else 0.5
    m0 = spec.m0 if spec.mode == "constrained" else None
    if init.kind == "constant":
        return Control(grid, np.full(grid.shape, volume), m0)
    if init.kind == "random_bang_bang":
        chosen = rng.permutation(grid.size)[: selection_count(grid, volume)]
        mask = np.zeros(grid.size, dtype=bool)
        mask[chosen] = True
        return Control.from_mask(grid, mask.reshape(grid.shape), m0)
    if init.kind == "disk":
        dist = grid.distance([0.5] * grid.d).reshape(-1)
        nearest = np.argsort(dist, kind="stable")[: selection_count(grid, volume)]
        mask = np.zeros(grid.size, dtype=bool)
        mask[nearest] = True
        return Control.from_mask(grid, mask.reshape(grid.shape), m0)
    if init.kind == "smooth":
        x1 = grid.coordinates()[0]
        values = np.clip(volume + init.amplitude * np.cos(2.0 * np.pi * x1), 0.0, 1.0)
        return Control(grid, values, m0)
    values = rng.random(grid.shape)
    if spec.mode == "constrained":
        values, _ = project_volume(values, volume)
    return Control(grid, values, m0)


class Pipeline:
    """Runs one ExperimentConfig into an output directory."""

    def __init__(
        self,
        config: ExperimentConfig,
        out_dir: Path,
        set_status: Optional[StatusCallback] = None,
        run_id: Optional[str] = None,
        threads: int = 1,
    ):
        self.config = config
        self.threads = threads
        self.out_dir = Path(out_dir)
        self.set_status = set_status
        self.run_id = run_id or config.name
        self.grid = TorusGrid(config.grid.d, config.grid.n)
        self.writer = ArtifactWriter(self.out_dir)
        self.manifest = Manifest(experiment=config.name, config_sha256=config_sha256(config))
        self.control: Control | None = None
        self.state: StateSolution | None = None
        self.switch: SwitchField | None = None
        self.pair: CoefficientPair | None = None
        self.report: OptimizationReport | None = None

    # bookkeeping

    def _status(self, data: dict) -> None:
        if self.set_status is not None:
            self.set_status(self.run_id, data)

    def _stage(self, name: str, fn: Callable[[], dict[str, Any]]) -> None:
        self._status({"status": "running", "stage": name})
        logger.info("[%s] stage %s", self.run_id, name)
        try:
            summary = fn()
        except BBLabError as e:
            logger.error("[%s] stage %s failed: %s", self.run_id, name, e)
            self.manifest.stages.append(
                StageRecord(
                    stage=name,
                    status="error",
                    error=str(e),
                    type=type(e).__name__,
                    details=traceback.format_exc()[:500],
                )
            )
            self.manifest.status = "error"
            self.manifest.exit_code = e.exit_code
            raise _StageFailed(name) from e
        self.manifest.stages.append(StageRecord(stage=name, status="done", summary=summary or {}))

    def _skip(self, name: str, reason: str) -> None:
        logger.info("[%s] stage %s skipped: %s", self.run_id, name, reason)
        self.manifest.stages.append(
            StageRecord(stage=name, status="skipped", summary={"reason": reason})
        )

    def run(self) -> Manifest:
        analyses = self.config.analyses
        optimized = "optimize" in self.config.stages
        plan: list[tuple[str, bool, Callable[[], dict]]] = [
            ("validate", True, self.validate),
            ("solve", True, self.solve),
            ("optimize", optimized, self.optimize),
            ("fg", analyses.fg or analyses.weiss or analyses.blowup_match, self.fg),
            ("boundary", analyses.boundary, self.boundary),
            ("weiss", analyses.weiss, self.weiss),
            ("blowup_match", analyses.blowup_match, self.blowup_match),
            ("density", analyses.density, self.density),
            ("second_order", analyses.second_order, self.second_order),
            ("fragmentation_sweep", bool(analyses.fragmentation_sweep), self.sweep),
        ]
        try:
            for name, enabled, fn in plan:
                if not enabled:
                    continue
                if name not in ("validate", "solve", "optimize") and not optimized:
                    self._skip(name, "analyses run on the optimized control")
                    continue
                self._stage(name, fn)
        except _StageFailed:
            pass
        self.manifest.artifacts = list(self.writer.records)
        write_json(self.out_dir / "manifest.json", self.manifest.model_dump(mode="json"))
        self._status({"status": self.manifest.status, "exit_code": self.manifest.exit_code})
        return self.manifest

    # stages

    def validate(self) -> dict:
        report = validate_spec(self.config.spec)
        self.writer.json("validation.json", report.model_dump(mode="json"))
        failed = [c.clause for c in report.clauses if not c.passed]
        return {"passed": report.passed, "failed": failed}

    def solve(self) -> dict:
        tol = self.config.tolerances
        self.control = build_initial_control(self.config, self.grid)
        self.state = solve_state(self.config.spec, self.control, tolerances=tol)
        self.switch = solve_switch(self.config.spec, self.control, self.state, tol)
        self.writer.field("state.bbf", self.state.field)
        return {
            "residual": self.state.residual_norm,
            "iterations": self.state.iterations,
            "method": self.state.method,
            "objective": state_objective(self.config.spec, self.control, self.state),
            "min_switch": self.switch.min_value,
        }

    def optimize(self) -> dict:
        config = self.config
        self.writer.field("control_init.bbf", self.control)
        report = run_optimization(config.spec, config.optimize, self.control, config.tolerances)
        self.report = report
        self.control = report.final_control
        self.state = report.final_state
        self.switch = report.final_switch
        self.writer.field("control.bbf", self.control)
        if self.state is not None:
            self.writer.field("state_final.bbf", self.state.field)
        self.writer.field("switch.bbf", self.switch.eta)
        self.writer.json("optimization.json", report.summary())
        rows = [
            {"iteration": k, "objective": j, "threshold": c}
            for k, (j, c) in enumerate(zip(report.objective_trace, report.threshold_trace))
        ]
        self.writer.csv("objective_trace.csv", rows, ["iteration", "objective", "threshold"])
        summary = report.summary()
        summary.pop("objective_trace")
        summary.pop("threshold_trace")
        summary["objective"] = report.objective_trace[-1]
        if self.grid.d == 2:
            E = DiscreteSet.from_control(self.control)
            summary["perimeter"] = perimeter(E)
            summary["components"] = connected_components(E)
        return summary

    def _require_state(self) -> StateSolution:
        if self.state is None:
            raise AnalysisFailure("No state available (extinct control)")
        return self.state

    def fg(self) -> dict:
        self.pair = compute_fg(self.config.spec, self.control, self._require_state(), self.switch)
        self.writer.field("f.bbf", self.pair.f)
        self.writer.field("g.bbf", self.pair.g)
        return {"min_sum": self.pair.min_sum, "residual_rms": self.pair.residual_rms}

    def _free_boundary(self) -> ScalarField:
        return self.switch.free_boundary_unknown()

    def _analysis_points(self) -> list[dict]:
        """Detected critical points of the free boundary, or regular points when there are none."""
        tol = self.config.tolerances
        eta = self._free_boundary()
        points = critical_points(eta, 0.0, tol.critical_eps1_cells, tol.critical_eps2_cells)
        kind = "critical"
        if not points:
            kind = "regular"
            curves = trace_level_curves(eta, 0.0)
            points = [tuple(c.vertices[0] % 1.0) for c in curves.curves]
        kept: list[tuple[float, ...]] = []
        if not points:
            raise AnalysisFailure("The free boundary has no points to analyse")
        for p in points:
            if all(np.linalg.norm((np.subtract(p, q) + 0.5) % 1.0 - 0.5) > 0.05 for q in kept):
                kept.append(tuple(float(c) for c in p))
            if len(kept) == MAX_ANALYSIS_POINTS:
                break
        return [{"point": p, "kind": kind} for p in kept]

    def boundary(self) -> dict:
        if self.grid.d != 2:
            raise AnalysisFailure("Boundary tracing needs d = 2")
        tol = self.config.tolerances
        eta = self._free_boundary()
        curves = trace_level_curves(eta, 0.0)
        penalized = self.config.spec.mode == "penalized"
        stats = []
        for k, curve in enumerate(curves.curves):
            row = {
                "curve": k,
                "length": curve.length,
                "min_gradient": curve.min_gradient,
                "near_critical": curve.near_critical,
                "normal_sign": curve.normal_sign,
            }
            if not curve.near_critical:
                row["weighted_integral"] = weighted_curve_integral(eta, curve)
                row["sigma"] = stability_eigenvalue(
                    eta, curve, penalized, tol.patch_width, tol.patch_max_cells
                )
            stats.append(row)
        self.writer.json("curves.json", curves.to_dict())
        self.writer.csv(
            "curves.csv",
            stats,
            [
                "curve",
                "length",
                "min_gradient",
                "near_critical",
                "normal_sign",
                "weighted_integral",
                "sigma",
            ],
        )
        E = DiscreteSet.from_control(self.control)
        band = essential_boundary(E, tol.probe_radius_cells * self.grid.h)
        self.writer.field("essential_boundary.bbf", ScalarField(self.grid, band.mask))
        return {
            "curves": curves.count,
            "near_critical": sum(c.near_critical for c in curves.curves),
            "perimeter": perimeter(E),
            "components": connected_components(E),
            "sigma_min": min((r["sigma"] for r in stats if "sigma" in r), default=None),
            "probe_radius": tol.probe_radius_cells * self.grid.h,
        }

    def _radii(self) -> list[float]:
        h = self.grid.h
        return [r for r in self.config.analyses.weiss_radii if 4.0 * h <= r < 0.5]

    def weiss(self) -> dict:
        tol = self.config.tolerances
        radii = self._radii()
        if len(radii) < 2:
            raise AnalysisFailure("Fewer than two resolved Weiss radii")
        eta = self._free_boundary()
        results = []
        for k, item in enumerate(self._analysis_points()):
            profile = weiss_profile(
                eta, self.pair.f, self.pair.g, item["point"], radii, tol.weiss_beta
            )
            violations = envelope_check(profile, c0=tol.weiss_c0, slack_cells=tol.weiss_slack_cells)
            self.writer.csv(f"weiss_{k}.csv", profile.rows(), ["r", "psi", "S", "W"])
            results.append({**item, "C": profile.envelope[0], "violations": len(violations)})
        return {"points": results, "pairs": len(envelope_pairs(radii))}

    def blowup_match(self) -> dict:
        tol = self.config.tolerances
        radii = self._radii()
        eta = self._free_boundary()
        h = self.grid.h
        results = []
        for k, item in enumerate(self._analysis_points()):
            x, y = item["point"]
            f0 = float(bilinear_sample(self.pair.f.values, h, np.array(x), np.array(y)))
            g0 = float(bilinear_sample(self.pair.g.values, h, np.array(x), np.array(y)))
            seq = extract_blowup(eta, item["point"], radii, tol.regime_growth)
            theta = angles(seq.limit_candidate.size)
            self.writer.csv(
                f"blowup_{k}.csv",
                [{"theta": t, "value": v} for t, v in zip(theta, seq.limit_candidate)],
                ["theta", "value"],
            )
            row = {
                **item,
                "regime": seq.regime,
                "cauchy_defect": seq.cauchy_defect,
                "f0": f0,
                "g0": g0,
            }
            if f0 > 0 and f0 + g0 > 0:
                catalogue = classify_profiles(f0, g0, N_MAX_PROFILES)
                if catalogue:
                    self.writer.json(f"catalogue_{k}.json", [p.to_dict() for p in catalogue])
                    best, rotation, error = match_blowup(seq.limit_candidate, catalogue)
                    row.update({"profile_N": best.N, "rotation": rotation, "error": error})
            results.append(row)
        return {"points": results}

    def density(self) -> dict:
        E = DiscreteSet.from_control(self.control)
        eps = self.config.analyses.density_eps
        band = np.argwhere(essential_boundary(E).mask)
        if band.size == 0:
            raise AnalysisFailure("The control has no boundary")
        x0 = self.grid.center_of(band[0])
        found = find_intermediate_density_point(E, x0, eps)
        data = {"point": found.point, "trace": found.trace, "ball_densities": found.ball_densities}
        self.writer.json("intermediate_density.json", data)
        densities = [d for _, d in found.ball_densities]
        return {
            "point": list(found.point),
            "min_density": min(densities),
            "max_density": max(densities),
        }

    def second_order(self) -> dict:
        analyses = self.config.analyses
        report = second_order_check(
            self.config.spec,
            self.control,
            self.switch,
            analyses.second_order_samples,
            analyses.second_order_r0,
            self.config.seed,
        )
        self.writer.json("second_order.json", report)
        return report

    def sweep(self) -> dict:
        rows = fragmentation_sweep(
            self.config,
            self.config.analyses.fragmentation_sweep,
            self.out_dir / "sweep",
            self.threads,
            self.set_status,
        )
        return {"rows": rows}


def run_experiment(
    config: ExperimentConfig,
    out_dir: Path,
    set_status: Optional[StatusCallback] = None,
    run_id: Optional[str] = None,
    threads: int = 1,
) -> Manifest:
    return Pipeline(config, out_dir, set_status, run_id, threads).run()


def fragmentation_sweep(
    config: ExperimentConfig,
    mus: list[float],
    out_dir: Path,
    threads: int = 1,
    set_status: Optional[StatusCallback] = None,
) -> list[dict]:
    """One optimization per diffusivity, each in its own directory; CSV of (mu, perimeter, ...)."""
    from bblab.runner import run_parallel

    out_dir = Path(out_dir)

    def one(mu: float) -> dict:
        spec = config.spec.model_copy(update={"mu": mu})
        cfg = config.model_copy(
            update={
                "spec": spec,
                "name": f"{config.name}_mu{mu:g}",
                "stages": ["solve", "optimize"],
                "analyses": AnalysesConfig(fg=False),
            }
        )
        manifest = run_experiment(cfg, out_dir / f"mu_{mu:g}", set_status, cfg.name)
        row: dict[str, Any] = {"mu": mu, "status": manifest.status}
        for stage in manifest.stages:
            if stage.stage == "optimize" and stage.status == "done":
                row["perimeter"] = stage.summary.get("perimeter")
                row["components"] = (stage.summary.get("components") or {}).get("phase")
                row["objective"] = stage.summary.get("objective")
        return row

    rows = run_parallel(one, list(mus), threads)
    writer = ArtifactWriter(out_dir)
    writer.csv("fragmentation.csv", rows, ["mu", "perimeter", "components", "objective", "status"])
    write_json(
        out_dir / "fragmentation_manifest.json",
        {"artifacts": [r.model_dump() for r in writer.records], "rows": rows},
    )
    return rows
