import json

import numpy as np
import pytest

from bblab.grid import TorusGrid
from bblab.models import AnalysesConfig, ExperimentConfig, GridConfig, InitialControl, ProblemSpec
from bblab.optimize import selection_count
from bblab.pipeline import build_initial_control, fragmentation_sweep, run_experiment
from bblab.runner import StatusBoard


def _config(**update) -> ExperimentConfig:
    base = {"name": "t", "grid": GridConfig(n=16)}
    return ExperimentConfig(**{**base, **update})


def test_solve_only_run_is_reproducible(tmp_path):
    config = _config(grid=GridConfig(n=32), stages=["solve"])
    first = run_experiment(config, tmp_path / "a")
    second = run_experiment(config, tmp_path / "b")
    assert first.status == "done" and first.exit_code == 0
    assert [s.stage for s in first.stages] == ["validate", "solve", "fg"]
    assert first.stages[-1].status == "skipped"
    fields = [a for a in first.artifacts if a.path.endswith(".bbf")]
    assert [a.path for a in fields] == ["state.bbf"]
    assert [a.sha256 for a in first.artifacts] == [a.sha256 for a in second.artifacts]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (
        tmp_path / "b" / "manifest.json"
    ).read_bytes()


def test_optimize_run_writes_control_and_trace(tmp_path):
    board = StatusBoard()
    manifest = run_experiment(_config(), tmp_path, board.set_status, "run-1")
    assert manifest.status == "done"
    paths = {a.path for a in manifest.artifacts}
    assert {"control_init.bbf", "control.bbf", "switch.bbf", "f.bbf", "g.bbf"} <= paths
    assert "objective_trace.csv" in paths
    optimize = next(s for s in manifest.stages if s.stage == "optimize")
    assert optimize.summary["perimeter"] > 0
    assert board.get("run-1")["status"] == "done"
    written = json.loads((tmp_path / "manifest.json").read_text())
    assert written["exit_code"] == 0


def test_unresolved_weiss_radii_fail_the_run(tmp_path):
    manifest = run_experiment(_config(analyses=AnalysesConfig(weiss=True)), tmp_path)
    assert manifest.status == "error"
    assert manifest.exit_code == 4
    failed = manifest.stages[-1]
    assert failed.stage == "weiss"
    assert failed.type == "AnalysisFailure"
    assert failed.details


def test_extinct_control_has_no_coefficients(tmp_path):
    spec = ProblemSpec(mode="penalized", c=1e6)
    manifest = run_experiment(_config(spec=spec), tmp_path)
    assert manifest.exit_code == 4
    assert manifest.stages[-1].stage == "fg"


def test_analyses_need_an_optimized_control(tmp_path):
    config = _config(stages=["solve"], analyses=AnalysesConfig(boundary=True))
    manifest = run_experiment(config, tmp_path)
    skipped = {s.stage for s in manifest.stages if s.status == "skipped"}
    assert skipped == {"fg", "boundary"}


@pytest.mark.parametrize("kind", ["constant", "random_bang_bang", "disk", "smooth", "random"])
def test_initial_controls_hold_the_volume(kind):
    grid = TorusGrid(2, 16)
    config = _config(initial_control=InitialControl(kind=kind))
    m = build_initial_control(config, grid)
    if kind in ("random_bang_bang", "disk"):
        assert m.mask().sum() == selection_count(grid, 0.3)
    else:
        np.testing.assert_allclose(m.volume(), 0.3, atol=1e-12)


def test_initial_control_depends_on_seed():
    grid = TorusGrid(2, 16)
    a = build_initial_control(_config(seed=1), grid)
    b = build_initial_control(_config(seed=2), grid)
    assert not np.array_equal(a.values, b.values)


@pytest.mark.slow
def test_fragmentation_sweep(tmp_path):
    config = _config(initial_control=InitialControl(kind="disk"))
    rows = fragmentation_sweep(config, [1.0, 0.5], tmp_path, threads=2)
    assert [row["mu"] for row in rows] == [1.0, 0.5]
    assert all(row["status"] == "done" for row in rows)
    assert (tmp_path / "fragmentation.csv").exists()
    assert (tmp_path / "mu_0.5" / "manifest.json").exists()


def test_constrained_optimum_feeds_the_boundary_analyses(tmp_path):
    analyses = AnalysesConfig(boundary=True, weiss=True)
    manifest = run_experiment(_config(grid=GridConfig(n=32), analyses=analyses), tmp_path)
    assert manifest.status == "done", manifest.stages[-1]
    stages = {s.stage: s for s in manifest.stages}
    assert stages["boundary"].summary["curves"] > 0
    weiss = stages["weiss"].summary
    assert len(weiss["points"]) > 0
    assert weiss["pairs"] > 0
    assert all(np.isfinite(p["C"]) for p in weiss["points"])
    assert (tmp_path / "weiss_0.csv").exists()
