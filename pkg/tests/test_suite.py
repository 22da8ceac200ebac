import json

import pytest

from bblab.suite import Suite, run_suite


def test_selected_checks_write_verdicts(tmp_path):
    failed = run_suite(tmp_path, only=["constant_solution", "switch_positivity"])
    assert failed == 0
    summary = json.loads((tmp_path / "suite.json").read_text())
    assert [row["check"] for row in summary] == ["constant_solution", "switch_positivity"]
    verdict = json.loads((tmp_path / "constant_solution.json").read_text())
    assert verdict["criterion"] == 1 and verdict["scale"] == "reduced"


def test_unknown_scale():
    with pytest.raises(ValueError):
        Suite("huge")
