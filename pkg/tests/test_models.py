import pytest
from pydantic import ValidationError

from bblab.models import AnalysesConfig, ExperimentConfig, ModelRef, ProblemSpec


def test_defaults_describe_the_logistic_problem():
    config = ExperimentConfig()
    assert config.spec.nonlinearity.name == "logistic"
    assert config.spec.mode == "constrained"
    assert config.spec.penalty == 0.0
    assert config.stages == ["solve", "optimize"]


@pytest.mark.parametrize(
    "spec",
    [
        {"mode": "constrained", "m0": 1.0},
        {"mode": "penalized"},
        {"mode": "penalized", "c": -1.0},
        {"mu": 0.0},
        {"nonlinearity": {"name": "cubic"}},
        {"objective": {"name": "area"}},
        {"form": "log"},
    ],
)
def test_problem_spec_rejects(spec):
    with pytest.raises(ValidationError):
        ProblemSpec(**spec)


def test_penalty_in_penalized_mode():
    assert ProblemSpec(mode="penalized", c=0.25).penalty == 0.25


def test_model_parameters_pass_through():
    spec = ProblemSpec(nonlinearity=ModelRef(name="shifted_logistic", params={"k": 2.0}))
    assert spec.nonlinearity.params == {"k": 2.0}


@pytest.mark.parametrize(
    "analyses",
    [
        {"weiss_radii": [0.1, 0.2]},
        {"fragmentation_sweep": [0.5, 1.0]},
        {"fragmentation_sweep": [1.0, -0.5]},
        {"second_order_r0": 0.2},
    ],
)
def test_analyses_rejects(analyses):
    with pytest.raises(ValidationError):
        AnalysesConfig(**analyses)


def test_extra_keys_are_forbidden():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"grid": {"n": 32, "m": 1}})
