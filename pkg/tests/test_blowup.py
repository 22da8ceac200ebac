import numpy as np
import pytest
from numpy.testing import assert_allclose

from bblab.blowup import (
    TWO_PI,
    AngularProfile,
    ProfileComponent,
    classify_profiles,
    evaluate_profile,
    gradient_floor,
    interface_defect,
    match_blowup,
    planar_residual,
    profile_field,
    profile_values,
    shooting_oracle,
)
from bblab.errors import DegenerateInput, NonPeriodic
from bblab.grid import TorusGrid


@pytest.fixture(scope="module")
def one_phase():
    return classify_profiles(1.0, 0.0, 12)


def test_one_phase_catalogue(one_phase):
    assert len(one_phase) == 1
    profile = one_phase[0]
    assert profile.N == 6
    assert_allclose(profile.lengths("-"), [np.pi / 2] * 3)
    assert_allclose(profile.lengths("+"), [np.pi / 6] * 3)
    plus = [c.coefficient for c in profile.components if c.sign == "+"]
    assert_allclose(plus, 1 / (4 * np.sqrt(3)))
    assert interface_defect(profile) < 1e-12
    assert planar_residual(profile) < 20 * 2 / 256
    assert gradient_floor(profile) > 0


def test_profile_values_on_each_phase(one_phase):
    profile = one_phase[0]
    assert_allclose(evaluate_profile(profile, np.pi / 4), -1 / (4 * np.sqrt(3)))
    assert evaluate_profile(profile, np.pi / 2 + np.pi / 12) > 0
    with pytest.raises(DegenerateInput):
        evaluate_profile(profile, TWO_PI)


def test_two_phase_catalogue_agrees_with_shooting():
    catalogue = classify_profiles(1.0, 0.5, 12)
    assert catalogue
    for profile in catalogue:
        assert interface_defect(profile) < 1e-8
        first = profile.components[0]
        assert first.sign == "-" and first.start == 0.0
        shot = shooting_oracle(1.0, 0.5, 0.0, 2 * first.coefficient)
        assert shot is not None
        assert shot.N == profile.N
        assert_allclose(sorted(shot.lengths("-")), sorted(profile.lengths("-")), atol=1e-6)
        assert_allclose(sorted(shot.lengths("+")), sorted(profile.lengths("+")), atol=1e-6)


def test_shooting_rejects_non_periodic_data():
    assert shooting_oracle(1.0, 0.5, 0.0, 0.0) is None
    assert shooting_oracle(1.0, 0.5, 0.0, 0.3) is None
    with pytest.raises(NonPeriodic):
        shooting_oracle(1.0, 0.5, 0.0, 0.3, strict=True)


def test_match_recovers_rotation(one_phase):
    profile = one_phase[0]
    theta = (np.arange(256) + 0.5) * TWO_PI / 256
    trace = 3.0 * profile_values(profile.rotated(0.4), theta)
    best, alpha, error = match_blowup(trace, one_phase)
    assert best is profile
    assert error < 1e-10
    # the six-component pattern repeats every third of a turn
    period = TWO_PI / 3
    offset = (alpha - 0.4) % period
    assert min(offset, period - offset) < 1e-6


def test_match_input_errors(one_phase):
    with pytest.raises(DegenerateInput):
        match_blowup(np.ones(256), [])
    with pytest.raises(DegenerateInput):
        match_blowup(np.ones(16), one_phase)


def test_profile_validation():
    half = np.pi
    with pytest.raises(DegenerateInput):
        AngularProfile(1.0, 0.0, [ProfileComponent("-", TWO_PI, 0.0, 0.0)])
    short = [ProfileComponent("-", half, 0.0, 0.0), ProfileComponent("+", 1.0, 0.0, half)]
    with pytest.raises(DegenerateInput):
        AngularProfile(1.0, 0.0, short)
    repeated = [ProfileComponent("-", half, 0.0, 0.0), ProfileComponent("-", half, 0.0, half)]
    with pytest.raises(DegenerateInput):
        AngularProfile(1.0, 0.0, repeated)


def test_profile_serialization(one_phase):
    profile = one_phase[0]
    data = profile.to_dict()
    assert data["N"] == 6
    assert AngularProfile.from_dict(data) == profile


@pytest.mark.parametrize(
    "f0, g0, n_max", [(0.0, 1.0, 6), (1.0, -2.0, 6), (1.0, 0.0, 5), (1.0, 0.0, 0)]
)
def test_classify_input_errors(f0, g0, n_max):
    with pytest.raises(DegenerateInput):
        classify_profiles(f0, g0, n_max)


def test_profile_field_is_planar(one_phase):
    grid = TorusGrid(2, 32)
    field = profile_field(one_phase[0], grid, (0.5, 0.5))
    assert field.values.shape == (32, 32)
    with pytest.raises(DegenerateInput):
        profile_field(one_phase[0], TorusGrid(3, 8), (0.5, 0.5, 0.5))
