import numpy as np
import pytest
from numpy.testing import assert_allclose

from bblab.errors import AnalysisFailure, DegenerateInput, UnresolvedRadius
from bblab.grid import ScalarField, TorusGrid
from bblab.models import AnalysesConfig
from bblab.weiss import (
    N_ANGLES,
    WeissProfile,
    angles,
    critical_points,
    envelope_check,
    envelope_pairs,
    extract_blowup,
    fit_envelope,
    nondegeneracy_exponent,
    nondegeneracy_ratio,
    rescale,
    sign_flip,
    subharmonicity_probe,
    weiss_profile,
)


def _saddle(n: int) -> ScalarField:
    grid = TorusGrid(2, n)
    x, y = grid.coordinates()
    return ScalarField(grid, (x - 0.5) * (y - 0.5))


def test_homogeneous_quadratic_has_vanishing_energy():
    eta = _saddle(128)
    zero = ScalarField.constant(eta.grid, 0.0)
    profile = weiss_profile(eta, zero, zero, (0.5, 0.5), [0.4, 0.2, 0.1])
    assert_allclose(profile.psi, 0.0, atol=5e-3)
    assert_allclose(profile.boundary_mass, np.pi / 4, rtol=1e-10)
    assert abs(profile.center_value) < 1e-15
    assert [row["r"] for row in profile.rows()] == [0.4, 0.2, 0.1]


def test_weiss_profile_radius_checks(grid16):
    zero = ScalarField.constant(grid16, 0.0)
    with pytest.raises(UnresolvedRadius):
        weiss_profile(zero, zero, zero, (0.5, 0.5), [0.2])
    with pytest.raises(DegenerateInput):
        weiss_profile(zero, zero, zero, (0.5, 0.5), [0.3, 0.4])
    cube = TorusGrid(3, 8)
    with pytest.raises(DegenerateInput):
        weiss_profile(ScalarField.constant(cube, 0.0), zero, zero, (0.5, 0.5, 0.5), [0.4])


def test_fit_envelope():
    C = fit_envelope([0.4, 0.2, 0.1], [0.0, 1.0, 1.0])
    assert_allclose(C, 1.0 / (np.sqrt(0.4) - np.sqrt(0.2)))
    assert fit_envelope([0.4, 0.2], [1.0, 0.0]) == 0.0


def _profile(radii, psi) -> WeissProfile:
    traces = [np.zeros(N_ANGLES) for _ in radii]
    return WeissProfile(
        center=(0.5, 0.5),
        radii=radii,
        psi=psi,
        boundary_mass=[0.0] * len(radii),
        envelope=(0.0, 0.5),
        boundary_traces=traces,
        h=1e-3,
    )


def test_envelope_check_reports_violating_pairs():
    profile = _profile([0.4, 0.3, 0.2], [0.0, 1.0, 1.0])
    violations = envelope_check(profile)
    assert len(violations) == 1
    assert violations[0]["r"] == 0.3 and violations[0]["s"] == 0.4
    assert_allclose(violations[0]["magnitude"], 0.95)

    C = fit_envelope(profile.radii, profile.psi)
    assert envelope_check(profile, C=C) == []


def test_envelope_check_needs_an_admissible_pair():
    with pytest.raises(AnalysisFailure):
        envelope_check(_profile([0.4, 0.2, 0.1], [0.0, 5.0, 9.0]))
    assert envelope_pairs([0.4, 0.3, 0.1, 0.06]) == [0, 2]
    assert envelope_pairs(AnalysesConfig().weiss_radii) == [0, 1, 2, 3]


def test_envelope_check_flags_white_noise():
    grid = TorusGrid(2, 128)
    eta = ScalarField(grid, np.random.default_rng(0).normal(size=grid.shape))
    zero = ScalarField.constant(grid, 0.0)
    profile = weiss_profile(eta, zero, zero, (0.5, 0.5), AnalysesConfig().weiss_radii)
    assert envelope_check(profile, C=0.0)


def test_blowup_of_homogeneous_quadratic():
    eta = _saddle(128)
    blowup = extract_blowup(eta, (0.5, 0.5), [0.4, 0.2, 0.1])
    assert blowup.regime == "finite_psi"
    assert not blowup.normalized
    assert blowup.cauchy_defect < 1e-10
    assert_allclose(blowup.limit_candidate, np.sin(2 * angles()) / 8, atol=1e-12)


def test_blowup_of_linear_function_diverges():
    grid = TorusGrid(2, 128)
    x, _ = grid.coordinates()
    blowup = extract_blowup(ScalarField(grid, x - 0.5), (0.5, 0.5), [0.4, 0.2, 0.1])
    assert blowup.regime == "minus_infinity"
    assert blowup.normalized
    assert_allclose(blowup.growth_factor, 16.0, rtol=1e-10)
    assert blowup.cauchy_defect < 1e-10


def test_extract_blowup_input_errors(grid32):
    eta = ScalarField.constant(grid32, 0.0)
    with pytest.raises(DegenerateInput):
        extract_blowup(eta, (0.5, 0.5), [0.2])
    with pytest.raises(DegenerateInput):
        extract_blowup(eta, (0.5, 0.5), [0.4, 0.38])
    with pytest.raises(UnresolvedRadius):
        extract_blowup(eta, (0.5, 0.5), [0.2, 0.1])


def test_critical_points_of_saddle():
    eta = _saddle(64)
    h = eta.grid.h
    points = critical_points(eta)
    assert (0.5 - h / 2, 0.5 - h / 2) in points
    assert (0.5 + h / 2, 0.5 + h / 2) in points
    for p in points:
        assert np.hypot(p[0] - 0.5, p[1] - 0.5) < 10 * h


def test_subharmonicity_probe():
    eta = _saddle(64)
    one = ScalarField.constant(eta.grid, 1.0)
    assert subharmonicity_probe(eta, one, one, (0.5, 0.5), 0.2) >= 2.0 - 1e-9
    with pytest.raises(UnresolvedRadius):
        subharmonicity_probe(eta, one, one, (0.5, 0.5), eta.grid.h)


def test_sign_flip_exchanges_phases(grid16):
    eta = ScalarField.constant(grid16, 2.0)
    f = ScalarField.constant(grid16, 1.0)
    g = ScalarField.constant(grid16, 3.0)
    flipped, f2, g2 = sign_flip(eta, f, g)
    assert_allclose(flipped.values, -2.0)
    assert f2 is g and g2 is f


def test_nondegeneracy_exponent():
    assert nondegeneracy_exponent(2) == 1.5
    assert_allclose(nondegeneracy_exponent(3), 7 / 6)


def test_rescale_of_homogeneous_quadratic():
    eta = _saddle(64)
    points = np.array([[1.0, 0.0], [0.5, 0.5], [-1.0, 1.0]])
    assert_allclose(rescale(eta, (0.5, 0.5), 0.2, points), [0.0, 0.25, -1.0], atol=1e-12)


def test_nondegeneracy_ratio():
    blowup = extract_blowup(_saddle(128), (0.5, 0.5), [0.4, 0.2, 0.1])
    assert_allclose(nondegeneracy_ratio(blowup, 0.25), blowup.l2_norms[-1] * 8.0)
    with pytest.raises(DegenerateInput):
        nondegeneracy_ratio(blowup, 1.0)
