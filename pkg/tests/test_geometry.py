import numpy as np
import pytest
from conftest import disk_mask
from numpy.testing import assert_allclose

from bblab.errors import DegenerateInput, UnresolvedRadius
from bblab.geometry import (
    DiscreteSet,
    ball_annulus_scaling,
    connected_components,
    density,
    essential_boundary,
    find_intermediate_density_point,
    perimeter,
    smooth_random_mask,
    stability_eigenvalue,
    trace_level_curves,
    weighted_curve_integral,
)
from bblab.grid import ScalarField, TorusGrid


@pytest.fixture
def grid64():
    return TorusGrid(2, 64)


def _stripe(grid: TorusGrid) -> DiscreteSet:
    mask = np.zeros(grid.shape, dtype=bool)
    mask[: grid.n // 2, :] = True
    return DiscreteSet(grid, mask)


def _disk_level_set(n: int, radius: float = 0.25) -> ScalarField:
    grid = TorusGrid(2, n)
    return ScalarField(grid, radius**2 - grid.distance((0.5, 0.5)) ** 2)


def test_stripe_perimeter_and_components(grid64):
    stripe = _stripe(grid64)
    assert_allclose(perimeter(stripe), 2.0)
    assert connected_components(stripe) == {"phase": 1, "complement": 1}
    assert stripe.volume() == 0.5
    assert stripe.complement().volume() == 0.5


def test_components_merge_across_the_seam(grid64):
    across = DiscreteSet(grid64, disk_mask(grid64, (0.0, 0.0), 0.2))
    assert connected_components(across) == {"phase": 1, "complement": 1}
    two = disk_mask(grid64, (0.25, 0.25), 0.1) | disk_mask(grid64, (0.75, 0.75), 0.1)
    assert connected_components(DiscreteSet(grid64, two)) == {"phase": 2, "complement": 1}
    empty = DiscreteSet(grid64, np.zeros(grid64.shape, dtype=bool))
    assert connected_components(empty) == {"phase": 0, "complement": 1}


def test_density(grid64):
    disk = DiscreteSet(grid64, disk_mask(grid64, (0.5, 0.5), 0.25))
    assert density(disk, (0.5, 0.5), 0.1) == 1.0
    assert density(disk, (0.0, 0.0), 0.1) == 0.0
    assert 0.3 < density(disk, (0.75, 0.5), 0.1) < 0.7
    with pytest.raises(UnresolvedRadius):
        density(disk, (0.5, 0.5), grid64.h)
    with pytest.raises(DegenerateInput):
        density(disk, (0.5, 0.5), 0.5)


def test_discrete_set_size_check(grid64):
    with pytest.raises(DegenerateInput):
        DiscreteSet(grid64, np.zeros(10, dtype=bool))


def test_essential_boundary_hugs_the_interface(grid64):
    disk = DiscreteSet(grid64, disk_mask(grid64, (0.5, 0.5), 0.25))
    boundary = essential_boundary(disk)
    assert boundary.mask.any()
    assert not boundary.mask[32, 32]
    assert not boundary.mask[0, 0]
    dist = grid64.distance((0.5, 0.5))[boundary.mask]
    assert np.all(np.abs(dist - 0.25) <= 5 * grid64.h)
    with pytest.raises(UnresolvedRadius):
        essential_boundary(disk, r_probe=grid64.h)


def test_disk_level_curve():
    eta = _disk_level_set(128)
    curves = trace_level_curves(eta)
    assert curves.count == 1
    curve = curves.curves[0]
    assert_allclose(curve.length, 2 * np.pi * 0.25, rtol=1e-2)
    assert curve.normal_sign == -1
    assert not curve.near_critical
    # |grad eta| = 2 r on the circle
    assert_allclose(weighted_curve_integral(eta, curve), np.pi, rtol=1e-2)
    assert curves.to_dict()["count"] == 1


def test_vertical_level_lines_wrap_around():
    grid = TorusGrid(2, 64)
    x, _ = grid.coordinates()
    eta = ScalarField(grid, np.sin(2 * np.pi * x))
    curves = trace_level_curves(eta)
    assert curves.count == 2
    assert_allclose([c.length for c in curves.curves], 1.0, rtol=1e-9)
    for curve in curves.curves:
        assert_allclose(weighted_curve_integral(eta, curve), 1 / (2 * np.pi), rtol=1e-2)


def test_level_curves_need_a_plane():
    with pytest.raises(DegenerateInput):
        trace_level_curves(ScalarField.constant(TorusGrid(3, 8), 1.0))


@pytest.mark.parametrize("penalized", [False, True])
def test_stability_eigenvalue_of_circle(penalized):
    eta = _disk_level_set(64)
    curve = trace_level_curves(eta).curves[0]
    sigma = stability_eigenvalue(eta, curve, penalized=penalized)
    assert np.isfinite(sigma)
    assert sigma > 0


def test_intermediate_density_point():
    grid = TorusGrid(2, 128)
    disk = DiscreteSet(grid, disk_mask(grid, (0.5, 0.5), 0.25))
    found = find_intermediate_density_point(disk, (0.75, 0.5), 0.3)
    side, last = found.trace[-1]
    assert side == 8 * grid.h
    assert 0.0 < last < 1.0
    # a square meeting both phases lies within half a diagonal of the circle
    offset = np.hypot(found.point[0] - 0.5, found.point[1] - 0.5)
    assert abs(offset - 0.25) <= 4 * np.sqrt(2) * grid.h + grid.h
    assert [r for r, _ in found.ball_densities][0] == 8 * grid.h


def test_intermediate_density_point_errors():
    grid = TorusGrid(2, 128)
    disk = DiscreteSet(grid, disk_mask(grid, (0.5, 0.5), 0.25))
    with pytest.raises(DegenerateInput):
        find_intermediate_density_point(disk, (0.5, 0.5), 0.1)
    with pytest.raises(UnresolvedRadius):
        find_intermediate_density_point(disk, (0.75, 0.5), 0.05)


def test_ball_annulus_gap_grows_with_volume():
    report = ball_annulus_scaling(TorusGrid(2, 128), (0.5, 0.5), 0.2)
    gaps = [row["norm_sq"] for row in report.rows]
    assert all(b > a for a, b in zip(gaps, gaps[1:]))
    assert report.target == 2.0
    with pytest.raises(DegenerateInput):
        ball_annulus_scaling(TorusGrid(2, 128), (0.5, 0.5), 0.2, fractions=(0.6,))


def test_smooth_random_mask_splits_in_half(grid64):
    mask = smooth_random_mask(grid64, seed=3)
    assert mask.volume() == 0.5
    assert np.array_equal(smooth_random_mask(grid64, seed=3).mask, mask.mask)
