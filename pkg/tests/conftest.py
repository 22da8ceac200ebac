import numpy as np
import pytest

from bblab.grid import Control, ScalarField, TorusGrid
from bblab.models import ProblemSpec


@pytest.fixture
def grid16():
    return TorusGrid(2, 16)


@pytest.fixture
def grid32():
    return TorusGrid(2, 32)


@pytest.fixture
def logistic():
    return ProblemSpec(mu=1.0, mode="constrained", m0=0.3)


def smooth_control(grid: TorusGrid, mean: float = 0.5, amp: float = 0.25) -> Control:
    x, y = grid.coordinates()
    values = mean + amp * np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y + 0.3)
    return Control(grid, values, mean)


def smooth_direction(grid: TorusGrid) -> ScalarField:
    x, y = grid.coordinates()
    return ScalarField(grid, 0.5 + 0.5 * np.sin(2 * np.pi * x) * np.cos(4 * np.pi * y))


def disk_mask(grid: TorusGrid, center, radius: float) -> np.ndarray:
    return grid.distance(center) < radius
