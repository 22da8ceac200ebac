"""Periodic uniform grids on the unit torus, scalar fields and discrete operators.

Samples are cell-centered at ((i + 1/2) h, ...) with h = 1/n. Arrays are
stored with shape (n,) * d in C order, which is the row-major flattening
used by the BBF1 format.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from bblab.errors import DegenerateInput, UnresolvedRadius, UnsupportedOrder

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TorusGrid:
    d: int
    n: int

    def __post_init__(self) -> None:
        if self.d not in (1, 2, 3):
            raise DegenerateInput(f"Unsupported dimension d={self.d}")
        if self.n < 8:
            raise DegenerateInput(f"Grid needs n >= 8, got n={self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def axes(self) -> list[NDArray[np.float64]]:
        """Cell-center coordinates along each axis, broadcastable to the grid shape."""
        centers = (np.arange(self.n) + 0.5) * self.h
        out = []
        for axis in range(self.d):
            shape = [1] * self.d
            shape[axis] = self.n
            out.append(centers.reshape(shape))
        return out

    def coordinates(self) -> list[NDArray[np.float64]]:
        return [np.broadcast_to(a, self.shape) for a in self.axes()]

    def displacement(self, x0: Sequence[float]) -> list[NDArray[np.float64]]:
        """Shortest periodic displacement x - x0 per axis, in [-1/2, 1/2)."""
        x0 = _point(self, x0)
        return [
            np.broadcast_to((a - c + 0.5) % 1.0 - 0.5, self.shape)
            for a, c in zip(self.axes(), x0)
        ]

    def distance(self, x0: Sequence[float]) -> NDArray[np.float64]:
        disp = self.displacement(x0)
        return np.sqrt(sum(v * v for v in disp))

    def cell_of(self, x: Sequence[float]) -> tuple[int, ...]:
        """Index of the cell containing x (wrapped onto the torus)."""
        x = _point(self, x)
        return tuple(int(np.floor((c % 1.0) * self.n)) % self.n for c in x)

    def center_of(self, index: Sequence[int]) -> NDArray[np.float64]:
        return (np.asarray(index, dtype=float) % self.n + 0.5) * self.h


@dataclass(frozen=True)
class ScalarField:
    grid: TorusGrid
    values: NDArray[np.float64] = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.grid.size:
            raise DegenerateInput(
                f"Field has {values.size} values, grid needs {self.grid.size}"
            )
        values = values.reshape(self.grid.shape).copy()
        if not np.all(np.isfinite(values)):
            raise DegenerateInput("Field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: TorusGrid, fn) -> "ScalarField":
        return cls(grid, np.broadcast_to(fn(*grid.axes()), grid.shape))

    def flat(self) -> NDArray[np.float64]:
        return self.values.reshape(-1)

    def with_values(self, values: NDArray[np.float64]) -> "ScalarField":
        return ScalarField(self.grid, values)

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def mean(self) -> float:
        return float(self.values.mean())

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.grid, -self.values)


@dataclass(frozen=True)
class Control(ScalarField):
    """A field with values in [0, 1]; m0 is the target volume when constrained."""

    m0: float | None = None

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise DegenerateInput("Control values must lie in [0, 1]")

    @classmethod
    def from_mask(
        cls, grid: TorusGrid, mask: NDArray[np.bool_], m0: float | None = None
    ) -> "Control":
        return cls(grid, np.asarray(mask, dtype=float), m0)

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> "Control":
        return cls(grid, np.full(grid.shape, float(value)), float(value))

    def mask(self) -> NDArray[np.bool_]:
        return self.values > 0.5

    def volume(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class SobolevNorm:
    order: float
    value: float


def _point(grid: TorusGrid, x0: Sequence[float]) -> NDArray[np.float64]:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (grid.d,):
        raise DegenerateInput(f"Point {x0.tolist()} does not have dimension {grid.d}")
    return x0


def shift(f: ScalarField, v: Sequence[int]) -> ScalarField:
    """Lattice shift by v cells (periodic)."""
    return f.with_values(np.roll(f.values, tuple(v), axis=tuple(range(f.grid.d))))


def inner(f: ScalarField, g: ScalarField) -> float:
    """Discrete L2 inner product h^d sum f g."""
    return float(np.sum(f.values * g.values) * f.grid.cell_volume)


def laplacian_values(values: NDArray[np.float64], h: float) -> NDArray[np.float64]:
    out = -2.0 * values.ndim * values
    for axis in range(values.ndim):
        out = out + np.roll(values, 1, axis) + np.roll(values, -1, axis)
    return out / (h * h)


def laplacian(field: ScalarField) -> ScalarField:
    """Second-order (2d+1)-point periodic Laplacian."""
    return field.with_values(laplacian_values(field.values, field.grid.h))


def gradient_values(values: NDArray[np.float64], h: float) -> list[NDArray[np.float64]]:
    return [
        (np.roll(values, -1, axis) - np.roll(values, 1, axis)) / (2.0 * h)
        for axis in range(values.ndim)
    ]


def gradient(field: ScalarField) -> list[NDArray[np.float64]]:
    """Centered differences per axis."""
    return gradient_values(field.values, field.grid.h)


def gradient_magnitude(field: ScalarField) -> NDArray[np.float64]:
    return np.sqrt(sum(c * c for c in gradient(field)))


def laplacian_matrix(grid: TorusGrid) -> sp.csr_matrix:
    """Sparse periodic Laplacian Delta_h acting on row-major flattened fields."""
    n = grid.n
    one_d = sp.diags(
        [np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil"
    )
    one_d[0, n - 1] = 1.0
    one_d[n - 1, 0] = 1.0
    one_d = one_d.tocsr()
    eye = sp.identity(n, format="csr")
    total = sp.csr_matrix((grid.size, grid.size))
    for axis in range(grid.d):
        term = None
        for k in range(grid.d):
            factor = one_d if k == axis else eye
            term = factor if term is None else sp.kron(term, factor, format="csr")
        total = total + term
    return (total / grid.h**2).tocsr()


def neighbor_pairs(grid: TorusGrid) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Directed (i, j) flat index pairs for every cell i and each of its 2d neighbours j."""
    index = np.arange(grid.size).reshape(grid.shape)
    rows, cols = [], []
    for axis in range(grid.d):
        for step in (1, -1):
            rows.append(index.reshape(-1))
            cols.append(np.roll(index, -step, axis).reshape(-1))
    return np.concatenate(rows), np.concatenate(cols)


def _wavenumbers_squared(grid: TorusGrid) -> NDArray[np.float64]:
    k = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    total = np.zeros(grid.shape)
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = grid.n
        total = total + (k.reshape(shape)) ** 2
    return total


def fourier_coefficients(field: ScalarField) -> NDArray[np.complex128]:
    """Coefficients normalized so that sum |c_k|^2 is the mean square of the field."""
    return np.fft.fftn(field.values) / field.grid.size


def neg_sobolev_norm(field: ScalarField, s: float) -> SobolevNorm:
    if s not in (1, 2):
        raise UnsupportedOrder(f"Unsupported Sobolev order s={s}")
    coeffs = fourier_coefficients(field)
    multiplier = (1.0 + 4.0 * np.pi**2 * _wavenumbers_squared(field.grid)) ** (-float(s))
    value = float(np.sqrt(np.sum(np.abs(coeffs) ** 2 * multiplier)))
    return SobolevNorm(order=float(s), value=value)


def l2_norm(field: ScalarField) -> float:
    return float(np.sqrt(np.mean(field.values**2)))


def ball_indicator(grid: TorusGrid, x0: Sequence[float], r: float) -> ScalarField:
    return ScalarField(grid, (grid.distance(x0) < r).astype(float))


def norm_ratio_decay(
    grid: TorusGrid, x0: Sequence[float], radii: Sequence[float]
) -> list[tuple[float, float]]:
    """W^{-2,2} / W^{-1,2} norm ratio of ball indicators B(x0; r) for each radius."""
    radii = [float(r) for r in radii]
    if any(b > a for a, b in zip(radii, radii[1:])):
        raise DegenerateInput("Radii must be non-increasing")
    table = []
    for r in radii:
        if r < 3.0 * grid.h:
            raise UnresolvedRadius(f"Radius {r} below 3h = {3.0 * grid.h}")
        if r >= 0.5:
            raise DegenerateInput(f"Radius {r} does not fit in the torus")
        ball = ball_indicator(grid, x0, r)
        ratio = neg_sobolev_norm(ball, 2).value / neg_sobolev_norm(ball, 1).value
        logger.debug("norm ratio r=%.4g ratio=%.6g", r, ratio)
        table.append((r, ratio))
    return table


def bilinear_sample(
    values: NDArray[np.float64], h: float, x: NDArray[np.float64], y: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Periodic bilinear interpolation of cell-centred 2D data at points (x, y)."""
    n = values.shape[0]
    sx = np.asarray(x) / h - 0.5
    sy = np.asarray(y) / h - 0.5
    fx = np.floor(sx)
    fy = np.floor(sy)
    tx = sx - fx
    ty = sy - fy
    i0 = fx.astype(np.int64) % n
    j0 = fy.astype(np.int64) % n
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    return (
        (1 - tx) * (1 - ty) * values[i0, j0]
        + tx * (1 - ty) * values[i1, j0]
        + (1 - tx) * ty * values[i0, j1]
        + tx * ty * values[i1, j1]
    )
