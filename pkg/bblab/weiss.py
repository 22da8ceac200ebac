"""Quadratic rescalings, the boundary-adjusted Weiss energy and blow-up extraction.

For a centre x0 and radius r the rescaling is eta_r(p) = eta(x0 + r p) / r^2,
and on the unit disc

    Psi(r) = int |grad eta_r|^2 - 2 int (f_r (eta_r)_+ + g_r (eta_r)_-) - 2 int_{boundary} eta_r^2,
    S(r)   = int_{boundary} eta_r^2.

All integrals use midpoint quadrature on a polar grid; fields are sampled by
periodic bilinear interpolation of the cell-centred data. Two-dimensional only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from bblab.errors import AnalysisFailure, DegenerateInput, UnresolvedRadius
from bblab.grid import ScalarField, bilinear_sample, gradient_values, laplacian_values

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

N_ANGLES = 256
MIN_RADIAL = 32
BLOWUP_RADIAL = 32


@dataclass(frozen=True)
class WeissProfile:
    center: tuple[float, ...]
    radii: list[float]
    psi: list[float]
    boundary_mass: list[float]
    envelope: tuple[float, float]
    boundary_traces: list[Array] = field(default_factory=list, repr=False)
    h: float = 0.0
    center_value: float = 0.0

    def envelope_values(self, C: float | None = None, beta: float | None = None) -> list[float]:
        C = self.envelope[0] if C is None else C
        beta = self.envelope[1] if beta is None else beta
        return [p + C * r**beta for p, r in zip(self.psi, self.radii)]

    def rows(self) -> list[dict]:
        w = self.envelope_values()
        return [
            {"r": r, "psi": p, "S": s, "W": wv}
            for r, p, s, wv in zip(self.radii, self.psi, self.boundary_mass, w)
        ]


@dataclass(frozen=True)
class BlowupSequence:
    center: tuple[float, ...]
    radii: list[float]
    fields: list[Array] = field(repr=False)
    boundary_mass: list[float] = field(default_factory=list)
    l2_norms: list[float] = field(default_factory=list)
    normalized: bool = False
    regime: str = "finite_psi"
    limit_candidate: Array = field(default_factory=lambda: np.zeros(N_ANGLES), repr=False)
    cauchy_defect: float = 0.0
    growth_factor: float = 1.0


def _require_2d(eta: ScalarField) -> None:
    if eta.grid.d != 2:
        raise DegenerateInput("Weiss analysis is implemented for d = 2")


def polar_grid(n_radial: int, n_angles: int = N_ANGLES) -> tuple[Array, Array, float, float]:
    rho = (np.arange(n_radial) + 0.5) / n_radial
    theta = (np.arange(n_angles) + 0.5) * 2.0 * np.pi / n_angles
    return rho, theta, 1.0 / n_radial, 2.0 * np.pi / n_angles


def angles(n_angles: int = N_ANGLES) -> Array:
    return polar_grid(1, n_angles)[1]


def rescale(eta: ScalarField, x0: Sequence[float], r: float, points: Array) -> Array:
    """eta(x0 + r p) / r^2 at points p of shape (..., 2)."""
    _require_2d(eta)
    p = np.asarray(points, dtype=float)
    x = x0[0] + r * p[..., 0]
    y = x0[1] + r * p[..., 1]
    return bilinear_sample(eta.values, eta.grid.h, x, y) / r**2


def _trace(eta: ScalarField, x0: Sequence[float], r: float, radius: float, theta: Array) -> Array:
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=-1)
    return rescale(eta, x0, r, pts)


def _psi_at(
    eta: ScalarField,
    f: ScalarField,
    g: ScalarField,
    grads: list[Array],
    x0: Sequence[float],
    r: float,
) -> tuple[float, float, Array]:
    h = eta.grid.h
    n_radial = max(MIN_RADIAL, int(np.ceil(2.0 * r / h)))
    rho, theta, d_rho, d_theta = polar_grid(n_radial)
    rr, tt = np.meshgrid(rho, theta, indexing="ij")
    x = x0[0] + r * rr * np.cos(tt)
    y = x0[1] + r * rr * np.sin(tt)
    eta_r = bilinear_sample(eta.values, h, x, y) / r**2
    gx = bilinear_sample(grads[0], h, x, y) / r
    gy = bilinear_sample(grads[1], h, x, y) / r
    f_r = bilinear_sample(f.values, h, x, y)
    g_r = bilinear_sample(g.values, h, x, y)
    bulk = gx * gx + gy * gy - 2.0 * (f_r * np.maximum(eta_r, 0.0) + g_r * np.maximum(-eta_r, 0.0))
    weight = rr * d_rho * d_theta
    trace = _trace(eta, x0, r, 1.0, theta)
    s = float(np.sum(trace**2) * d_theta)
    psi = float(np.sum(bulk * weight)) - 2.0 * s
    return psi, s, trace


def fit_envelope(radii: Sequence[float], psi: Sequence[float], beta: float = 0.5) -> float:
    """Smallest C >= 0 making psi(r) + C r^beta nondecreasing in r along the samples."""
    C = 0.0
    for k in range(len(radii) - 1):
        big, small = radii[k], radii[k + 1]
        gap = big**beta - small**beta
        if gap > 0:
            C = max(C, (psi[k + 1] - psi[k]) / gap)
    return C


def weiss_profile(
    eta: ScalarField,
    f: ScalarField,
    g: ScalarField,
    x0: Sequence[float],
    radii: Sequence[float],
    beta: float = 0.5,
) -> WeissProfile:
    _require_2d(eta)
    radii = [float(r) for r in radii]
    h = eta.grid.h
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise DegenerateInput("Radii must be strictly decreasing")
    for r in radii:
        if r < 4.0 * h:
            raise UnresolvedRadius(f"Radius {r} below 4h = {4.0 * h}")
        if r >= 0.5:
            raise DegenerateInput(f"Radius {r} does not fit in the torus")
    x0 = tuple(float(c) for c in x0)
    center_value = float(bilinear_sample(eta.values, h, np.array(x0[0]), np.array(x0[1])))
    curvature = float(np.max(np.abs(laplacian_values(eta.values, h))))
    if abs(center_value) >= 10.0 * h * h * max(1.0, curvature):
        logger.warning("Weiss centre %s is not on the zero set (eta = %.3e)", x0, center_value)
    grads = gradient_values(np.asarray(eta.values), h)
    psi, mass, traces = [], [], []
    for r in radii:
        p, s, trace = _psi_at(eta, f, g, grads, x0, r)
        psi.append(p)
        mass.append(s)
        traces.append(trace)
        logger.debug("Weiss r=%.4g psi=%.8g S=%.8g", r, p, s)
    C = fit_envelope(radii, psi, beta)
    return WeissProfile(
        center=x0,
        radii=radii,
        psi=psi,
        boundary_mass=mass,
        envelope=(C, beta),
        boundary_traces=traces,
        h=h,
        center_value=center_value,
    )


def envelope_pairs(radii: Sequence[float]) -> list[int]:
    """Indices k with radii[k] < 2 radii[k + 1]."""
    return [k for k in range(len(radii) - 1) if radii[k] < 2.0 * radii[k + 1]]


def envelope_check(
    profile: WeissProfile,
    C: float | None = None,
    beta: float | None = None,
    c0: float = 1.0,
    slack_cells: float = 50.0,
) -> list[dict]:
    """Quantified monotonicity on consecutive radii r < s < 2r; returns the violating pairs.

    Raises AnalysisFailure when no consecutive pair satisfies s < 2r.
    """
    pairs = envelope_pairs(profile.radii)
    if not pairs:
        raise AnalysisFailure(
            "No consecutive radii with s < 2r to check", radii=list(profile.radii)
        )
    w = profile.envelope_values(C, beta)
    slack = slack_cells * profile.h
    _, _, _, d_theta = polar_grid(1)
    violations = []
    for k in pairs:
        s_big, r_small = profile.radii[k], profile.radii[k + 1]
        diff = profile.boundary_traces[k] - profile.boundary_traces[k + 1]
        boundary = float(np.sum(diff**2) * d_theta)
        margin = (w[k] - w[k + 1]) - c0 * boundary + slack
        if margin < 0:
            violations.append(
                {"r": r_small, "s": s_big, "magnitude": -margin, "boundary": boundary}
            )
    if violations:
        logger.info("envelope check: %d violating pairs", len(violations))
    return violations


def extract_blowup(
    eta: ScalarField,
    x0: Sequence[float],
    r_seq: Sequence[float],
    growth_threshold: float = 2.0,
) -> BlowupSequence:
    _require_2d(eta)
    h = eta.grid.h
    radii = [float(r) for r in r_seq]
    if len(radii) < 2:
        raise DegenerateInput("Blow-up needs at least two radii")
    ratios = [b / a for a, b in zip(radii, radii[1:])]
    if any(not 0.25 - 1e-12 <= q <= 0.75 + 1e-12 for q in ratios):
        raise DegenerateInput("Radii must decrease geometrically with ratio in [1/4, 3/4]")
    if min(radii) < 4.0 * h:
        raise UnresolvedRadius(f"Radius {min(radii)} below 4h = {4.0 * h}")
    x0 = tuple(float(c) for c in x0)
    rho, theta, d_rho, d_theta = polar_grid(BLOWUP_RADIAL)
    rr, tt = np.meshgrid(rho, theta, indexing="ij")
    pts = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1)
    weight = rr * d_rho * d_theta

    fields, masses, norms, halves = [], [], [], []
    for r in radii:
        values = rescale(eta, x0, r, pts)
        boundary = _trace(eta, x0, r, 1.0, theta)
        fields.append(values)
        masses.append(float(np.sum(boundary**2) * d_theta))
        norms.append(float(np.sqrt(np.sum(values**2 * weight))))
        halves.append(_trace(eta, x0, r, 0.5, theta))

    growth = masses[-1] / masses[0] if masses[0] > 0 else (np.inf if masses[-1] > 0 else 1.0)
    regime = "minus_infinity" if growth > growth_threshold else "finite_psi"
    normalized = regime == "minus_infinity"
    if normalized:
        scale = [1.0 / np.sqrt(s) if s > 0 else 0.0 for s in masses]
        fields = [v * c for v, c in zip(fields, scale)]
        halves = [v * c for v, c in zip(halves, scale)]
    defect = float(np.sqrt(np.sum((fields[-1] - fields[-2]) ** 2 * weight)))
    logger.info("blow-up at %s: regime=%s growth=%.3g defect=%.3e", x0, regime, growth, defect)
    return BlowupSequence(
        center=x0,
        radii=radii,
        fields=fields,
        boundary_mass=masses,
        l2_norms=norms,
        normalized=normalized,
        regime=regime,
        limit_candidate=halves[-1],
        cauchy_defect=defect,
        growth_factor=float(growth),
    )


def nondegeneracy_exponent(d: int) -> float:
    return (d + 4) / (2 * d)


def nondegeneracy_ratio(blowup: BlowupSequence, density: float, d: int = 2) -> float:
    """||eta_r||_{L2(B1)} / D^{(d+4)/(2d)} for the finest rescaling."""
    if not 0.0 < density < 1.0:
        raise DegenerateInput("density must lie in (0, 1)")
    return blowup.l2_norms[-1] / density ** nondegeneracy_exponent(d)


def critical_points(
    eta: ScalarField, level: float = 0.0, eps1_cells: float = 10.0, eps2_cells: float = 10.0
) -> list[tuple[float, ...]]:
    """Cell centres where |eta - level| < eps1 h^2 and |grad eta| < eps2 h."""
    h = eta.grid.h
    grad = gradient_values(np.asarray(eta.values), h)
    norm = np.sqrt(sum(c * c for c in grad))
    hits = (np.abs(eta.values - level) < eps1_cells * h * h) & (norm < eps2_cells * h)
    return [tuple(eta.grid.center_of(idx).tolist()) for idx in np.argwhere(hits)]


def subharmonicity_probe(
    eta: ScalarField, f: ScalarField, g: ScalarField, x0: Sequence[float], radius: float
) -> float:
    """Minimum of Lap_h(eta_+ + M |x - x0|^2) over cells inside B(x0; radius - 2h)."""
    grid = eta.grid
    bound = max(float(np.max(np.abs(f.values))), float(np.max(np.abs(g.values))))
    M = 0.5 * bound
    disp = grid.displacement(x0)
    v = np.maximum(eta.values, 0.0) + M * sum(c * c for c in disp)
    lap = laplacian_values(v, grid.h)
    inside = grid.distance(x0) < radius - 2.0 * grid.h
    if not np.any(inside):
        raise UnresolvedRadius("Probe radius too small")
    return float(lap[inside].min())


def sign_flip(
    eta: ScalarField, f: ScalarField, g: ScalarField
) -> tuple[ScalarField, ScalarField, ScalarField]:
    """(-eta, g, f): the same free boundary with the phases exchanged."""
    return -eta, g, f
