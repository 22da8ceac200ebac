"""Discrete sets on the torus: densities, essential boundary, level curves and curve spectra."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np
import scipy.linalg
import scipy.ndimage
import scipy.sparse as sp
from numpy.typing import NDArray

from bblab.errors import DegenerateGradient, DegenerateInput, UnresolvedRadius
from bblab.grid import (
    Control,
    ScalarField,
    TorusGrid,
    bilinear_sample,
    gradient_values,
    neg_sobolev_norm,
)

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

MIN_SQUARE_CELLS = 8
GRADIENT_FLOOR = 1e-14


@dataclass(frozen=True)
class DiscreteSet:
    grid: TorusGrid
    mask: NDArray[np.bool_] = field(repr=False)

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        if mask.size != self.grid.size:
            raise DegenerateInput(f"Mask has {mask.size} cells, grid needs {self.grid.size}")
        mask = mask.reshape(self.grid.shape).copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_control(cls, m: Control) -> "DiscreteSet":
        return cls(m.grid, m.mask())

    def complement(self) -> "DiscreteSet":
        return DiscreteSet(self.grid, ~self.mask)

    def volume(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class Curve:
    vertices: Array = field(repr=False)
    length: float
    min_gradient: float
    normal_sign: int
    near_critical: bool

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "length": self.length,
            "min_gradient": self.min_gradient,
            "normal_sign": self.normal_sign,
            "near_critical": self.near_critical,
        }


@dataclass(frozen=True)
class CurveSet:
    level: float
    curves: list[Curve]

    @property
    def count(self) -> int:
        return len(self.curves)

    def to_dict(self) -> dict:
        curves = [c.to_dict() for c in self.curves]
        return {"level": self.level, "count": self.count, "curves": curves}


@dataclass(frozen=True)
class IntermediatePoint:
    point: tuple[float, ...]
    trace: list[tuple[float, float]]
    ball_densities: list[tuple[float, float]]


@dataclass(frozen=True)
class ScalingReport:
    rows: list[dict]
    exponent: float
    raw_exponent: float
    target: float


def density(E: DiscreteSet, x: Sequence[float], r: float) -> float:
    """Fraction of the cell centres inside B(x; r) that belong to E."""
    grid = E.grid
    if r < 3.0 * grid.h:
        raise UnresolvedRadius(f"Radius {r} below 3h = {3.0 * grid.h}")
    if r >= 0.5:
        raise DegenerateInput(f"Radius {r} does not fit in the torus")
    ball = grid.distance(x) < r
    return float(E.mask[ball].mean())


def _ball_kernel(grid: TorusGrid, r: float) -> NDArray[np.float32]:
    k = int(np.ceil(r / grid.h))
    offsets = np.arange(-k, k + 1) * grid.h
    mesh = np.meshgrid(*([offsets] * grid.d), indexing="ij")
    return (np.sqrt(sum(m * m for m in mesh)) < r).astype(np.float32)


def _ball_counts(E: DiscreteSet, r: float) -> NDArray[np.int64]:
    """Number of E cells within distance r of every cell centre (periodic)."""
    kernel = _ball_kernel(E.grid, r)
    data = E.mask.astype(np.float32)
    if E.grid.d == 2:
        pad = kernel.shape[0] // 2
        padded = np.pad(data, pad, mode="wrap")
        counts = cv2.filter2D(padded, cv2.CV_32F, kernel, borderType=cv2.BORDER_CONSTANT)
        counts = counts[pad:-pad, pad:-pad]
    else:
        counts = scipy.ndimage.correlate(data, kernel, mode="wrap")
    return np.rint(counts).astype(np.int64)


def essential_boundary(E: DiscreteSet, r_probe: float | None = None) -> DiscreteSet:
    """Cells whose probe ball meets both phases."""
    grid = E.grid
    r_probe = 4.0 * grid.h if r_probe is None else r_probe
    if r_probe < 3.0 * grid.h:
        raise UnresolvedRadius(f"Probe radius {r_probe} below 3h = {3.0 * grid.h}")
    total = int(_ball_kernel(grid, r_probe).sum())
    counts = _ball_counts(E, r_probe)
    return DiscreteSet(grid, (counts > 0) & (counts < total))


def perimeter(E: DiscreteSet) -> float:
    """h^(d-1) times the number of faces separating the phases."""
    faces = sum(int(np.sum(E.mask != np.roll(E.mask, 1, axis))) for axis in range(E.grid.d))
    return faces * E.grid.h ** (E.grid.d - 1)


def connected_components(E: DiscreteSet) -> dict[str, int]:
    """4-connected component counts of E and its complement on the torus."""
    if E.grid.d != 2:
        raise DegenerateInput("Component counting is implemented for d = 2")
    return {"phase": _torus_components(E.mask), "complement": _torus_components(~E.mask)}


def _torus_components(mask: NDArray[np.bool_]) -> int:
    if not mask.any():
        return 0
    count, labels = cv2.connectedComponents(mask.astype(np.uint8), connectivity=4)
    parent = list(range(count))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    seams = (
        (labels[-1, :], labels[0, :], mask[-1, :] & mask[0, :]),
        (labels[:, -1], labels[:, 0], mask[:, -1] & mask[:, 0]),
    )
    for left, right, both in seams:
        for a, b in zip(left[both], right[both]):
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[ra] = rb
    return len({find(label) for label in range(1, count)})


def smooth_random_mask(grid: TorusGrid, seed: int, modes: int = 3) -> DiscreteSet:
    """Threshold at the median of a random trigonometric field with frequencies |k_i| <= modes."""
    rng = np.random.default_rng(seed)
    axes = grid.axes()
    values = np.zeros(grid.shape)
    ks = np.arange(-modes, modes + 1)
    for k in np.stack(np.meshgrid(*([ks] * grid.d), indexing="ij"), axis=-1).reshape(-1, grid.d):
        if not k.any():
            continue
        phase = 2.0 * np.pi * sum(int(ki) * a for ki, a in zip(k, axes))
        amplitude = rng.normal() / (1.0 + float(k @ k))
        values = values + amplitude * np.cos(phase + rng.uniform(0, 2.0 * np.pi))
    return DiscreteSet(grid, values > np.median(values))


class _SquareSums:
    """Periodic k x k square sums of a 2D mask from a wrapped summed-area table."""

    def __init__(self, mask: NDArray[np.bool_]):
        n = mask.shape[0]
        tiled = np.pad(mask.astype(np.int64), ((0, n), (0, n)), mode="wrap")
        table = np.zeros((2 * n + 1, 2 * n + 1), dtype=np.int64)
        table[1:, 1:] = tiled.cumsum(0).cumsum(1)
        self.n = n
        self.table = table

    def density(self, i, j, k: int):
        i = np.asarray(i) % self.n
        j = np.asarray(j) % self.n
        t = self.table
        total = t[i + k, j + k] - t[i, j + k] - t[i + k, j] + t[i, j]
        return total / float(k * k)


def _walk(start: tuple[int, int], end: tuple[int, int], n: int) -> list[tuple[int, int]]:
    """Unit lattice steps from start to end, first along axis 0, by the shortest periodic route."""
    path = [start]
    i, j = start
    for axis in (0, 1):
        delta = (end[axis] - (i, j)[axis] + n // 2) % n - n // 2
        step = 1 if delta > 0 else -1
        for _ in range(abs(delta)):
            if axis == 0:
                i += step
            else:
                j += step
            path.append((i, j))
    return path


def _closest_to_half(sums: _SquareSums, path: list[tuple[int, int]], k: int):
    corners = np.array(path)
    dens = sums.density(corners[:, 0], corners[:, 1], k)
    best = int(np.argmin(np.abs(dens - 0.5)))
    return tuple(int(c) for c in corners[best]), float(dens[best])


def find_intermediate_density_point(
    E: DiscreteSet, x0: Sequence[float], eps: float
) -> IntermediatePoint:
    """Nested squares of density close to 1/2, halving down to side 8h.

    The first square (side 8 * 2^p cells, circumradius at most eps/2) is found
    by walking from the densest to the sparsest square inside B(x0; eps/2);
    each later square is found the same way between the densest and the
    sparsest quarter of its parent.
    """
    grid = E.grid
    if grid.d != 2:
        raise DegenerateInput("The square construction is implemented for d = 2")
    h = grid.h
    ball = grid.distance(x0) < eps
    inside = int(E.mask[ball].sum())
    if inside == 0 or inside == int(ball.sum()):
        raise DegenerateInput("One phase is empty in B(x0; eps)")
    k = MIN_SQUARE_CELLS
    if k * h * np.sqrt(2.0) / 2.0 > eps / 2.0:
        raise UnresolvedRadius(f"eps={eps} too small for squares of {MIN_SQUARE_CELLS} cells")
    while 2 * k * h * np.sqrt(2.0) / 2.0 <= eps / 2.0 and 2 * k <= grid.n // 2:
        k *= 2

    sums = _SquareSums(E.mask)
    reach = eps / 2.0 - k * h * np.sqrt(2.0) / 2.0
    dx, dy = grid.displacement(x0)
    # lower corners whose square centre lies within reach of x0
    offset = (k / 2.0 - 0.5) * h
    centre_dist = np.hypot((dx + offset + 0.5) % 1.0 - 0.5, (dy + offset + 0.5) % 1.0 - 0.5)
    ci, cj = np.nonzero(centre_dist <= reach)
    if ci.size == 0:
        ci, cj = np.unravel_index(np.array([np.argmin(centre_dist)]), grid.shape)
    dens = sums.density(ci, cj, k)
    hi, lo = int(np.argmax(dens)), int(np.argmin(dens))
    path = _walk((int(ci[hi]), int(cj[hi])), (int(ci[lo]), int(cj[lo])), grid.n)
    corner, value = _closest_to_half(sums, path, k)
    trace = [(k * h, value)]
    logger.debug("square side %d cells: corner %s density %.4f", k, corner, value)

    while k // 2 >= MIN_SQUARE_CELLS:
        half = k // 2
        quarters = [(corner[0] + a * half, corner[1] + b * half) for a in (0, 1) for b in (0, 1)]
        qi, qj = np.array(quarters).T
        qd = sums.density(qi, qj, half)
        start, end = quarters[int(np.argmax(qd))], quarters[int(np.argmin(qd))]
        corner, value = _closest_to_half(sums, _walk(start, end, grid.n), half)
        k = half
        trace.append((k * h, value))
        logger.debug("square side %d cells: corner %s density %.4f", k, corner, value)

    point = tuple(float(((c + k / 2.0) * h) % 1.0) for c in corner)
    radii = []
    r = MIN_SQUARE_CELLS * h
    while r <= eps / 2.0 + 1e-12:
        radii.append(r)
        r *= 2.0
    ball_densities = [(r, density(E, point, r)) for r in radii]
    return IntermediatePoint(point=point, trace=trace, ball_densities=ball_densities)


def _edge_point(
    v: Array, n: int, h: float, i: int, j: int, axis: int
) -> tuple[float, float]:
    """Linear-interpolated crossing on the edge from cell (i, j) to its +axis neighbour."""
    a = v[i, j]
    b = v[(i + 1) % n, j] if axis == 0 else v[i, (j + 1) % n]
    t = a / (a - b)
    x = (i + 0.5 + (t if axis == 0 else 0.0)) * h
    y = (j + 0.5 + (t if axis == 1 else 0.0)) * h
    return x % 1.0, y % 1.0


def _segments(v: Array) -> list[tuple[tuple, tuple]]:
    """Marching-squares segments between crossing edges, keyed by (axis, i, j)."""
    n = v.shape[0]
    pos = v > 0
    p0 = pos
    p1 = np.roll(pos, -1, 0)
    p2 = np.roll(np.roll(pos, -1, 0), -1, 1)
    p3 = np.roll(pos, -1, 1)
    code = p0.astype(np.int8) + 2 * p1 + 4 * p2 + 8 * p3
    segments = []
    for i, j in np.argwhere((code != 0) & (code != 15)):
        i, j = int(i), int(j)
        ip, jp = (i + 1) % n, (j + 1) % n
        e0, e1, e2, e3 = (0, i, j), (1, ip, j), (0, i, jp), (1, i, j)
        s = (p0[i, j], p1[i, j], p2[i, j], p3[i, j])
        pairs = ((e0, s[0], s[1]), (e1, s[1], s[2]), (e2, s[3], s[2]), (e3, s[0], s[3]))
        crossing = [e for e, a, b in pairs if a != b]
        if len(crossing) == 2:
            segments.append((crossing[0], crossing[1]))
            continue
        # saddle: the cell average decides whether the diagonal through corner 0 is connected
        average = (v[i, j] + v[ip, j] + v[ip, jp] + v[i, jp]) / 4.0
        if (average > 0) == s[0]:
            segments.extend([(e0, e1), (e2, e3)])
        else:
            segments.extend([(e0, e3), (e1, e2)])
    return segments


def trace_level_curves(eta: ScalarField, level: float = 0.0) -> CurveSet:
    """Closed polylines of {eta = level} on the torus (marching squares)."""
    grid = eta.grid
    if grid.d != 2:
        raise DegenerateInput("Level curves are traced for d = 2")
    n, h = grid.n, grid.h
    v = np.asarray(eta.values) - level
    # exact zeros are nudged to the positive side
    v = np.where(v == 0.0, np.finfo(float).tiny, v)
    neighbours: dict[tuple, list[tuple]] = {}
    for a, b in _segments(v):
        neighbours.setdefault(a, []).append(b)
        neighbours.setdefault(b, []).append(a)

    grads = gradient_values(np.asarray(eta.values), h)
    curves = []
    seen: set[tuple] = set()
    for start in neighbours:
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            first, *rest = neighbours[cur]
            nxt = rest[0] if first == prev and rest else first
            if nxt == start or nxt in seen:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        points = np.array([_edge_point(v, n, h, e[1], e[2], e[0]) for e in loop])
        curves.append(_curve(points, grads, h))
    logger.debug("level %.6g: %d curves", level, len(curves))
    return CurveSet(level=float(level), curves=curves)


def _curve(points: Array, grads: list[Array], h: float) -> Curve:
    closed = np.vstack([points, points[:1]])
    steps = np.diff(closed, axis=0)
    steps -= np.round(steps)
    vertices = np.vstack([closed[:1], closed[:1] + np.cumsum(steps, axis=0)])
    length = float(np.sum(np.hypot(steps[:, 0], steps[:, 1])))
    gx = bilinear_sample(grads[0], h, points[:, 0], points[:, 1])
    gy = bilinear_sample(grads[1], h, points[:, 0], points[:, 1])
    norm = np.hypot(gx, gy)
    xs, ys = vertices[:-1, 0], vertices[:-1, 1]
    area = 0.5 * float(np.sum(xs * np.roll(ys, -1) - np.roll(xs, -1) * ys))
    tangent = steps + np.roll(steps, 1, axis=0)
    # outward normal of a counter-clockwise loop is the tangent turned clockwise
    outward = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1) * (1.0 if area >= 0 else -1.0)
    flux = float(np.sum(outward[:, 0] * gx + outward[:, 1] * gy))
    min_gradient = float(norm.min())
    return Curve(
        vertices=vertices,
        length=length,
        min_gradient=min_gradient,
        normal_sign=1 if flux >= 0 else -1,
        near_critical=min_gradient < 10.0 * h,
    )


def _vertex_weights(eta: ScalarField, curve: Curve) -> tuple[Array, Array]:
    """Curve vertices (open) and trapezoid weights ds / |grad eta|."""
    pts = curve.vertices[:-1]
    grads = gradient_values(np.asarray(eta.values), eta.grid.h)
    gx = bilinear_sample(grads[0], eta.grid.h, pts[:, 0], pts[:, 1])
    gy = bilinear_sample(grads[1], eta.grid.h, pts[:, 0], pts[:, 1])
    norm = np.hypot(gx, gy)
    if norm.min() < GRADIENT_FLOOR:
        raise DegenerateGradient("|grad eta| vanishes on the curve", min_gradient=float(norm.min()))
    seg = np.hypot(*np.diff(curve.vertices, axis=0).T)
    ds = 0.5 * (seg + np.roll(seg, 1))
    return pts, ds / norm


def weighted_curve_integral(eta: ScalarField, curve: Curve) -> float:
    """Trapezoid rule for the arclength integral of 1/|grad eta|."""
    _, weights = _vertex_weights(eta, curve)
    return float(weights.sum())


def _periodic_dirichlet(m: int) -> sp.csr_matrix:
    one_d = sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], format="lil")
    one_d[0, m - 1] = -1.0
    one_d[m - 1, 0] = -1.0
    return one_d.tocsr()


def stability_eigenvalue(
    eta: ScalarField,
    curve: Curve,
    penalized: bool = False,
    patch_width: float = 0.25,
    max_cells: int = 64,
) -> float:
    """Smallest Rayleigh quotient of int |grad v|^2 against int_curve v^2 / |grad eta|.

    v lives on a periodic patch around the curve (bounding box padded by
    patch_width / 2 per side, coarsened to at most max_cells per axis) and is
    restricted bilinearly to the curve vertices. The default mode imposes
    int_curve v / |grad eta| = 0; the penalized mode adds int v^2 instead.
    """
    grid = eta.grid
    if grid.d != 2:
        raise DegenerateInput("Curve spectra are computed for d = 2")
    pts, weights = _vertex_weights(eta, curve)
    h = grid.h
    unwrapped = curve.vertices[:-1]
    lo = unwrapped.min(axis=0) - patch_width / 2.0
    hi = unwrapped.max(axis=0) + patch_width / 2.0
    cells = np.minimum(np.ceil((hi - lo) / h).astype(int), grid.n)
    stride = max(1, int(np.ceil(cells.max() / max_cells)))
    shape = tuple(max(3, int(np.ceil(c / stride))) for c in cells)
    hp = stride * h

    rows, cols, vals = [], [], []
    local = (unwrapped - lo) / hp
    base = np.floor(local).astype(int)
    frac = local - base
    for di in (0, 1):
        for dj in (0, 1):
            w = (frac[:, 0] if di else 1 - frac[:, 0]) * (frac[:, 1] if dj else 1 - frac[:, 1])
            idx = ((base[:, 0] + di) % shape[0]) * shape[1] + (base[:, 1] + dj) % shape[1]
            rows.append(np.arange(len(pts)))
            cols.append(idx)
            vals.append(w)
    size = shape[0] * shape[1]
    restrict = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(pts), size),
    )
    stiffness = sp.kron(_periodic_dirichlet(shape[0]), sp.identity(shape[1])) + sp.kron(
        sp.identity(shape[0]), _periodic_dirichlet(shape[1])
    )
    A = stiffness.toarray()
    M = (restrict.T @ sp.diags(weights) @ restrict).toarray()
    if penalized:
        A = A + hp * hp * np.eye(size)
        kappa = scipy.linalg.eigh(M, A, eigvals_only=True, subset_by_index=[size - 1, size - 1])
    else:
        c = np.asarray(restrict.T @ weights).reshape(1, -1)
        Z = scipy.linalg.null_space(c)
        A_z = Z.T @ A @ Z
        M_z = Z.T @ M @ Z
        top = A_z.shape[0] - 1
        kappa = scipy.linalg.eigh(M_z, A_z, eigvals_only=True, subset_by_index=[top, top])
    kappa_max = float(kappa[0])
    if kappa_max <= 0:
        raise DegenerateGradient("Curve mass matrix vanishes on the patch")
    sigma = 1.0 / kappa_max
    logger.debug("stability eigenvalue %.6g on a %s patch (stride %d)", sigma, shape, stride)
    return sigma


def ball_annulus_scaling(
    grid: TorusGrid,
    x0: Sequence[float],
    r: float,
    fractions: Sequence[float] = (0.1, 0.2, 0.4),
) -> ScalingReport:
    """W^{-1,2} gap between a central ball and an outer annulus holding the same cells of B(x0; r).

    In d = 2 the squared gap carries a factor 1/2 + ln((1 - D) / D); the
    reported exponent is fitted after dividing it out.
    """
    if r >= 0.5:
        raise DegenerateInput(f"Radius {r} does not fit in the torus")
    if r < 3.0 * grid.h:
        raise UnresolvedRadius(f"Radius {r} below 3h = {3.0 * grid.h}")
    dist = grid.distance(x0).reshape(-1)
    inside = np.flatnonzero(dist < r)
    order = inside[np.argsort(dist[inside], kind="stable")]
    rows = []
    for frac in fractions:
        if not 0.0 < frac < 0.5:
            raise DegenerateInput("Volume fractions must lie in (0, 1/2)")
        count = int(round(frac * order.size))
        diff = np.zeros(grid.size)
        diff[order[:count]] = 1.0
        diff[order[order.size - count :]] = -1.0
        gap = neg_sobolev_norm(ScalarField(grid, diff), 1).value ** 2
        log_factor = 0.5 + np.log((1.0 - frac) / frac) if grid.d == 2 else 1.0
        rows.append(
            {"D": float(frac), "norm_sq": float(gap), "compensated": float(gap / log_factor)}
        )
    log_d = np.log([row["D"] for row in rows])
    exponent = float(np.polyfit(log_d, np.log([row["compensated"] for row in rows]), 1)[0])
    raw = float(np.polyfit(log_d, np.log([row["norm_sq"] for row in rows]), 1)[0])
    target = (grid.d + 2) / grid.d
    logger.info("ball/annulus exponent %.3f (raw %.3f, target %.3f)", exponent, raw, target)
    return ScalingReport(rows=rows, exponent=exponent, raw_exponent=raw, target=target)
