"""Two-dimensional 2-homogeneous blow-up profiles.

A profile is eta0 = r^2 phi(theta) with

    -phi'' - 4 phi = f0 1{phi > 0} - g0 1{phi <= 0}.

On a component of length L starting at theta0, with t = theta - theta0,
phi = a sin^2 t + B sin 2t where a = -f0/2 on positivity components and
a = g0/2 on negativity components. Vanishing at t = L forces
B = -(a/2) tan L, and C^1 matching across interfaces gives
tan L_pos = (g0/f0) tan L_neg.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from bblab.errors import DegenerateInput, NonPeriodic
from bblab.grid import ScalarField, TorusGrid

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

TWO_PI = 2.0 * np.pi
CLOSURE_SCAN = 4096
ROTATION_GRID = 4096
SHOOTING_STEPS = 20000
EVENT_TOL = 1e-12
PERIOD_TOL = 1e-9
C1_TOL = 1e-8


@dataclass(frozen=True)
class ProfileComponent:
    sign: str
    length: float
    coefficient: float
    start: float


@dataclass(frozen=True)
class AngularProfile:
    f0: float
    g0: float
    components: list[ProfileComponent]
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.components) < 2 or len(self.components) % 2:
            raise DegenerateInput("A profile needs an even number of components")
        total = sum(c.length for c in self.components)
        if abs(total - TWO_PI) > 1e-10:
            raise DegenerateInput(f"Component lengths sum to {total}, not 2 pi")
        signs = [c.sign for c in self.components]
        if any(a == b for a, b in zip(signs, signs[1:] + signs[:1])):
            raise DegenerateInput("Component signs must alternate")

    @property
    def N(self) -> int:
        return len(self.components)

    def interfaces(self) -> Array:
        return np.sort(np.array([c.start % TWO_PI for c in self.components]))

    def lengths(self, sign: str) -> list[float]:
        return [c.length for c in self.components if c.sign == sign]

    def rotated(self, angle: float) -> "AngularProfile":
        comps = [
            ProfileComponent(c.sign, c.length, c.coefficient, (c.start + angle) % TWO_PI)
            for c in self.components
        ]
        return AngularProfile(self.f0, self.g0, comps, list(self.flags))

    def to_dict(self) -> dict:
        return {
            "f0": self.f0,
            "g0": self.g0,
            "N": self.N,
            "flags": list(self.flags),
            "components": [asdict(c) for c in self.components],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AngularProfile":
        comps = [ProfileComponent(**c) for c in data["components"]]
        return cls(float(data["f0"]), float(data["g0"]), comps, list(data.get("flags", [])))


def _leading(profile: AngularProfile, sign: str) -> float:
    return profile.g0 / 2.0 if sign == "-" else -profile.f0 / 2.0


def _locate(profile: AngularProfile, theta: Array) -> tuple[Array, Array, Array]:
    theta = np.asarray(theta, dtype=float) % TWO_PI
    starts = np.array([c.start for c in profile.components])
    lengths = np.array([c.length for c in profile.components])
    local = (theta[None, ...] - starts.reshape((-1,) + (1,) * theta.ndim)) % TWO_PI
    excess = np.maximum(local - lengths.reshape((-1,) + (1,) * theta.ndim), 0.0)
    index = np.argmin(excess, axis=0)
    t = np.take_along_axis(local, index[None, ...], axis=0)[0]
    a = np.array([_leading(profile, c.sign) for c in profile.components])[index]
    b = np.array([c.coefficient for c in profile.components])[index]
    return t, a, b


def profile_values(profile: AngularProfile, theta: Array) -> Array:
    t, a, b = _locate(profile, theta)
    return a * np.sin(t) ** 2 + b * np.sin(2.0 * t)


def profile_derivative(profile: AngularProfile, theta: Array) -> Array:
    t, a, b = _locate(profile, theta)
    return a * np.sin(2.0 * t) + 2.0 * b * np.cos(2.0 * t)


def evaluate_profile(profile: AngularProfile, theta: float) -> float:
    if not 0.0 <= theta < TWO_PI:
        raise DegenerateInput(f"Angle {theta} outside [0, 2 pi)")
    return float(profile_values(profile, np.array(theta)))


def interface_defect(profile: AngularProfile) -> float:
    """Largest value or slope mismatch at the component ends."""
    worst = 0.0
    comps = profile.components
    for k, comp in enumerate(comps):
        nxt = comps[(k + 1) % len(comps)]
        a, b = _leading(profile, comp.sign), comp.coefficient
        L = comp.length
        end_value = a * np.sin(L) ** 2 + b * np.sin(2.0 * L)
        end_slope = a * np.sin(2.0 * L) + 2.0 * b * np.cos(2.0 * L)
        worst = max(worst, abs(end_value), abs(end_slope - 2.0 * nxt.coefficient))
    return float(worst)


def _assemble(f0: float, g0: float, l_neg: float, l_pos: float, n: int) -> AngularProfile:
    if g0 == 0.0:
        b_pos = 0.25 * f0 * np.tan(l_pos)
        b_neg = -b_pos
    else:
        b_neg = -0.25 * g0 * np.tan(l_neg)
        b_pos = 0.25 * f0 * np.tan(l_pos)
    comps = []
    start = 0.0
    for k in range(n):
        if k % 2 == 0:
            comps.append(ProfileComponent("-", float(l_neg), float(b_neg), start))
            start += l_neg
        else:
            comps.append(ProfileComponent("+", float(l_pos), float(b_pos), start))
            start += l_pos
    # the last interface closes the circle
    last = comps[-1]
    comps[-1] = ProfileComponent(last.sign, TWO_PI - last.start, last.coefficient, last.start)
    return AngularProfile(f0, g0, comps)


def _closure_roots(f0: float, g0: float, n: int) -> list[float]:
    target = 2.0 * TWO_PI / n
    lo, hi = (0.0, np.pi / 2.0) if g0 > 0 else (np.pi / 2.0, np.pi)
    ratio = g0 / f0

    def closure(l_neg: float) -> float:
        return l_neg + np.arctan(ratio * np.tan(l_neg)) - target

    samples = lo + (hi - lo) * (np.arange(1, CLOSURE_SCAN) / CLOSURE_SCAN)
    values = np.array([closure(s) for s in samples])
    roots = []
    for k in range(len(samples) - 1):
        a, b = samples[k], samples[k + 1]
        fa, fb = values[k], values[k + 1]
        if fa == 0.0:
            roots.append(float(a))
            continue
        if fa * fb > 0 or fb == 0.0:
            continue
        for _ in range(200):
            mid = 0.5 * (a + b)
            fm = closure(mid)
            if fa * fm <= 0:
                b = mid
            else:
                a, fa = mid, fm
            if b - a < 1e-15:
                break
        roots.append(float(0.5 * (a + b)))
    return roots


def _sign_ok(profile: AngularProfile) -> bool:
    for comp in profile.components:
        mid = comp.start + 0.5 * comp.length
        value = float(profile_values(profile, np.array(mid)))
        if (comp.sign == "+") != (value > 0):
            return False
    return True


def classify_profiles(f0: float, g0: float, N_max: int) -> list[AngularProfile]:
    if f0 <= 0 or f0 + g0 <= 0:
        raise DegenerateInput("Need f0 > 0 and f0 + g0 > 0")
    if N_max < 2 or N_max % 2:
        raise DegenerateInput("N_max must be an even integer >= 2")
    catalogue = []
    for n in range(2, N_max + 1, 2):
        target = 2.0 * TWO_PI / n
        if g0 == 0.0:
            l_pos = target - np.pi / 2.0
            candidates = [(np.pi / 2.0, l_pos)] if 0.0 < l_pos < np.pi / 2.0 else []
        else:
            candidates = [(l, target - l) for l in _closure_roots(f0, g0, n)]
        for l_neg, l_pos in candidates:
            if not (0.0 < l_pos < np.pi / 2.0):
                continue
            profile = _assemble(f0, g0, l_neg, l_pos, n)
            if not _sign_ok(profile):
                logger.debug("N=%d: |I0|=%.6f rejected by sign constraints", n, l_neg)
                continue
            defect = interface_defect(profile)
            if defect > C1_TOL:
                logger.debug("N=%d: interface defect %.3e", n, defect)
                continue
            residual = planar_residual(profile)
            if residual >= 20.0 * (2.0 / 256):
                logger.warning("N=%d profile failed the planar residual test (%.3e)", n, residual)
                continue
            catalogue.append(profile)
    logger.info("classified %d profiles for f0=%g g0=%g", len(catalogue), f0, g0)
    return catalogue


def _rk4(state: Array, dt: float, force: float) -> Array:
    def rhs(s: Array) -> Array:
        return np.array([s[1], -4.0 * s[0] - force])

    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def shooting_oracle(
    f0: float, g0: float, phi0: float, dphi0: float, strict: bool = False
) -> AngularProfile | None:
    """Integrate the angular equation over one turn; a profile only if it closes up.

    Non-periodic runs return None, or raise NonPeriodic when strict.
    """
    if phi0 == 0.0 and dphi0 == 0.0:
        return None
    positive = phi0 > 0 or (phi0 == 0.0 and dphi0 > 0)
    state = np.array([phi0, dphi0], dtype=float)
    dt = TWO_PI / SHOOTING_STEPS
    t = 0.0
    events: list[tuple[float, float, bool]] = []
    if phi0 == 0.0:
        events.append((0.0, dphi0, positive))
    while t < TWO_PI - 1e-15:
        step = min(dt, TWO_PI - t)
        force = f0 if positive else -g0
        nxt = _rk4(state, step, force)
        crossed = nxt[0] < 0 if positive else nxt[0] > 0
        if crossed:
            lo, hi = 0.0, step
            while hi - lo > EVENT_TOL:
                mid = 0.5 * (lo + hi)
                trial = _rk4(state, mid, force)
                if (trial[0] < 0) if positive else (trial[0] > 0):
                    hi = mid
                else:
                    lo = mid
            hit = _rk4(state, hi, force)
            t += hi
            state = np.array([0.0, hit[1]])
            positive = not positive
            if t < TWO_PI - PERIOD_TOL or phi0 != 0.0:
                events.append((t % TWO_PI, state[1], positive))
            continue
        state = nxt
        t += step
    if abs(state[0] - phi0) > PERIOD_TOL or abs(state[1] - dphi0) > PERIOD_TOL:
        logger.debug("shooting (%g, %g): not periodic", phi0, dphi0)
        if strict:
            raise NonPeriodic(
                "Angular solution does not close up",
                phi_gap=float(state[0] - phi0),
                dphi_gap=float(state[1] - dphi0),
            )
        return None
    if len(events) < 2 or len(events) % 2:
        return None
    events.sort(key=lambda e: e[0])
    comps = []
    for k, (angle, slope, entering_positive) in enumerate(events):
        nxt_angle = events[(k + 1) % len(events)][0]
        length = (nxt_angle - angle) % TWO_PI
        sign = "+" if entering_positive else "-"
        comps.append(ProfileComponent(sign, length, slope / 2.0, angle))
    try:
        return AngularProfile(f0, g0, comps)
    except DegenerateInput:
        return None


def _normalized(values: Array) -> Array:
    norm = np.sqrt(np.mean(values**2))
    return values / norm if norm > 0 else values


def match_blowup(
    angular_trace: Sequence[float], catalogue: Sequence[AngularProfile]
) -> tuple[AngularProfile, float, float]:
    """Best profile, rotation and mean-square distance of the normalized trace.

    The trace is sampled at the midpoint angles (k + 1/2) 2 pi / K.
    """
    if not catalogue:
        raise DegenerateInput("Empty catalogue")
    trace = np.asarray(angular_trace, dtype=float)
    if trace.size < 64:
        raise DegenerateInput("Trace needs at least 64 samples")
    theta = (np.arange(trace.size) + 0.5) * TWO_PI / trace.size
    target = _normalized(trace)

    def distance(profile: AngularProfile, alpha: float) -> float:
        return float(np.mean((target - _normalized(profile_values(profile, theta - alpha))) ** 2))

    rotations = np.arange(ROTATION_GRID) * TWO_PI / ROTATION_GRID
    best = (catalogue[0], 0.0, np.inf)
    for profile in catalogue:
        for start in range(0, ROTATION_GRID, 512):
            block = rotations[start : start + 512]
            shifted = profile_values(profile, theta[None, :] - block[:, None])
            norms = np.sqrt(np.mean(shifted**2, axis=1, keepdims=True))
            shifted = shifted / np.where(norms > 0, norms, 1.0)
            errors = np.mean((target[None, :] - shifted) ** 2, axis=1)
            k = int(np.argmin(errors))
            if errors[k] < best[2]:
                best = (profile, float(block[k]), float(errors[k]))
    profile, alpha, _ = best
    step = TWO_PI / ROTATION_GRID
    alpha = _golden(lambda a: distance(profile, a), alpha - step, alpha + step)
    error = distance(profile, alpha)
    return profile, float(alpha % TWO_PI), error


def _golden(fn, a: float, b: float, tol: float = 1e-9) -> float:
    ratio = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def profile_field(profile: AngularProfile, grid: TorusGrid, center: Sequence[float]) -> ScalarField:
    """Planar field r^2 phi(theta) around center, using torus displacements."""
    if grid.d != 2:
        raise DegenerateInput("Profiles are planar")
    dx, dy = grid.displacement(center)
    r2 = dx * dx + dy * dy
    theta = np.arctan2(dy, dx) % TWO_PI
    return ScalarField(grid, r2 * profile_values(profile, theta))


def planar_residual(profile: AngularProfile, n: int = 256) -> float:
    """RMS of -Lap_h eta0 - (f0 1{eta0 > 0} - g0 1{eta0 <= 0}) on [-1, 1]^2.

    Cells within 3h of an interface ray or of the origin are excluded.
    """
    h = 2.0 / n
    x = -1.0 + (np.arange(n) + 0.5) * h
    xx, yy = np.meshgrid(x, x, indexing="ij")
    r = np.hypot(xx, yy)
    theta = np.arctan2(yy, xx) % TWO_PI
    eta = r**2 * profile_values(profile, theta)
    lap = (
        eta[2:, 1:-1] + eta[:-2, 1:-1] + eta[1:-1, 2:] + eta[1:-1, :-2] - 4.0 * eta[1:-1, 1:-1]
    ) / (h * h)
    inner = (slice(1, -1), slice(1, -1))
    rhs = np.where(eta[inner] > 0, profile.f0, -profile.g0)
    keep = r[inner] > 3.0 * h
    for angle in profile.interfaces():
        rel = theta[inner] - angle
        along = np.cos(rel)
        dist = np.where(along > 0, r[inner] * np.abs(np.sin(rel)), r[inner])
        keep &= dist > 3.0 * h
    residual = (-lap - rhs)[keep]
    return float(np.sqrt(np.mean(residual**2))) if residual.size else 0.0


def gradient_floor(profile: AngularProfile, samples: int = 4096) -> float:
    """min over theta of |grad eta0| / r = sqrt(4 phi^2 + phi'^2)."""
    theta = (np.arange(samples) + 0.5) * TWO_PI / samples
    phi = profile_values(profile, theta)
    dphi = profile_derivative(profile, theta)
    return float(np.min(np.sqrt(4.0 * phi**2 + dphi**2)))
