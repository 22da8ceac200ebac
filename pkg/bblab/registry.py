"""Model registry: reaction nonlinearities and objective integrands.

A bilinear nonlinearity is given through its population form B(P); the
log-variable form follows as Q(theta) = B(e^theta) / e^theta. An additive
nonlinearity enters the state equation as -mu Lap y = m + R(y).

Objectives are written in the population variable, psi(x, P) = w(x) psi0(P);
the log-variable integrand j(x, theta) = psi(x, e^theta) and its derivatives
are derived here and share one calling convention across solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from bblab.errors import DegenerateInput

Array = NDArray[np.float64]
ScalarFn = Callable[[Array], Array]

BILINEAR = "bilinear"
ADDITIVE = "additive"


@dataclass(frozen=True)
class Nonlinearity:
    name: str
    coupling: str
    reaction: ScalarFn
    reaction_dp: ScalarFn
    reaction_dpp: ScalarFn
    params: Mapping[str, float] = field(default_factory=dict)

    # log-variable form, bilinear models only

    def q(self, theta: Array) -> Array:
        p = np.exp(theta)
        return self.reaction(p) / p

    def dq(self, theta: Array) -> Array:
        p = np.exp(theta)
        return self.reaction_dp(p) - self.reaction(p) / p

    def d2q(self, theta: Array) -> Array:
        p = np.exp(theta)
        return p * self.reaction_dpp(p) - self.reaction_dp(p) + self.reaction(p) / p


@dataclass(frozen=True)
class Objective:
    name: str
    psi: ScalarFn
    psi_dp: ScalarFn
    psi_dpp: ScalarFn
    weight: Callable[[list[Array]], Array] | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def weights(self, axes: list[Array], shape: tuple[int, ...]) -> Array:
        if self.weight is None:
            return np.ones(shape)
        return np.broadcast_to(self.weight(axes), shape).astype(float)

    # j(x, theta) = w psi(e^theta)

    def j(self, theta: Array, w: Array) -> Array:
        return w * self.psi(np.exp(theta))

    def dj(self, theta: Array, w: Array) -> Array:
        p = np.exp(theta)
        return w * self.psi_dp(p) * p

    def d2j(self, theta: Array, w: Array) -> Array:
        p = np.exp(theta)
        return w * (self.psi_dpp(p) * p * p + self.psi_dp(p) * p)


def _logistic(params: Mapping[str, float]) -> Nonlinearity:
    capacity = float(params.get("capacity", 1.0))
    if capacity <= 0:
        raise DegenerateInput("logistic capacity must be positive")
    return Nonlinearity(
        name="logistic",
        coupling=BILINEAR,
        reaction=lambda p: -(p * p) / capacity,
        reaction_dp=lambda p: -2.0 * p / capacity,
        reaction_dpp=lambda p: np.full_like(p, -2.0 / capacity),
        params=dict(params),
    )


def _shifted_logistic(params: Mapping[str, float]) -> Nonlinearity:
    # Q(u) = -(e^u - 1)
    return Nonlinearity(
        name="shifted_logistic",
        coupling=BILINEAR,
        reaction=lambda p: p - p * p,
        reaction_dp=lambda p: 1.0 - 2.0 * p,
        reaction_dpp=lambda p: np.full_like(p, -2.0),
        params=dict(params),
    )


def _linear_interaction(params: Mapping[str, float]) -> Nonlinearity:
    # -mu Lap y = y (1 - y) + m
    return Nonlinearity(
        name="linear_interaction",
        coupling=ADDITIVE,
        reaction=lambda y: y * (1.0 - y),
        reaction_dp=lambda y: 1.0 - 2.0 * y,
        reaction_dpp=lambda y: np.full_like(y, -2.0),
        params=dict(params),
    )


NONLINEARITIES: dict[str, Callable[[Mapping[str, float]], Nonlinearity]] = {
    "logistic": _logistic,
    "shifted_logistic": _shifted_logistic,
    "linear_interaction": _linear_interaction,
}


def _total_population(params: Mapping[str, float]) -> Objective:
    return Objective(
        name="total_population",
        psi=lambda p: p,
        psi_dp=lambda p: np.ones_like(p),
        psi_dpp=lambda p: np.zeros_like(p),
        params=dict(params),
    )


def _weighted_population(params: Mapping[str, float]) -> Objective:
    amplitude = float(params.get("amplitude", 0.5))
    if not 0.0 <= amplitude <= 1.0:
        raise DegenerateInput("weight amplitude must lie in [0, 1]")
    return Objective(
        name="weighted_population",
        psi=lambda p: p,
        psi_dp=lambda p: np.ones_like(p),
        psi_dpp=lambda p: np.zeros_like(p),
        weight=lambda axes: 1.0 + amplitude * np.cos(2.0 * np.pi * axes[0]),
        params=dict(params),
    )


def _negative_population(params: Mapping[str, float]) -> Objective:
    return Objective(
        name="negative_population",
        psi=lambda p: -p,
        psi_dp=lambda p: -np.ones_like(p),
        psi_dpp=lambda p: np.zeros_like(p),
        params=dict(params),
    )


def _log_population(params: Mapping[str, float]) -> Objective:
    # j(theta) = theta
    return Objective(
        name="log_population",
        psi=np.log,
        psi_dp=lambda p: 1.0 / p,
        psi_dpp=lambda p: -1.0 / (p * p),
        params=dict(params),
    )


def _negative_log_population(params: Mapping[str, float]) -> Objective:
    # j(theta) = -theta
    return Objective(
        name="negative_log_population",
        psi=lambda p: -np.log(p),
        psi_dp=lambda p: -1.0 / p,
        psi_dpp=lambda p: 1.0 / (p * p),
        params=dict(params),
    )


OBJECTIVES: dict[str, Callable[[Mapping[str, float]], Objective]] = {
    "total_population": _total_population,
    "weighted_population": _weighted_population,
    "negative_population": _negative_population,
    "log_population": _log_population,
    "negative_log_population": _negative_log_population,
}


def get_nonlinearity(name: str, params: Mapping[str, float] | None = None) -> Nonlinearity:
    try:
        factory = NONLINEARITIES[name]
    except KeyError:
        raise DegenerateInput(f"Unknown nonlinearity '{name}'") from None
    return factory(params or {})


def get_objective(name: str, params: Mapping[str, float] | None = None) -> Objective:
    try:
        factory = OBJECTIVES[name]
    except KeyError:
        raise DegenerateInput(f"Unknown objective '{name}'") from None
    return factory(params or {})


def registry_models() -> dict[str, list[str]]:
    return {"nonlinearities": sorted(NONLINEARITIES), "objectives": sorted(OBJECTIVES)}
