"""Configuration and report schemas (pydantic)."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from bblab.registry import NONLINEARITIES, OBJECTIVES


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelRef(_Strict):
    name: str
    params: dict[str, float] = Field(default_factory=dict)


class ProblemSpec(_Strict):
    form: Literal["theta", "bigTheta"] = "theta"
    nonlinearity: ModelRef = Field(default_factory=lambda: ModelRef(name="logistic"))
    objective: ModelRef = Field(default_factory=lambda: ModelRef(name="total_population"))
    mu: float = Field(1.0, gt=0)
    mode: Literal["constrained", "penalized"] = "constrained"
    m0: Optional[float] = 0.3
    c: Optional[float] = None

    @field_validator("nonlinearity")
    @classmethod
    def _known_nonlinearity(cls, v: ModelRef) -> ModelRef:
        if v.name not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity '{v.name}'")
        return v

    @field_validator("objective")
    @classmethod
    def _known_objective(cls, v: ModelRef) -> ModelRef:
        if v.name not in OBJECTIVES:
            raise ValueError(f"unknown objective '{v.name}'")
        return v

    @model_validator(mode="after")
    def _mode_parameters(self) -> "ProblemSpec":
        if self.mode == "constrained":
            if self.m0 is None or not 0.0 < self.m0 < 1.0:
                raise ValueError("constrained mode needs 0 < m0 < 1")
        else:
            if self.c is None or self.c <= 0.0:
                raise ValueError("penalized mode needs c > 0")
        return self

    @property
    def penalty(self) -> float:
        return float(self.c) if self.mode == "penalized" else 0.0


class OptimizeConfig(_Strict):
    scheme: Literal["thresholding", "projected_gradient"] = "thresholding"
    max_iter: int = Field(200, ge=1)
    fixed_point_tol: float = Field(0.0, ge=0.0)
    gradient_step: float = Field(1.0, gt=0.0)
    pg_tol: float = Field(1e-7, gt=0.0)
    objective_slack: float = Field(1e-9, ge=0.0)
    seed: int = 0


class Tolerances(_Strict):
    state_rms: float = Field(1e-10, gt=0)
    newton_max_iter: int = Field(60, ge=1)
    switch_rel: float = Field(1e-12, gt=0)
    eigen_rel: float = Field(1e-8, gt=0)
    eigen_max_iter: int = Field(500, ge=1)
    bang_bang: float = Field(1e-6, gt=0, lt=0.5)
    weiss_beta: float = Field(0.5, gt=0)
    weiss_slack_cells: float = Field(50.0, ge=0)
    weiss_c0: float = Field(1.0, ge=0)
    regime_growth: float = Field(2.0, gt=1)
    critical_eps1_cells: float = Field(10.0, gt=0)
    critical_eps2_cells: float = Field(10.0, gt=0)
    probe_radius_cells: float = Field(4.0, ge=3)
    patch_width: float = Field(0.25, gt=0)
    patch_max_cells: int = Field(64, ge=8)


class GridConfig(_Strict):
    d: int = Field(2, ge=1, le=3)
    n: int = Field(64, ge=8)


class InitialControl(_Strict):
    kind: Literal["random_bang_bang", "constant", "disk", "smooth", "random"] = "random_bang_bang"
    amplitude: float = Field(0.3, ge=0.0, le=0.5)


class AnalysesConfig(_Strict):
    fg: bool = True
    weiss: bool = False
    blowup_match: bool = False
    boundary: bool = False
    density: bool = False
    second_order: bool = False
    second_order_samples: int = Field(200, ge=1)
    second_order_r0: float = Field(0.05, gt=0, le=0.1)
    weiss_radii: list[float] = Field(
        default_factory=lambda: [0.2 * 2 ** (-k / 2) for k in range(5)]
    )
    density_eps: float = Field(0.1, gt=0)
    fragmentation_sweep: Optional[list[float]] = None

    @field_validator("fragmentation_sweep")
    @classmethod
    def _strictly_decreasing(cls, v: Optional[list[float]]) -> Optional[list[float]]:
        if v is not None:
            if any(mu <= 0 for mu in v):
                raise ValueError("sweep diffusivities must be positive")
            if any(b >= a for a, b in zip(v, v[1:])):
                raise ValueError("fragmentation sweep must be strictly decreasing")
        return v

    @field_validator("weiss_radii")
    @classmethod
    def _decreasing_radii(cls, v: list[float]) -> list[float]:
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("weiss radii must be strictly decreasing")
        return v


class ExperimentConfig(_Strict):
    name: str = "experiment"
    spec: ProblemSpec = Field(default_factory=ProblemSpec)
    grid: GridConfig = Field(default_factory=GridConfig)
    stages: list[Literal["solve", "optimize"]] = Field(
        default_factory=lambda: ["solve", "optimize"]
    )
    optimize: OptimizeConfig = Field(default_factory=OptimizeConfig)
    initial_control: InitialControl = Field(default_factory=InitialControl)
    analyses: AnalysesConfig = Field(default_factory=AnalysesConfig)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    output_dir: Optional[str] = None
    seed: int = 0


# reports


class ClauseResult(BaseModel):
    clause: str
    passed: bool
    worst_u: Optional[float] = None
    worst_value: Optional[float] = None
    detail: str = ""


class ValidationReport(BaseModel):
    model: str
    objective: str
    u_range: tuple[float, float]
    samples: int
    clauses: list[ClauseResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)


class ComparisonReport(BaseModel):
    min_state_gap: float
    objective_gap: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.min_state_gap >= -self.tolerance and self.objective_gap >= -self.tolerance


class ArtifactRecord(BaseModel):
    path: str
    kind: str
    sha256: str
    bytes: int


class StageRecord(BaseModel):
    stage: str
    status: Literal["done", "error", "skipped"]
    error: Optional[str] = None
    type: Optional[str] = None
    details: Optional[str] = None
    summary: dict[str, Any] = Field(default_factory=dict)


class Manifest(BaseModel):
    experiment: str
    config_sha256: str
    status: Literal["done", "error"] = "done"
    exit_code: int = 0
    stages: list[StageRecord] = Field(default_factory=list)
    artifacts: list[ArtifactRecord] = Field(default_factory=list)
