"""Pydantic models for experiment configuration, run records and API payloads."""
import math
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    computed_field,
    field_validator,
    model_validator,
)

from .exceptions import ConfigError

FilterVariant = Literal[
    "ETKF", "ETKFP", "ETKFA", "LETKF", "LETKFP", "LETKFA", "VFP", "VFPSTAB", "VFPDAE"
]
CrmseScaling = Union[Literal["default", "identity"], List[float], Dict[str, float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PendulumSettings(_Strict):
    """Double pendulum parameters."""

    kind: Literal["pendulum"] = "pendulum"
    time_step: float = Field(default=0.01, gt=0, description="PHERK step")
    gravity: float = Field(default=9.8, gt=0, description="Gravitational acceleration")
    sample_interval: float = Field(
        default=0.008, gt=0, description="Spacing of the trajectory the truth and members are drawn from"
    )
    obs_variance: float = Field(default=0.1, ge=0, description="Observation error variance (R = v I)")


class KdvSettings(_Strict):
    """Korteweg-de Vries parameters."""

    kind: Literal["kdv"] = "kdv"
    time_step: float = Field(default=0.01, gt=0, description="Implicit midpoint step")
    n_grid: int = Field(default=100, ge=5, description="Number of periodic grid points")
    domain: Tuple[float, float] = Field(default=(-10.0, 10.0), description="Periodic domain bounds")
    nonlinear_form: Literal["skew", "flux"] = Field(
        default="skew", description="Discretization of the nonlinear term"
    )
    obs_stride: int = Field(default=4, ge=1, description="Every obs_stride-th grid point is observed")
    obs_variance: float = Field(default=0.2, ge=0, description="Observation error variance")
    ensemble_spread: float = Field(
        default=0.1, gt=0, description="Standard deviation of the initial member perturbations"
    )
    laplacian_shift: float = Field(
        default=1e-3, gt=0, description="Shift added to the periodic Laplacian"
    )


class NavierStokesSettings(_Strict):
    """Wind-driven Navier-Stokes parameters."""

    kind: Literal["navier_stokes"] = "navier_stokes"
    time_step: float = Field(default=0.0109 / 40, gt=0, description="RK3 step")
    nx: int = Field(default=64, ge=5, description="Grid points along x in [0, 1]")
    ny: int = Field(default=129, ge=5, description="Grid points along y in [-1, 1]")
    grid_scale: int = Field(
        default=1, ge=1, description="Coarsening factor: nx/f and (ny-1)/f + 1 points"
    )
    reynolds: float = Field(default=450.0, gt=0, description="Reynolds number")
    rossby: float = Field(default=0.0036, gt=0, description="Rossby number")
    obs_per_axis: int = Field(default=16, ge=1, description="Observation lattice points per axis")
    obs_variance: float = Field(default=400.0, ge=0, description="Observation error variance")
    initial_vorticity: float = Field(
        default=10.0, gt=0, description="RMS of the smooth random initial vorticity"
    )
    spinup_time: float = Field(
        default=100 * 0.0109, ge=0, description="Truth spin-up before the first cycle"
    )
    ensemble_spread: float = Field(
        default=10.0, gt=0, description="RMS of the initial velocity perturbations"
    )

    @property
    def grid(self) -> Tuple[int, int]:
        return self.nx // self.grid_scale, (self.ny - 1) // self.grid_scale + 1


ModelSettings = Annotated[
    Union[PendulumSettings, KdvSettings, NavierStokesSettings], Field(discriminator="kind")
]


class FlowSettings(_Strict):
    """Pseudo-time integration of the particle flow."""

    pseudo_step: float = Field(default=1e-3, gt=0, description="Pseudo-time step")
    stop_tol: float = Field(
        default=1e-6,
        gt=0,
        description="Stop when the drift moves the ensemble mean less than this (max norm)",
    )
    max_steps: int = Field(default=1000, ge=1, description="Upper bound on pseudo-time steps")
    integrator: Literal["euler-maruyama", "rosenbrock-em"] = Field(
        default="euler-maruyama", description="SDE integrator for VFP and VFPSTAB"
    )
    dae_scheme: Literal["anchor-at-x0", "evolve-project", "rosenbrock-project", "eliminated"] = Field(
        default="evolve-project", description="VFPDAE step"
    )
    stabilization: float = Field(default=0.0, ge=0, description="VFPSTAB constant gamma")
    perturbed_obs: Optional[float] = Field(
        default=None, gt=0, description="Scale s of per-member observation noise N(0, s^2 R)"
    )
    warm_start: Literal["none", "etkfp"] = Field(
        default="none", description="Initial ensemble of the flow"
    )
    warm_start_inflation: float = Field(
        default=1.0, ge=1.0, description="Inflation of the warm-start ETKFP analysis"
    )
    check_manifold: bool = Field(
        default=False, description="Fail when a VFPDAE step leaves the manifold"
    )


class DiffusionSettings(_Strict):
    """Diffusion sigma of the flow."""

    kind: Literal["none", "diagonal", "inverse_laplacian", "forecast_sqrt"] = Field(
        default="none", description="Diffusion family"
    )
    values: Optional[List[float]] = Field(default=None, description="Diagonal of sigma")
    scale: float = Field(default=1.0, ge=0, description="Multiplier of sigma")

    @model_validator(mode="after")
    def _check_values(self) -> "DiffusionSettings":
        if self.kind == "diagonal" and not self.values:
            raise ValueError("diagonal diffusion needs 'values'")
        return self


class PrecisionSettings(_Strict):
    """Regularized precision used by the flow."""

    kind: Literal["shrinkage", "laplacian"] = Field(default="shrinkage", description="Precision family")
    shrinkage: float = Field(default=0.01, ge=0, le=1, description="Shrinkage weight gamma_sh")


class FilterSettings(_Strict):
    """Analysis scheme and its parameters."""

    variant: FilterVariant = Field(..., description="Analysis variant")
    inflation: float = Field(default=1.0, ge=1.0, description="Multiplicative inflation alpha")
    localization_radius: Optional[float] = Field(
        default=None, gt=0, description="Gaspari-Cohn radius for LETKF variants"
    )
    pseudo_obs_variance: Optional[float] = Field(
        default=None, gt=0, description="R_g = v I for augmented variants"
    )
    projection_tol: float = Field(default=1e-10, gt=0, description="Projection tolerance on |g|")
    projection_max_iter: int = Field(default=50, ge=1, description="Newton iteration cap")
    flow: FlowSettings = Field(default_factory=FlowSettings, description="Particle flow settings")
    diffusion: DiffusionSettings = Field(default_factory=DiffusionSettings, description="Flow diffusion")
    precision: PrecisionSettings = Field(default_factory=PrecisionSettings, description="Flow precision")

    @model_validator(mode="after")
    def _check_variant(self) -> "FilterSettings":
        if self.variant.startswith("L") and self.localization_radius is None:
            raise ValueError(f"{self.variant} needs 'localization_radius'")
        if self.variant.endswith("A") and self.pseudo_obs_variance is None:
            raise ValueError(f"{self.variant} needs 'pseudo_obs_variance'")
        return self

    @property
    def is_flow(self) -> bool:
        return self.variant.startswith("VFP")


class SeedSettings(_Strict):
    """Explicit seeds of every random stream."""

    truth: int = Field(default=0, ge=0, description="Initial truth and ensemble sampling")
    observations: int = Field(default=1, ge=0, description="Observation noise")
    ensemble: int = Field(default=2, ge=0, description="Initial ensemble perturbations")
    flow: int = Field(default=3, ge=0, description="Flow Wiener increments and perturbed observations")

    @classmethod
    def from_base(cls, seed: int) -> "SeedSettings":
        return cls(truth=seed, observations=seed + 1, ensemble=seed + 2, flow=seed + 3)


class MetricSettings(_Strict):
    """Constraint-error scalings; one CRMSE column per entry."""

    crmse: Dict[str, CrmseScaling] = Field(
        default_factory=lambda: {"default": "default"},
        description="Named diagonal scalings E: 'default', 'identity', a diagonal, or group weights",
    )


class OutputSettings(_Strict):
    """Where and how run records are written."""

    directory: Optional[str] = Field(default=None, description="Output directory (VFPDA_RESULTS_DIR if unset)")
    record_wall_time: bool = Field(
        default=True, description="Record per-cycle wall time (disable for byte-identical records)"
    )
    write_csv: bool = Field(default=True, description="Write the per-cycle CSV next to the JSON record")


class ExperimentConfig(_Strict):
    """One twin experiment."""

    name: str = Field(..., min_length=1, description="Experiment name, used for output files")
    model: ModelSettings = Field(..., description="Forward model and its parameters")
    filter: FilterSettings = Field(..., description="Analysis scheme")
    n_members: int = Field(..., ge=2, description="Ensemble size n_e")
    cycles: int = Field(..., ge=0, description="Number of assimilation cycles")
    spinup: int = Field(default=0, ge=0, description="Cycles excluded from the error statistics")
    obs_interval: float = Field(..., gt=0, description="Time between observations")
    seeds: SeedSettings = Field(default_factory=SeedSettings, description="Random seeds")
    metrics: MetricSettings = Field(default_factory=MetricSettings, description="CRMSE scalings")
    output: OutputSettings = Field(default_factory=OutputSettings, description="Output options")

    @model_validator(mode="after")
    def _check_spinup(self) -> "ExperimentConfig":
        if self.spinup > self.cycles:
            raise ValueError(f"spinup ({self.spinup}) exceeds cycles ({self.cycles})")
        return self


def _error_path(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a config tree; the first error is reported with its dotted key path."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(first.get("msg", str(e)), _error_path(first)) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a YAML experiment file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config: {e}", str(path)) from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", str(path))
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML form; ``parse_config(yaml.safe_load(...))`` returns an equal config."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


class CycleRow(BaseModel):
    """Metrics of one assimilation cycle."""

    cycle: int = Field(..., description="0-based cycle index k")
    time: float = Field(..., description="Observation time (k + 1) * obs_interval")
    rmse: Optional[float] = Field(default=None, description="Cumulative RMSE, None during spinup")
    crmse: Dict[str, Optional[float]] = Field(
        default_factory=dict, description="Cumulative CRMSE per named scaling"
    )
    max_abs_g: float = Field(..., description="Largest |g| over members after the analysis")
    flow_steps: int = Field(default=0, description="Pseudo-time steps taken (0 for Kalman variants)")
    flow_converged: Optional[bool] = Field(default=None, description="Whether the flow met stop_tol")
    wall_ms: float = Field(default=0.0, description="Wall time of the cycle in milliseconds")


class FailureInfo(BaseModel):
    """Where and why a run stopped early."""

    cycle: int = Field(..., description="Cycle at which the analysis or forecast failed")
    error: str = Field(..., description="Exception type")
    message: str = Field(..., description="Exception message")
    details: Dict[str, Any] = Field(default_factory=dict, description="Machine-readable error record")


class RunRecord(BaseModel):
    """Full record of one twin experiment."""

    run_id: str = Field(..., description="Identifier derived from the config")
    version: str = Field(..., description="Package version that produced the record")
    config: ExperimentConfig = Field(..., description="Configuration the run used")
    rows: List[CycleRow] = Field(default_factory=list, description="One row per completed cycle")
    failure: Optional[FailureInfo] = Field(default=None, description="Set when the run was truncated")

    @property
    def truncated(self) -> bool:
        return self.failure is not None

    @property
    def final_rmse(self) -> Optional[float]:
        return self.rows[-1].rmse if self.rows else None

    @property
    def final_crmse(self) -> Dict[str, Optional[float]]:
        return dict(self.rows[-1].crmse) if self.rows else {}

    @field_validator("rows")
    @classmethod
    def _finite(cls, rows: List[CycleRow]) -> List[CycleRow]:
        for row in rows:
            if row.rmse is not None and math.isnan(row.rmse):
                raise ValueError(f"cycle {row.cycle}: RMSE is NaN")
        return rows


class ExperimentSummary(BaseModel):
    """Response model for a finished experiment."""

    run_id: str = Field(..., description="Run identifier")
    name: str = Field(..., description="Experiment name")
    variant: str = Field(..., description="Analysis variant")
    cycles_completed: int = Field(..., description="Number of cycles in the record")
    final_rmse: Optional[float] = Field(default=None, description="RMSE at the last cycle")
    final_crmse: Dict[str, Optional[float]] = Field(
        default_factory=dict, description="CRMSE per scaling at the last cycle"
    )
    failure: Optional[FailureInfo] = Field(default=None, description="Failure, if truncated")

    @classmethod
    def from_record(cls, record: RunRecord) -> "ExperimentSummary":
        return cls(
            run_id=record.run_id,
            name=record.config.name,
            variant=record.config.filter.variant,
            cycles_completed=len(record.rows),
            final_rmse=record.final_rmse,
            final_crmse=record.final_crmse,
            failure=record.failure,
        )


class CheckItem(BaseModel):
    """One self-check result."""

    name: str = Field(..., description="What was checked")
    value: float = Field(..., description="Measured value")
    threshold: float = Field(..., description="Largest accepted value")
    passed: bool = Field(..., description="Whether value <= threshold")


class ValidationReport(BaseModel):
    """Response model for a model self-check."""

    model: str = Field(..., description="Model id")
    checks: List[CheckItem] = Field(default_factory=list, description="Individual checks")

    @computed_field
    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)
