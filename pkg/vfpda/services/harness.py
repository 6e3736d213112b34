"""Twin-experiment driver: truth, synthetic observations and the assimilation loop."""
import hashlib
import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from joblib import Parallel, delayed

from .. import __version__
from ..config import settings
from ..dynamics import ForwardModel, build_model
from ..exceptions import AssimilationError, ConfigError, DimensionError, NumericalError
from ..models import (
    CycleRow,
    ExperimentConfig,
    FailureInfo,
    FilterSettings,
    RunRecord,
    dump_config,
)
from .constraints import Constraints
from .ensemble import laplacian_precision, shrunk_precision
from .flow import (
    DiagonalDiffusion,
    DiffusionOperator,
    FactorDiffusion,
    FlowConfig,
    InverseOperatorDiffusion,
    ZeroDiffusion,
    run_flow,
)
from .kalman import FilterConfig, LocalizationConfig, kalman_analysis
from .metrics import MetricAccumulator, constraint_values, resolve_scaling
from .observations import ObservationModel

logger = logging.getLogger(__name__)

PROGRESS_EVERY = 100
UNCONSTRAINED_VARIANTS = ("ETKF", "LETKF", "VFP")


@dataclass(frozen=True)
class TruthRun:
    """Truth trajectory, observations and the initial ensemble of one experiment.

    ``truth[k]`` and ``observations[k]`` belong to cycle ``k`` at time
    ``times[k] = (k + 1) * obs_interval``.
    """

    times: np.ndarray
    truth: np.ndarray
    observations: np.ndarray
    initial_truth: np.ndarray
    initial_ensemble: np.ndarray

    @property
    def cycles(self) -> int:
        return self.truth.shape[0]


def generate_truth_and_obs(cfg: ExperimentConfig, model: Optional[ForwardModel] = None) -> TruthRun:
    """Step the truth between observation times and draw ``y_k = H(x_true,k) + eta``.

    The initial truth and ensemble use the ``truth`` and ``ensemble`` seeds;
    the observation noise uses the ``observations`` seed.
    """
    model = model or build_model(cfg.model)
    init_rng = np.random.default_rng([cfg.seeds.truth, cfg.seeds.ensemble])
    x0, ens0 = model.initial_conditions(cfg.n_members, init_rng)

    obs_rng = np.random.default_rng(cfg.seeds.observations)
    obs_model = model.observation_model()
    truth = np.empty((cfg.cycles, model.n_s))
    observations = np.empty((cfg.cycles, obs_model.n_o))
    x = x0
    for k in range(cfg.cycles):
        x = model.advance(x, cfg.obs_interval)
        truth[k] = x
        observations[k] = obs_model.apply(x) + obs_model.sample_noise(obs_rng)

    logger.info(f"Generated {cfg.cycles} truth states and observations for {model!r}")
    return TruthRun(
        times=cfg.obs_interval * np.arange(1, cfg.cycles + 1),
        truth=truth,
        observations=observations,
        initial_truth=x0,
        initial_ensemble=ens0,
    )


def forecast_ensemble(model: ForwardModel, ens: np.ndarray, duration: float, n_jobs: int = 1) -> np.ndarray:
    """Advance every member; ``n_jobs != 1`` spreads members over joblib workers."""
    if n_jobs == 1:
        columns = [model.advance(ens[:, e], duration) for e in range(ens.shape[1])]
    else:
        columns = Parallel(n_jobs=n_jobs)(
            delayed(model.advance)(ens[:, e], duration) for e in range(ens.shape[1])
        )
    return np.column_stack(columns)


@dataclass(frozen=True)
class AnalysisOutcome:
    ensemble: np.ndarray
    flow_steps: int = 0
    flow_converged: Optional[bool] = None


class Assimilator:
    """Dispatches one analysis to the configured Kalman or flow variant."""

    def __init__(self, model: ForwardModel, filter_settings: FilterSettings, flow_seed: int):
        self.model = model
        self.settings = filter_settings
        if filter_settings.is_flow:
            flow = filter_settings.flow
            self.flow_config = FlowConfig(
                pseudo_step=flow.pseudo_step,
                stop_tol=flow.stop_tol,
                max_steps=flow.max_steps,
                integrator=flow.integrator,
                dae_scheme=flow.dae_scheme,
                stabilization=flow.stabilization,
                perturbed_obs=flow.perturbed_obs,
                seed=flow_seed,
                projection_tol=filter_settings.projection_tol,
                projection_max_iter=filter_settings.projection_max_iter,
                check_manifold=flow.check_manifold,
            )
            self.diffusion = self._build_diffusion()
            self.precision_factory = self._build_precision_factory()
        else:
            self.kalman_config = self._kalman_config(filter_settings.variant, filter_settings.inflation)

    def _kalman_config(self, variant: str, inflation: float) -> FilterConfig:
        s = self.settings
        localization = None
        if variant.startswith("L"):
            localization = LocalizationConfig(s.localization_radius, self.model.state_coords, self.model.periods)
        R_g = None
        if variant.endswith("A"):
            R_g = s.pseudo_obs_variance * np.eye(self.model.n_c)
        return FilterConfig(
            variant=variant,
            inflation=inflation,
            localization=localization,
            R_g=R_g,
            projection_tol=s.projection_tol,
            projection_max_iter=s.projection_max_iter,
        )

    def _laplacian_like(self, path: str):
        lap = self.model.laplacian_like()
        if lap is None:
            raise ConfigError(f"{self.model.name} has no Laplacian-like operator", path)
        return lap

    def _build_diffusion(self):
        d = self.settings.diffusion
        n_s = self.model.n_s
        if d.kind == "none":
            return ZeroDiffusion(n_s)
        if d.kind == "diagonal":
            if len(d.values) != n_s:
                raise ConfigError(f"has {len(d.values)} entries, state has {n_s}", "filter.diffusion.values")
            return DiagonalDiffusion(d.scale * np.asarray(d.values, dtype=float))
        if d.kind == "inverse_laplacian":
            return InverseOperatorDiffusion(self._laplacian_like("filter.diffusion.kind"), d.scale)
        gamma_sh = self.settings.precision.shrinkage

        def forecast_sqrt(forecast: np.ndarray) -> DiffusionOperator:
            return FactorDiffusion.forecast_sqrt(forecast, gamma_sh, d.scale)

        return forecast_sqrt

    def _build_precision_factory(self) -> Callable:
        p = self.settings.precision
        if p.kind == "shrinkage":
            return lambda ens: shrunk_precision(ens, p.shrinkage)
        lap = self._laplacian_like("filter.precision.kind")
        return lambda ens: laplacian_precision(lap, ens)

    def analyse(self, forecast: np.ndarray, obs: ObservationModel, cycle: int) -> AnalysisOutcome:
        variant = self.settings.variant
        constraints: Optional[Constraints] = None
        if variant not in UNCONSTRAINED_VARIANTS:
            constraints = self.model.constraints(forecast)

        if not self.settings.is_flow:
            return AnalysisOutcome(kalman_analysis(forecast, obs, self.kalman_config, constraints))

        initial = None
        if self.settings.flow.warm_start == "etkfp":
            warm = self._kalman_config("ETKFP", self.settings.flow.warm_start_inflation)
            initial = kalman_analysis(forecast, obs, warm, self.model.constraints(forecast))
        result = run_flow(
            forecast,
            obs,
            constraints,
            self.flow_config,
            self.diffusion,
            self.precision_factory,
            variant=variant,
            cycle=cycle,
            initial=initial,
        )
        logger.debug(f"Cycle {cycle}: {variant} flow took {result.steps} steps")
        return AnalysisOutcome(result.ensemble, result.steps, result.converged)


def run_id_for(cfg: ExperimentConfig) -> str:
    """``<name>-<12 hex digits of the canonical config hash>``."""
    digest = hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:12]
    return f"{cfg.name}-{digest}"


def _check_truth(truth: TruthRun, cfg: ExperimentConfig, model: ForwardModel) -> None:
    if truth.cycles < cfg.cycles:
        raise ConfigError(f"cached truth has {truth.cycles} cycles, config asks for {cfg.cycles}", "truth")
    if truth.truth.shape[1] != model.n_s:
        raise DimensionError(f"cached truth has state size {truth.truth.shape[1]}, model has {model.n_s}")
    if truth.initial_ensemble.shape != (model.n_s, cfg.n_members):
        raise DimensionError(
            f"cached ensemble has shape {truth.initial_ensemble.shape}, expected {(model.n_s, cfg.n_members)}"
        )


def run_twin_experiment(
    cfg: ExperimentConfig,
    truth: Optional[TruthRun] = None,
    n_jobs: Optional[int] = None,
    model: Optional[ForwardModel] = None,
) -> RunRecord:
    """Alternate ensemble forecasts and analyses; metrics accumulate from cycle ``spinup`` on.

    An :class:`AssimilationError` in a forecast or analysis ends the run; the
    record keeps the completed cycles and notes the failure.
    """
    model = model or build_model(cfg.model)
    n_jobs = settings.n_jobs if n_jobs is None else n_jobs
    truth = truth or generate_truth_and_obs(cfg, model)
    _check_truth(truth, cfg, model)

    scalings = {name: resolve_scaling(spec, model, name) for name, spec in cfg.metrics.crmse.items()}
    metrics = MetricAccumulator(model.n_s, model.n_c, cfg.n_members, cfg.spinup, scalings)
    assimilator = Assimilator(model, cfg.filter, cfg.seeds.flow)

    record = RunRecord(run_id=run_id_for(cfg), version=__version__, config=cfg)
    logger.info(
        f"Starting {record.run_id}: {cfg.filter.variant} on {model!r}, "
        f"{cfg.n_members} members, {cfg.cycles} cycles"
    )

    ens = truth.initial_ensemble.copy()
    for k in range(cfg.cycles):
        started = time.perf_counter()
        try:
            forecast = forecast_ensemble(model, ens, cfg.obs_interval, n_jobs)
            obs = model.observation_model(truth.observations[k])
            outcome = assimilator.analyse(forecast, obs, k)
            if not np.all(np.isfinite(outcome.ensemble)):
                raise NumericalError(f"{cfg.filter.variant} analysis is not finite")
            g = constraint_values(model.constraints(forecast), outcome.ensemble)
        except AssimilationError as e:
            logger.error(f"Cycle {k} of {record.run_id} failed: {e}", exc_info=True)
            record.failure = FailureInfo(
                cycle=k, error=type(e).__name__, message=str(e), details=e.to_record()
            )
            break

        ens = outcome.ensemble
        metrics.add(ens, truth.truth[k], g)
        current = metrics.current()
        row = CycleRow(
            cycle=k,
            time=float(truth.times[k]),
            rmse=current.pop("rmse"),
            crmse=current,
            max_abs_g=float(np.max(np.abs(g))) if g.size else 0.0,
            flow_steps=outcome.flow_steps,
            flow_converged=outcome.flow_converged,
            wall_ms=1000.0 * (time.perf_counter() - started) if cfg.output.record_wall_time else 0.0,
        )
        record.rows.append(row)
        logger.debug(f"Cycle {k}: rmse={row.rmse} crmse={row.crmse} max|g|={row.max_abs_g:.3e}")
        if (k + 1) % PROGRESS_EVERY == 0:
            logger.info(f"{record.run_id}: cycle {k + 1}/{cfg.cycles}, rmse={row.rmse}")

    if record.truncated:
        logger.info(f"{record.run_id} stopped at cycle {record.failure.cycle}")
    else:
        logger.info(f"Finished {record.run_id}: rmse={record.final_rmse} crmse={record.final_crmse}")
    return record
