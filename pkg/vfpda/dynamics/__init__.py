"""Forward models and the registry that builds them from settings."""
from typing import Union

from ..exceptions import ConfigError
from ..models import KdvSettings, NavierStokesSettings, PendulumSettings
from .base import CheckResult, ForwardModel
from .kdv import KdvModel
from .navier_stokes import NavierStokesModel
from .pendulum import PendulumModel

MODEL_IDS = ("pendulum", "kdv", "navier_stokes")

AnyModelSettings = Union[PendulumSettings, KdvSettings, NavierStokesSettings]


def build_model(settings: AnyModelSettings) -> ForwardModel:
    """Instantiate the forward model described by ``settings``."""
    if isinstance(settings, PendulumSettings):
        return PendulumModel(
            time_step=settings.time_step,
            gravity=settings.gravity,
            sample_interval=settings.sample_interval,
            obs_variance=settings.obs_variance,
        )
    if isinstance(settings, KdvSettings):
        return KdvModel(
            time_step=settings.time_step,
            n_grid=settings.n_grid,
            domain=settings.domain,
            nonlinear_form=settings.nonlinear_form,
            obs_stride=settings.obs_stride,
            obs_variance=settings.obs_variance,
            ensemble_spread=settings.ensemble_spread,
            laplacian_shift=settings.laplacian_shift,
        )
    if isinstance(settings, NavierStokesSettings):
        nx, ny = settings.grid
        try:
            return NavierStokesModel(
                time_step=settings.time_step,
                nx=nx,
                ny=ny,
                reynolds=settings.reynolds,
                rossby=settings.rossby,
                obs_per_axis=settings.obs_per_axis,
                obs_variance=settings.obs_variance,
                initial_vorticity=settings.initial_vorticity,
                spinup_time=settings.spinup_time,
                ensemble_spread=settings.ensemble_spread,
            )
        except ValueError as e:
            raise ConfigError(str(e), "model.grid_scale") from e
    raise ConfigError(f"unknown model {settings!r}", "model.kind")


def default_model(model_id: str, grid_scale: int = 1) -> ForwardModel:
    """Model with its default parameters, by id; ``grid_scale`` coarsens Navier-Stokes."""
    defaults = {
        "pendulum": PendulumSettings,
        "kdv": KdvSettings,
        "navier_stokes": NavierStokesSettings,
    }
    if model_id not in defaults:
        raise ConfigError(f"unknown model {model_id!r}; expected one of {', '.join(MODEL_IDS)}", "model")
    if model_id == "navier_stokes":
        return build_model(NavierStokesSettings(grid_scale=grid_scale))
    return build_model(defaults[model_id]())


__all__ = [
    "CheckResult",
    "ForwardModel",
    "KdvModel",
    "MODEL_IDS",
    "NavierStokesModel",
    "PendulumModel",
    "build_model",
    "default_model",
]
