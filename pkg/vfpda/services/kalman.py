"""ETKF and LETKF analyses with projected (P) and augmented (A) constraint handling."""
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from ..exceptions import ConfigError, DimensionError, NumericalError
from .constraints import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    Constraints,
    augment_observations,
    is_shared,
    project_ensemble,
)
from .ensemble import as_ensemble
from .observations import ObservationModel

logger = logging.getLogger(__name__)

KALMAN_VARIANTS = ("ETKF", "ETKFP", "ETKFA", "LETKF", "LETKFP", "LETKFA")


def gaspari_cohn(distance: np.ndarray, radius: float) -> np.ndarray:
    """Fifth-order piecewise rational taper with support ``2 * radius``."""
    r = np.abs(np.asarray(distance, dtype=float)) / radius
    taper = np.zeros_like(r)

    inner = r <= 1.0
    outer = (r > 1.0) & (r < 2.0)

    ri = r[inner]
    taper[inner] = (((-0.25 * ri + 0.5) * ri + 0.625) * ri - 5.0 / 3.0) * ri**2 + 1.0
    ro = r[outer]
    taper[outer] = (
        ((((1.0 / 12.0) * ro - 0.5) * ro + 0.625) * ro + 5.0 / 3.0) * ro - 5.0
    ) * ro + 4.0 - 2.0 / (3.0 * ro)

    return np.clip(taper, 0.0, 1.0)


@dataclass(frozen=True)
class LocalizationConfig:
    """Gaspari-Cohn R-localization by Euclidean distance between locations.

    ``periods`` gives the domain length of periodic coordinates (NaN where a
    coordinate is not periodic).
    """

    radius: float
    state_coords: np.ndarray
    periods: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.radius > 0 and np.isfinite(self.radius) or self.radius == np.inf):
            raise ValueError(f"Localization radius must be positive, got {self.radius}")
        coords = np.asarray(self.state_coords, dtype=float)
        object.__setattr__(self, "state_coords", coords[:, None] if coords.ndim == 1 else coords)

    def distances(self, points: np.ndarray, obs_coords: np.ndarray) -> np.ndarray:
        """Distance matrix between state locations ``points`` and observation locations."""
        diff = np.abs(points[:, None, :] - obs_coords[None, :, :])
        if self.periods is not None:
            periods = np.asarray(self.periods, dtype=float)
            wrap = np.isfinite(periods)
            diff[..., wrap] = np.minimum(diff[..., wrap], periods[wrap] - diff[..., wrap])
        return np.sqrt(np.sum(diff**2, axis=-1))

    def distance(self, i: int, obs_coords: np.ndarray, j: int) -> float:
        return float(self.distances(self.state_coords[i : i + 1], obs_coords[j : j + 1])[0, 0])

    def weights(self, points: np.ndarray, obs_coords: np.ndarray) -> np.ndarray:
        """Taper for every (location, observation) pair; unlocated observations get 1."""
        located = np.all(np.isfinite(obs_coords), axis=1)
        w = np.ones((points.shape[0], obs_coords.shape[0]))
        if np.isinf(self.radius):
            return w
        w[:, located] = gaspari_cohn(self.distances(points, obs_coords[located]), self.radius)
        return w


@dataclass(frozen=True)
class FilterConfig:
    """Parameters of one Kalman-type analysis."""

    variant: str = "ETKF"
    inflation: float = 1.0
    localization: Optional[LocalizationConfig] = None
    R_g: Optional[np.ndarray] = None
    projection_tol: float = DEFAULT_TOL
    projection_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.variant not in KALMAN_VARIANTS:
            raise ConfigError(f"unknown Kalman variant {self.variant!r}", "filter.variant")
        if self.inflation < 1.0:
            raise ConfigError(f"inflation must be >= 1, got {self.inflation}", "filter.inflation")
        if self.is_localized and self.localization is None:
            raise ConfigError(f"{self.variant} requires a localization radius", "filter.localization")
        if self.is_augmented and self.R_g is None:
            raise ConfigError(
                f"{self.variant} requires a pseudo-observation covariance", "filter.pseudo_obs_variance"
            )

    @property
    def is_localized(self) -> bool:
        return self.variant.startswith("L")

    @property
    def is_projected(self) -> bool:
        return self.variant.endswith("P")

    @property
    def is_augmented(self) -> bool:
        return self.variant.endswith("A")


def inflate(ens: np.ndarray, alpha: float) -> np.ndarray:
    """Multiplicative inflation of the anomalies; the mean is unchanged."""
    if alpha < 1.0:
        raise ValueError(f"Inflation factor must be >= 1, got {alpha}")
    ens = as_ensemble(ens, min_members=2)
    mean = ens.mean(axis=1, keepdims=True)
    return mean + alpha * (ens - mean)


def _transform(S: np.ndarray, d: np.ndarray) -> tuple:
    """Weight-space mean increment and symmetric square-root transform.

    ``S`` are whitened, ``1/sqrt(n_e - 1)``-scaled observation anomalies and
    ``d`` the whitened innovation.
    """
    n_e = S.shape[1]
    C = np.eye(n_e) + S.T @ S
    C = 0.5 * (C + C.T)
    eigvals, V = sla.eigh(C)
    if eigvals[0] <= 0.0 or not np.all(np.isfinite(eigvals)):
        raise NumericalError(
            "ETKF inner matrix is not positive definite",
            {"min_eigenvalue": float(eigvals[0]), "max_eigenvalue": float(eigvals[-1])},
        )
    w_mean = V @ ((V.T @ (S.T @ d)) / eigvals) / np.sqrt(n_e - 1)
    T = (V / np.sqrt(eigvals)) @ V.T
    return w_mean, T


def _observation_space(ens: np.ndarray, obs: ObservationModel):
    n_e = ens.shape[1]
    HX = obs.apply(ens)
    if HX.shape != (obs.n_o, n_e):
        raise DimensionError(f"H(X) has shape {HX.shape}, expected {(obs.n_o, n_e)}")
    y_mean = HX.mean(axis=1)
    S = obs.whiten(HX - y_mean[:, None]) / np.sqrt(n_e - 1)
    d = obs.whiten(obs.y - y_mean)
    return S, d


def etkf_analysis(ens: np.ndarray, obs: ObservationModel, alpha: float = 1.0) -> np.ndarray:
    """Deterministic square-root ETKF with a symmetric transform."""
    X = inflate(ens, alpha)
    mean = X.mean(axis=1, keepdims=True)
    A = X - mean
    S, d = _observation_space(X, obs)
    w_mean, T = _transform(S, d)
    return mean + A @ (w_mean[:, None] + T)


def letkf_analysis(
    ens: np.ndarray, obs: ObservationModel, alpha: float, loc: LocalizationConfig
) -> np.ndarray:
    """ETKF solved per state location with Gaspari-Cohn tapered ``R^{-1}``."""
    X = inflate(ens, alpha)
    mean = X.mean(axis=1, keepdims=True)
    A = X - mean
    S, d = _observation_space(X, obs)
    if obs.coords is None:
        raise DimensionError("LETKF needs observation locations")
    if loc.state_coords.shape[0] != X.shape[0]:
        raise DimensionError(
            f"{loc.state_coords.shape[0]} state locations for a state of size {X.shape[0]}"
        )

    points, inverse = np.unique(loc.state_coords, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    weights = loc.weights(points, obs.coords)
    analysis = X.copy()
    for p in range(points.shape[0]):
        w = weights[p]
        local = w > 0.0
        if not np.any(local):
            continue
        sqrt_w = np.sqrt(w[local])
        w_mean, T = _transform(S[local] * sqrt_w[:, None], d[local] * sqrt_w)
        rows = np.flatnonzero(inverse == p)
        analysis[rows] = mean[rows] + A[rows] @ (w_mean[:, None] + T)
    return analysis


def base_analysis(cfg: FilterConfig) -> Callable[[np.ndarray, ObservationModel], np.ndarray]:
    """Unconstrained ETKF or LETKF analysis for the configured variant."""
    if cfg.is_localized:
        return lambda ens, obs: letkf_analysis(ens, obs, cfg.inflation, cfg.localization)
    return lambda ens, obs: etkf_analysis(ens, obs, cfg.inflation)


def constrained_variant(
    analysis: Callable[[np.ndarray, ObservationModel], np.ndarray],
    cfg: FilterConfig,
    ens: np.ndarray,
    obs: ObservationModel,
    constraints: Optional[Constraints] = None,
) -> np.ndarray:
    """Run ``analysis`` with the projection or pseudo-observation treatment of ``cfg``."""
    if not (cfg.is_projected or cfg.is_augmented):
        return analysis(ens, obs)
    if constraints is None:
        raise ConfigError(f"{cfg.variant} requires a constraint system", "filter.variant")

    if cfg.is_augmented:
        if not is_shared(constraints):
            raise ConfigError(
                f"{cfg.variant} needs one constraint shared by all members; "
                "per-member constraints cannot be used as pseudo-observations",
                "filter.variant",
            )
        return analysis(ens, augment_observations(obs, constraints, cfg.R_g))

    unconstrained = analysis(ens, obs)
    return project_ensemble(
        unconstrained,
        constraints,
        anchors=unconstrained,
        tol=cfg.projection_tol,
        max_iter=cfg.projection_max_iter,
    )


def kalman_analysis(
    ens: np.ndarray,
    obs: ObservationModel,
    cfg: FilterConfig,
    constraints: Optional[Constraints] = None,
) -> np.ndarray:
    """Analysis for any of the six Kalman variants."""
    return constrained_variant(base_analysis(cfg), cfg, ens, obs, constraints)
