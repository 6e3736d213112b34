"""Variational Fokker-Planck particle flow and its constrained variants.

Members move in pseudo-time under

    dx = F(x) dtau + sigma dW,
    F  = (grad log P_a - grad log P_tau) + (sigma sigma^T / 2) grad log P_tau,

with Gaussian densities estimated from the ensemble. VFPSTAB adds the
stabilizing drift ``-gamma G^+(x) g(x)``; VFPDAE treats ``g(x) = 0`` as the
algebraic part of an index-2 SDAE and projects after every step.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from ..exceptions import ConfigError, DimensionError, FlowError, NumericalError, ProjectionError
from .constraints import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    ConstraintSystem,
    Constraints,
    max_violation,
    member_constraint,
    project_ensemble,
    project_to_manifold,
    pseudo_inverse_apply,
    tangent_projection,
)
from .ensemble import PrecisionOperator, as_ensemble, empirical_covariance, shrink_covariance
from .observations import ObservationModel

logger = logging.getLogger(__name__)

EULER_MARUYAMA = "euler-maruyama"
ROSENBROCK_EM = "rosenbrock-em"
INTEGRATORS = (EULER_MARUYAMA, ROSENBROCK_EM)

ANCHOR_AT_X0 = "anchor-at-x0"
EVOLVE_PROJECT = "evolve-project"
ROSENBROCK_PROJECT = "rosenbrock-project"
ELIMINATED = "eliminated"
DAE_SCHEMES = (ANCHOR_AT_X0, EVOLVE_PROJECT, ROSENBROCK_PROJECT, ELIMINATED)

FLOW_VARIANTS = ("VFP", "VFPSTAB", "VFPDAE")

# Above this state size the Rosenbrock system is solved matrix-free.
DENSE_ROSENBROCK_LIMIT = 1000

PrecisionFactory = Callable[[np.ndarray], PrecisionOperator]


@dataclass(frozen=True)
class FlowConfig:
    """Pseudo-time integration settings."""

    pseudo_step: float = 1e-3
    stop_tol: float = 1e-6
    max_steps: int = 1000
    integrator: str = EULER_MARUYAMA
    dae_scheme: str = EVOLVE_PROJECT
    stabilization: float = 0.0
    perturbed_obs: Optional[float] = None
    seed: int = 0
    projection_tol: float = DEFAULT_TOL
    projection_max_iter: int = DEFAULT_MAX_ITER
    check_manifold: bool = False

    def __post_init__(self):
        if not self.pseudo_step > 0:
            raise ConfigError(f"must be positive, got {self.pseudo_step}", "filter.flow.pseudo_step")
        if not self.stop_tol > 0:
            raise ConfigError(f"must be positive, got {self.stop_tol}", "filter.flow.stop_tol")
        if self.max_steps < 1:
            raise ConfigError(f"must be at least 1, got {self.max_steps}", "filter.flow.max_steps")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}", "filter.flow.integrator")
        if self.dae_scheme not in DAE_SCHEMES:
            raise ConfigError(f"unknown scheme {self.dae_scheme!r}", "filter.flow.dae_scheme")
        if self.stabilization < 0:
            raise ConfigError(f"must be >= 0, got {self.stabilization}", "filter.flow.stabilization")


class DiffusionOperator(ABC):
    """State-independent diffusion ``sigma``; its divergence term vanishes."""

    @property
    @abstractmethod
    def size(self) -> int:
        ...

    @abstractmethod
    def apply(self, xi: np.ndarray) -> np.ndarray:
        """``sigma xi`` for a vector or every column of a matrix."""

    @abstractmethod
    def quadratic(self, v: np.ndarray) -> np.ndarray:
        """``(sigma sigma^T / 2) v``."""

    @property
    def is_zero(self) -> bool:
        return False


class ZeroDiffusion(DiffusionOperator):
    """Deterministic flow."""

    def __init__(self, n_s: int):
        self._n = int(n_s)

    @property
    def size(self) -> int:
        return self._n

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return np.zeros_like(xi, dtype=float)

    def quadratic(self, v: np.ndarray) -> np.ndarray:
        return np.zeros_like(v, dtype=float)

    @property
    def is_zero(self) -> bool:
        return True


class DiagonalDiffusion(DiffusionOperator):
    """``sigma = diag(values)``."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=float).ravel()

    @property
    def size(self) -> int:
        return self.values.size

    def _scale(self, v: np.ndarray, factor: np.ndarray) -> np.ndarray:
        return factor[:, None] * v if v.ndim == 2 else factor * v

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return self._scale(np.asarray(xi, dtype=float), self.values)

    def quadratic(self, v: np.ndarray) -> np.ndarray:
        return self._scale(np.asarray(v, dtype=float), 0.5 * self.values**2)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


class InverseOperatorDiffusion(DiffusionOperator):
    """``sigma = scale * M^{-1}`` for a sparse symmetric nonsingular ``M``."""

    def __init__(self, M, scale: float = 1.0):
        self.M = sps.csc_matrix(M, dtype=float)
        self.scale = float(scale)
        self._lu = spla.splu(self.M)

    @property
    def size(self) -> int:
        return self.M.shape[0]

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return self.scale * self._lu.solve(np.asarray(xi, dtype=float))

    def quadratic(self, v: np.ndarray) -> np.ndarray:
        inner = self._lu.solve(np.asarray(v, dtype=float))
        return 0.5 * self.scale**2 * self._lu.solve(inner)


class FactorDiffusion(DiffusionOperator):
    """``sigma = scale * L`` with a dense factor ``L`` (e.g. Cholesky of ``P_f``)."""

    def __init__(self, factor: np.ndarray, scale: float = 1.0):
        self.factor = np.asarray(factor, dtype=float)
        self.scale = float(scale)

    @classmethod
    def forecast_sqrt(cls, forecast: np.ndarray, gamma_sh: float, scale: float) -> "FactorDiffusion":
        """``scale * sqrt(P_f)`` from the shrinkage-regularized forecast covariance."""
        cov = shrink_covariance(empirical_covariance(forecast), gamma_sh)
        return cls(sla.cholesky(cov, lower=True), scale)

    @property
    def size(self) -> int:
        return self.factor.shape[0]

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return self.scale * (self.factor @ xi)

    def quadratic(self, v: np.ndarray) -> np.ndarray:
        return 0.5 * self.scale**2 * (self.factor @ (self.factor.T @ v))


@dataclass(frozen=True)
class GaussianFlowContext:
    """Gaussian prior, intermediate and likelihood terms for one pseudo-time step."""

    mean_f: np.ndarray
    prec_f: PrecisionOperator
    mean_tau: np.ndarray
    prec_tau: PrecisionOperator
    obs: ObservationModel
    y_members: Optional[np.ndarray] = field(default=None, repr=False)

    def data(self, member: Optional[int], n_cols: int) -> np.ndarray:
        """Observation data per column (perturbed per member when available)."""
        if self.y_members is None:
            return self.obs.y if n_cols == 0 else np.repeat(self.obs.y[:, None], n_cols, axis=1)
        if member is not None:
            return self.y_members[:, member]
        return self.y_members


def _columns(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def gaussian_log_gradients(
    x: np.ndarray, ctx: GaussianFlowContext, member: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """``(grad log P_tau, grad log P_a)`` at a state or at every column of an ensemble."""
    X, squeeze = _columns(x)
    n_cols = X.shape[1]
    grad_tau = -ctx.prec_tau.apply(X - ctx.mean_tau[:, None])

    if squeeze:
        Y = ctx.data(member, 0)[:, None]
    else:
        Y = ctx.data(None, n_cols)
    innovation = ctx.obs.apply(X) - Y
    if ctx.obs.is_linear:
        likelihood = ctx.obs.matrix.T @ ctx.obs.precision_apply(innovation)
    else:
        likelihood = np.column_stack(
            [
                ctx.obs.jacobian(X[:, e]).T @ ctx.obs.precision_apply(innovation[:, e])
                for e in range(n_cols)
            ]
        )
    grad_a = -ctx.prec_f.apply(X - ctx.mean_f[:, None]) - np.asarray(likelihood)

    if squeeze:
        return grad_tau[:, 0], grad_a[:, 0]
    return grad_tau, grad_a


def optimal_drift(
    x: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    member: Optional[int] = None,
) -> np.ndarray:
    """KL-minimizing drift with ``A = I`` and state-independent diffusion."""
    grad_tau, grad_a = gaussian_log_gradients(x, ctx, member)
    return (grad_a - grad_tau) + diff.quadratic(grad_tau)


def _stabilization(X: np.ndarray, constraints: Constraints, gamma: float) -> np.ndarray:
    out = np.zeros_like(X)
    if gamma == 0.0:
        return out
    for e in range(X.shape[1]):
        cs = member_constraint(constraints, e)
        out[:, e] = gamma * pseudo_inverse_apply(cs, X[:, e], cs.evaluate(X[:, e]))
    return out


def vfpstab_drift(
    x: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    cs: Constraints,
    gamma: float,
    member: Optional[int] = None,
) -> np.ndarray:
    """``F(x) - gamma G^T (G G^T)^{-1} g(x)``."""
    X, squeeze = _columns(x)
    drift = optimal_drift(X[:, 0] if squeeze else X, ctx, diff, member)
    if squeeze:
        cs_e = cs if isinstance(cs, ConstraintSystem) else member_constraint(cs, member or 0)
        return drift - _stabilization(X, cs_e, gamma)[:, 0]
    return drift - _stabilization(X, cs, gamma)


def _check_finite(X: np.ndarray, what: str) -> np.ndarray:
    bad = ~np.all(np.isfinite(X), axis=0)
    if np.any(bad):
        member = int(np.flatnonzero(bad)[0])
        raise FlowError(f"Non-finite {what} for member {member}", member=member)
    return X


def vfp_step_em(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    h: float,
    xi: np.ndarray,
) -> np.ndarray:
    """Euler-Maruyama step ``x + h F + sqrt(h) sigma xi`` for every member.

    ``xi`` holds one standard-normal column per member.
    """
    drift = _check_finite(optimal_drift(ens, ctx, diff), "drift")
    return ens + h * drift + np.sqrt(h) * diff.apply(xi)


def drift_jacobian_apply(
    v: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    x: Optional[np.ndarray] = None,
    include_tau: bool = True,
) -> np.ndarray:
    """``F_x v`` with the means and precisions frozen over the step.

    ``include_tau=False`` keeps only ``-P_f^{-1} - H^T R^{-1} H``, the Jacobian
    of the ensemble-mean drift: a common shift of every member moves
    ``mean_tau`` along and leaves ``grad log P_tau`` unchanged.
    """
    if ctx.obs.is_linear:
        H = ctx.obs.matrix
    else:
        H = np.asarray(ctx.obs.jacobian(ctx.mean_tau if x is None else x))
    v = np.asarray(v, dtype=float)
    likelihood = H.T @ ctx.obs.precision_apply(H @ v)
    posterior = -ctx.prec_f.apply(v) - np.asarray(likelihood)
    if not include_tau:
        return posterior
    tau_v = ctx.prec_tau.apply(v)
    return posterior + tau_v - diff.quadratic(tau_v)


def drift_jacobian(
    ctx: GaussianFlowContext, diff: DiffusionOperator, x: Optional[np.ndarray] = None
) -> np.ndarray:
    """Dense analytic drift Jacobian (small problems)."""
    n = ctx.mean_f.size
    return drift_jacobian_apply(np.eye(n), ctx, diff, x)


def drift_jacobian_fd(
    x: np.ndarray, ctx: GaussianFlowContext, diff: DiffusionOperator, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference drift Jacobian for validating the analytic one."""
    x = np.asarray(x, dtype=float)
    jac = np.empty((x.size, x.size))
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = eps
        jac[:, j] = (optimal_drift(x + step, ctx, diff) - optimal_drift(x - step, ctx, diff)) / (
            2.0 * eps
        )
    return jac


class RosenbrockSystem:
    """``(I - h W)`` factorized once per pseudo-time step and shared by members.

    ``W`` is the full drift Jacobian, or only its prior and likelihood part
    when ``include_tau`` is false (see :func:`drift_jacobian_apply`).
    """

    def __init__(
        self,
        ctx: GaussianFlowContext,
        diff: DiffusionOperator,
        h: float,
        x: Optional[np.ndarray] = None,
        include_tau: bool = True,
    ):
        self.ctx = ctx
        self.diff = diff
        self.h = float(h)
        self.x = x
        self.include_tau = include_tau
        self.n = ctx.mean_f.size

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return v - self.h * drift_jacobian_apply(v, self.ctx, self.diff, self.x, self.include_tau)

    @cached_property
    def _lu(self):
        matrix = self._matvec(np.eye(self.n))
        lu, piv = sla.lu_factor(matrix, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if not np.all(np.isfinite(pivots)) or pivots.min() <= 1e-14 * max(1.0, pivots.max()):
            raise NumericalError(
                f"I - h W is singular for h={self.h:g}; use a smaller pseudo-time step",
                {"pseudo_step": self.h, "min_pivot": float(pivots.min())},
            )
        return lu, piv

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.n <= DENSE_ROSENBROCK_LIMIT:
            return sla.lu_solve(self._lu, rhs, check_finite=False)
        op = spla.LinearOperator((self.n, self.n), matvec=self._matvec, dtype=float)
        cols, squeeze = _columns(rhs)
        out = np.empty_like(cols)
        for e in range(cols.shape[1]):
            sol, info = spla.gmres(op, cols[:, e], rtol=1e-12, atol=0.0, maxiter=500)
            if info != 0:
                raise NumericalError(
                    f"GMRES did not converge for I - h W (h={self.h:g}); use a smaller pseudo-time step",
                    {"pseudo_step": self.h, "info": float(info)},
                )
            out[:, e] = sol
        return out[:, 0] if squeeze else out


def rosenbrock_increment(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    h: float,
    drift: np.ndarray,
) -> np.ndarray:
    """Linearly implicit increments ``h (I - h W)^{-1} F`` of every member.

    ``W = -P_f^{-1} - H^T R^{-1} H`` is the exact Jacobian of the mean drift,
    so the mean takes an implicit Euler step however stiff the prior is. The
    ``P_tau^{-1}`` terms stay explicit: on the anomalies they are balanced by
    ``-P_f^{-1}``, and when the precisions commute each anomaly mode is scaled by
    ``(1 + h P_tau^{-1}) / (1 + h (P_f^{-1} + H^T R^{-1} H))``, which is
    positive and has the Gaussian posterior as fixed point.
    """
    at = None if ctx.obs.is_linear else ens.mean(axis=1)
    return h * RosenbrockSystem(ctx, diff, h, at, include_tau=False).solve(drift)


def rosenbrock_em_predictor(
    x: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    h: float,
    xi: np.ndarray,
    drift: Optional[np.ndarray] = None,
    system: Optional[RosenbrockSystem] = None,
) -> np.ndarray:
    """``x + h (I - h F_x)^{-1} F(x) + sqrt(h) sigma xi``.

    A single state is stepped with the full Jacobian (or ``system``); an
    ensemble goes through :func:`rosenbrock_increment`.
    """
    x = np.asarray(x, dtype=float)
    if drift is None:
        drift = optimal_drift(x, ctx, diff)
    if x.ndim == 2:
        return x + rosenbrock_increment(x, ctx, diff, h, drift) + np.sqrt(h) * diff.apply(xi)
    if system is None:
        system = RosenbrockSystem(ctx, diff, h, None if ctx.obs.is_linear else x)
    return x + h * system.solve(drift) + np.sqrt(h) * diff.apply(xi)


def _advance(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    h: float,
    xi: np.ndarray,
    rosenbrock: bool,
    drift: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted ensemble and the deterministic part of its increment."""
    if drift is None:
        drift = optimal_drift(ens, ctx, diff)
    drift = _check_finite(drift, "drift")
    if rosenbrock:
        increment = rosenbrock_increment(ens, ctx, diff, h, drift)
    else:
        increment = h * drift
    return ens + increment + np.sqrt(h) * diff.apply(xi), increment


def _stab_advance(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    constraints: Constraints,
    cfg: FlowConfig,
    xi: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    drift = vfpstab_drift(ens, ctx, diff, constraints, cfg.stabilization)
    return _advance(
        ens, ctx, diff, cfg.pseudo_step, xi, cfg.integrator == ROSENBROCK_EM, drift=drift
    )


def vfpstab_step(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    constraints: Constraints,
    cfg: FlowConfig,
    xi: np.ndarray,
) -> np.ndarray:
    """One stabilized step; the stabilizing term is not part of the Rosenbrock Jacobian."""
    return _stab_advance(ens, ctx, diff, constraints, cfg, xi)[0]


def eliminated_increment(cs: ConstraintSystem, x0: np.ndarray, increment: np.ndarray) -> np.ndarray:
    """Increment restricted to the tangent space of the manifold at ``x0``."""
    return tangent_projection(cs, x0, increment)


def _dae_advance(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    constraints: Constraints,
    cfg: FlowConfig,
    xi: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    scheme = cfg.dae_scheme
    rosenbrock = scheme == ROSENBROCK_PROJECT or cfg.integrator == ROSENBROCK_EM
    predicted, increment = _advance(ens, ctx, diff, cfg.pseudo_step, xi, rosenbrock)

    out = np.empty_like(predicted)
    tangent = np.empty_like(increment)
    for e in range(ens.shape[1]):
        cs = member_constraint(constraints, e)
        x0 = ens[:, e]
        x1 = predicted[:, e]
        tangent[:, e] = eliminated_increment(cs, x0, increment[:, e])
        if scheme == ELIMINATED:
            x1 = x0 + eliminated_increment(cs, x0, x1 - x0)
        anchor = x0 if scheme == ANCHOR_AT_X0 else x1
        try:
            result = project_to_manifold(
                x1, cs, anchor, cfg.projection_tol, cfg.projection_max_iter
            )
        except ProjectionError as err:
            raise err.for_member(e, scheme) from err
        out[:, e] = result.x
    return out, tangent


def vfpdae_step(
    ens: np.ndarray,
    ctx: GaussianFlowContext,
    diff: DiffusionOperator,
    constraints: Constraints,
    cfg: FlowConfig,
    xi: np.ndarray,
) -> np.ndarray:
    """One SDAE step: predictor under the selected scheme, then projection per member."""
    return _dae_advance(ens, ctx, diff, constraints, cfg, xi)[0]


class WienerStream:
    """Counter-based standard normals keyed by (seed, cycle, step, member).

    Draws do not depend on evaluation order, so member loops may run in any
    order or in parallel.
    """

    WIENER = 0
    OBSERVATION = 1

    def __init__(self, seed: int, cycle: int = 0):
        self.seed = int(seed)
        self.cycle = int(cycle)

    def generator(self, step: int, member: int, stream: int = WIENER) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.cycle, step, member, stream])

    def normals(self, step: int, n_s: int, n_e: int, stream: int = WIENER) -> np.ndarray:
        return np.column_stack(
            [self.generator(step, e, stream).standard_normal(n_s) for e in range(n_e)]
        )


def perturbed_observations(
    obs: ObservationModel, scale: float, n_e: int, stream: WienerStream
) -> np.ndarray:
    """Per-member data ``y + eta``, ``eta ~ N(0, scale^2 R)``, drawn once per analysis."""
    columns = [
        obs.y + scale * obs.sample_noise(stream.generator(0, e, WienerStream.OBSERVATION))
        for e in range(n_e)
    ]
    return np.column_stack(columns)


@dataclass(frozen=True)
class FlowResult:
    """Analysis ensemble and convergence information of one flow."""

    ensemble: np.ndarray
    steps: int
    converged: bool


def run_flow(
    forecast: np.ndarray,
    obs: ObservationModel,
    constraints: Optional[Constraints],
    cfg: FlowConfig,
    diffusion: Union[DiffusionOperator, Callable[[np.ndarray], DiffusionOperator]],
    precision_factory: PrecisionFactory,
    variant: str = "VFPDAE",
    cycle: int = 0,
    initial: Optional[np.ndarray] = None,
) -> FlowResult:
    """Integrate the flow from the forecast until the ensemble mean settles.

    Stops when the infinity norm of the deterministic change in ensemble mean
    drops below ``cfg.stop_tol`` or after ``cfg.max_steps`` steps; the latter
    is reported through ``converged=False`` rather than an error. The Wiener
    increments are left out of the stopping statistic, and VFPDAE measures the
    drift increment along the manifold.
    """
    if variant not in FLOW_VARIANTS:
        raise ConfigError(f"unknown flow variant {variant!r}", "filter.variant")
    if variant != "VFP" and constraints is None:
        raise ConfigError(f"{variant} requires a constraint system", "filter.variant")

    forecast = as_ensemble(forecast, min_members=2)
    n_s, n_e = forecast.shape
    diff = diffusion(forecast) if callable(diffusion) and not isinstance(diffusion, DiffusionOperator) else diffusion
    if diff.size != n_s:
        raise DimensionError(f"Diffusion acts on size {diff.size}, state has size {n_s}")

    stream = WienerStream(cfg.seed, cycle)
    mean_f = forecast.mean(axis=1)
    prec_f = precision_factory(forecast)
    y_members = None
    if cfg.perturbed_obs:
        y_members = perturbed_observations(obs, cfg.perturbed_obs, n_e, stream)

    X = forecast.copy() if initial is None else as_ensemble(initial, min_members=2).copy()
    if variant == "VFPDAE":
        off = max_violation(constraints, X) > cfg.projection_tol
        if np.any(off):
            logger.debug(f"Projecting {int(off.sum())} off-manifold member(s) before the flow")
            X[:, off] = project_ensemble(
                X[:, off],
                [member_constraint(constraints, e) for e in np.flatnonzero(off)],
                tol=cfg.projection_tol,
                max_iter=cfg.projection_max_iter,
            )

    mean_prev = X.mean(axis=1)
    steps = 0
    converged = False
    for step in range(cfg.max_steps):
        ctx = GaussianFlowContext(
            mean_f=mean_f,
            prec_f=prec_f,
            mean_tau=mean_prev,
            prec_tau=precision_factory(X),
            obs=obs,
            y_members=y_members,
        )
        xi = np.zeros((n_s, n_e)) if diff.is_zero else stream.normals(step + 1, n_s, n_e)

        if variant == "VFPDAE":
            X, increment = _dae_advance(X, ctx, diff, constraints, cfg, xi)
            if cfg.check_manifold:
                worst = float(max_violation(constraints, X).max())
                if worst > cfg.projection_tol:
                    raise FlowError(f"Member left the manifold at step {step + 1}: |g|={worst:.3e}")
        elif variant == "VFPSTAB":
            X, increment = _stab_advance(X, ctx, diff, constraints, cfg, xi)
        else:
            X, increment = _advance(X, ctx, diff, cfg.pseudo_step, xi, cfg.integrator == ROSENBROCK_EM)
        X = _check_finite(X, "state")

        steps = step + 1
        mean_prev = X.mean(axis=1)
        change = float(np.max(np.abs(increment.mean(axis=1))))
        if change < cfg.stop_tol:
            converged = True
            break

    if not converged:
        logger.info(f"{variant} flow stopped at max_steps={cfg.max_steps} without meeting stop_tol")
    return FlowResult(ensemble=X, steps=steps, converged=converged)
