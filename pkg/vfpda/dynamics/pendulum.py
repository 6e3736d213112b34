"""Double pendulum as a first-order index-2 DAE with unit masses and rods.

State layout: ``(x1, y1, x2, y2, u1, v1, u2, v2)``.
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from ..exceptions import ModelStepError, ProjectionError
from ..services.constraints import (
    ConstraintSystem,
    jacobian_check,
    max_violation,
    project_to_manifold,
    stack_groups,
)
from ..services.observations import ObservationModel
from .base import CheckResult, ForwardModel

logger = logging.getLogger(__name__)

GRAVITY = 9.8
N_STATE = 8
N_CONSTRAINTS = 5
STEP_TOL = 1e-11

REFERENCE_STATE = np.array(
    [0.5, np.sqrt(3.0) / 2.0, 0.5, 1.0 + np.sqrt(3.0) / 2.0, 0.0, 0.0, 0.0, 0.0]
)

GROUPS = stack_groups([2, 2, 1], ["rods", "velocities", "energy"])


def _split(state: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    state = np.asarray(state, dtype=float)
    if state.shape != (N_STATE,):
        raise ValueError(f"Pendulum state must have shape (8,), got {state.shape}")
    return state[:4], state[4:]


def _forcing(gravity: float) -> np.ndarray:
    return np.array([0.0, -gravity, 0.0, -gravity])


def position_jacobian(q: np.ndarray) -> np.ndarray:
    """Gradient of the rod-length constraints ``0.5(|r|^2 - 1)`` w.r.t. positions."""
    x1, y1, x2, y2 = q
    dx, dy = x2 - x1, y2 - y1
    return np.array([[x1, y1, 0.0, 0.0], [-dx, -dy, dx, dy]])


def _solve_2x2(M: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if abs(det) <= 1e-12 * max(1.0, float(np.abs(M).max()) ** 2):
        raise ModelStepError(f"Singular {what} system (det={det:.3e}): degenerate pendulum geometry")
    return np.linalg.solve(M, rhs)


def pendulum_tensions(state: np.ndarray, gravity: float = GRAVITY) -> np.ndarray:
    """Rod tensions ``(lambda1, lambda2)`` from the 2x2 hidden-constraint system."""
    q, v = _split(state)
    x1, y1, x2, y2 = q
    u1, v1, u2, v2 = v
    dx, dy, du, dv = x2 - x1, y2 - y1, u2 - u1, v2 - v1
    cross = -(x1 * dx + y1 * dy)
    M = np.array([[x1**2 + y1**2, cross], [cross, 2.0 * (dx**2 + dy**2)]])
    rhs = np.array([u1**2 + v1**2 - gravity * y1, du**2 + dv**2])
    return _solve_2x2(M, rhs, "tension")


def pendulum_rhs(state: np.ndarray, gravity: float = GRAVITY) -> Tuple[np.ndarray, np.ndarray]:
    """Accelerations of both masses and the rod tensions that produce them."""
    q, _ = _split(state)
    lam = pendulum_tensions(state, gravity)
    acc = _forcing(gravity) - position_jacobian(q).T @ lam
    return acc, lam


def pendulum_energy(state: np.ndarray, gravity: float = GRAVITY) -> float:
    """Kinetic plus potential energy, zero with both masses at their lowest point."""
    q, v = _split(state)
    return float(0.5 * v @ v + gravity * (q[1] + q[3] + 3.0))


def pendulum_constraint_values(
    state: np.ndarray, energy: float, gravity: float = GRAVITY
) -> np.ndarray:
    q, v = _split(state)
    x1, y1, x2, y2 = q
    u1, v1, u2, v2 = v
    dx, dy, du, dv = x2 - x1, y2 - y1, u2 - u1, v2 - v1
    return np.array(
        [
            0.5 * (x1**2 + y1**2 - 1.0),
            0.5 * (dx**2 + dy**2 - 1.0),
            x1 * u1 + y1 * v1,
            dx * du + dy * dv,
            pendulum_energy(state, gravity) - energy,
        ]
    )


def pendulum_constraint_jacobian(state: np.ndarray, gravity: float = GRAVITY) -> np.ndarray:
    q, v = _split(state)
    x1, y1, x2, y2 = q
    u1, v1, u2, v2 = v
    dx, dy, du, dv = x2 - x1, y2 - y1, u2 - u1, v2 - v1
    return np.array(
        [
            [x1, y1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [-dx, -dy, dx, dy, 0.0, 0.0, 0.0, 0.0],
            [u1, v1, 0.0, 0.0, x1, y1, 0.0, 0.0],
            [-du, -dv, du, dv, -dx, -dy, dx, dy],
            [0.0, gravity, 0.0, gravity, u1, v1, u2, v2],
        ]
    )


def pendulum_constraints(energy: float, gravity: float = GRAVITY) -> ConstraintSystem:
    """Rod lengths, rod-normal velocities and total energy ``E0``."""
    return ConstraintSystem(
        n_c=N_CONSTRAINTS,
        eval_fn=lambda x: pendulum_constraint_values(x, energy, gravity),
        jacobian_fn=lambda x: pendulum_constraint_jacobian(x, gravity),
        groups=dict(GROUPS),
    )


_ROD_CONSTRAINTS = ConstraintSystem(
    n_c=2,
    eval_fn=lambda q: np.array(
        [0.5 * (q[0] ** 2 + q[1] ** 2 - 1.0), 0.5 * ((q[2] - q[0]) ** 2 + (q[3] - q[1]) ** 2 - 1.0)]
    ),
    jacobian_fn=position_jacobian,
)


def _restore_manifold(state: np.ndarray, energy: float, gravity: float, tol: float) -> np.ndarray:
    """Rods on positions, then rod-normal velocities, then all five constraints.

    Staging keeps the full projection's displacement at the size of the
    step's local error.
    """
    q, v = _split(state)
    q = project_to_manifold(q, _ROD_CONSTRAINTS, tol=tol).x
    G = position_jacobian(q)
    v = v - G.T @ _solve_2x2(G @ G.T, G @ v, "velocity projection")
    full = pendulum_constraints(energy, gravity)
    return project_to_manifold(np.concatenate([q, v]), full, tol=tol).x


def pherk2_step(
    state: np.ndarray,
    dt: float,
    energy: Optional[float] = None,
    gravity: float = GRAVITY,
    tol: float = STEP_TOL,
) -> np.ndarray:
    """Two-stage partitioned half-explicit Runge-Kutta step.

    Tableau ``A = [[0, 0], [1, 0]]``, ``A~ = [[0, 0], [1/2, 1/2]]``,
    ``b = [1/2, 1/2]``, ``c = [0, 1]``; the second-stage tension makes the
    stage velocity satisfy the hidden constraint at the stage position. The
    result is returned on the constraint manifold with energy ``energy``
    (the energy of ``state`` when omitted).
    """
    if not dt > 0:
        raise ValueError(f"Time step must be positive, got {dt}")
    q0, v0 = _split(state)
    if energy is None:
        energy = pendulum_energy(state, gravity)
    f = _forcing(gravity)

    lam1 = pendulum_tensions(state, gravity)
    G1 = position_jacobian(q0)

    Q2 = q0 + dt * v0
    G2 = position_jacobian(Q2)
    base = v0 + dt * f - 0.5 * dt * (G1.T @ lam1)
    lam2 = _solve_2x2(0.5 * dt * (G2 @ G2.T), G2 @ base, "stage tension")
    V2 = base - 0.5 * dt * (G2.T @ lam2)

    q1 = q0 + 0.5 * dt * (v0 + V2)
    try:
        return _restore_manifold(np.concatenate([q1, V2]), energy, gravity, tol)
    except ProjectionError as e:
        raise ModelStepError(f"PHERK step failed to return to the manifold: {e}") from e


def mirror(state: np.ndarray) -> np.ndarray:
    """Reflection ``x -> -x`` of positions and horizontal velocities."""
    return np.asarray(state, dtype=float) * np.array([-1, 1, -1, 1, -1, 1, -1, 1])


class PendulumModel(ForwardModel):
    """Double pendulum twin-experiment model."""

    name = "pendulum"
    fd_step = 1e-5

    def __init__(
        self,
        time_step: float = 0.01,
        gravity: float = GRAVITY,
        reference_state: Optional[np.ndarray] = None,
        sample_interval: float = 0.008,
        obs_variance: float = 0.1,
    ):
        super().__init__(time_step)
        self.gravity = float(gravity)
        self.reference_state = (
            REFERENCE_STATE.copy() if reference_state is None else np.asarray(reference_state, dtype=float)
        )
        self.sample_interval = float(sample_interval)
        self.obs_variance = float(obs_variance)
        self.energy = pendulum_energy(self.reference_state, self.gravity)
        self._constraints = pendulum_constraints(self.energy, self.gravity)

    @property
    def n_s(self) -> int:
        return N_STATE

    @property
    def n_c(self) -> int:
        return N_CONSTRAINTS

    def step(self, x: np.ndarray, dt: float) -> np.ndarray:
        return pherk2_step(x, dt, gravity=self.gravity)

    def constraints(self, forecast: Optional[np.ndarray] = None) -> ConstraintSystem:
        return self._constraints

    @property
    def constraint_groups(self) -> Dict[str, slice]:
        return dict(GROUPS)

    def sample_trajectory(self, n_samples: int) -> np.ndarray:
        """``n_samples`` states ``sample_interval`` apart, starting at the reference."""
        states = [self.reference_state]
        for _ in range(n_samples - 1):
            states.append(self.advance(states[-1], self.sample_interval))
        return np.column_stack(states)

    def initial_conditions(self, n_e: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Truth and members drawn without repetition from one reference trajectory."""
        samples = self.sample_trajectory(n_e + 1)
        order = rng.permutation(n_e + 1)
        return samples[:, order[0]].copy(), samples[:, order[1:]].copy()

    def observation_model(self, y: Optional[np.ndarray] = None) -> ObservationModel:
        y = np.zeros(N_STATE) if y is None else y
        return ObservationModel.linear(
            np.eye(N_STATE), y, self.obs_variance * np.eye(N_STATE), coords=self.state_coords
        )

    def default_crmse_scaling(self) -> np.ndarray:
        return np.array([1.0, 1.0, 1.0, 1.0, 1.0 / self.energy])

    def self_checks(self, rng: np.random.Generator) -> List[CheckResult]:
        checks = super().self_checks(rng)

        state = self.reference_state + np.concatenate([np.zeros(4), rng.standard_normal(4)])
        state = _restore_manifold(state, pendulum_energy(state, self.gravity), self.gravity, STEP_TOL)
        acc, lam = pendulum_rhs(state, self.gravity)
        q, v = _split(state)
        # Hidden constraint: G(q) a + |v|^2-terms = 0.
        du, dv = v[2] - v[0], v[3] - v[1]
        hidden = position_jacobian(q) @ acc + np.array([v[0] ** 2 + v[1] ** 2, du**2 + dv**2])
        checks.append(CheckResult("tension solve residual", float(np.abs(hidden).max()), 1e-10))

        h = 1e-6
        forward = np.concatenate([q + h * v, v + h * acc])
        backward = np.concatenate([q - h * v, v - h * acc])
        dE = (pendulum_energy(forward, self.gravity) - pendulum_energy(backward, self.gravity)) / (2 * h)
        checks.append(CheckResult("energy rate along the dynamics", abs(dE), 1e-6))

        x = self.reference_state
        worst = 0.0
        for _ in range(1000):
            x = self.step(x, self.time_step)
            worst = max(worst, float(max_violation(self._constraints, x[:, None])[0]))
        checks.append(CheckResult("constraint drift over 1000 PHERK steps", worst, 1e-6))

        jac = jacobian_check(self._constraints, state, self.fd_step)
        checks.append(CheckResult("constraint jacobian on the manifold", jac, 1e-5))
        return checks
