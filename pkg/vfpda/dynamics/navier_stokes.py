"""Wind-driven incompressible Navier-Stokes in vorticity-streamfunction form.

The assimilated state is the velocity ``(u, v)`` on every node of an
``nx x ny`` grid over ``[0, 1] x [-1, 1]``; the model marches vorticity with
the Arakawa Jacobian and SSP-RK3 and converts back to velocities.
Fields are ``(nx, ny)`` arrays indexed ``[i, j]`` with ``i`` along ``x``.
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sps

from ..exceptions import ModelStepError
from ..services.constraints import ConstraintSystem, jacobian_check, stack_groups
from ..services.observations import ObservationModel
from .base import CheckResult, ForwardModel

logger = logging.getLogger(__name__)

REYNOLDS = 450.0
ROSSBY = 0.0036
OBS_INTERVAL = 0.0109
TIME_STEP = OBS_INTERVAL / 40
JACOBIAN_SAMPLE = 200


def _first_derivative(n: int, h: float) -> sps.csr_matrix:
    """Second-order central difference, one-sided second order at both ends."""
    D = sps.lil_matrix((n, n))
    for k in range(1, n - 1):
        D[k, k - 1] = -1.0
        D[k, k + 1] = 1.0
    D[0, 0:3] = [-3.0, 4.0, -1.0]
    D[n - 1, n - 3 : n] = [1.0, -4.0, 3.0]
    return (D / (2.0 * h)).tocsr()


def _dirichlet_second_derivative(n: int, h: float) -> sps.csr_matrix:
    return (sps.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n)) / h**2).tocsr()


class NsGrid:
    """Grid, difference operators and Poisson solver shared by all members."""

    def __init__(self, nx: int = 64, ny: int = 129):
        if nx < 5 or ny < 5:
            raise ValueError(f"Grid must be at least 5 x 5, got {nx} x {ny}")
        self.nx = int(nx)
        self.ny = int(ny)
        self.x = np.linspace(0.0, 1.0, self.nx)
        self.y = np.linspace(-1.0, 1.0, self.ny)
        self.dx = self.x[1] - self.x[0]
        self.dy = self.y[1] - self.y[0]
        self.area = self.dx * self.dy

        Ix = sps.identity(self.nx, format="csr")
        Iy = sps.identity(self.ny, format="csr")
        self.Dx = sps.kron(_first_derivative(self.nx, self.dx), Iy, format="csr")
        self.Dy = sps.kron(Ix, _first_derivative(self.ny, self.dy), format="csr")
        self.laplacian = (
            sps.kron(_dirichlet_second_derivative(self.nx, self.dx), Iy)
            + sps.kron(Ix, _dirichlet_second_derivative(self.ny, self.dy))
        ).tocsr()

        p = np.arange(1, self.nx - 1)
        q = np.arange(1, self.ny - 1)
        lam_x = (2.0 - 2.0 * np.cos(np.pi * p / (self.nx - 1))) / self.dx**2
        lam_y = (2.0 - 2.0 * np.cos(np.pi * q / (self.ny - 1))) / self.dy**2
        self._poisson_eig = lam_x[:, None] + lam_y[None, :]
        self.forcing = np.broadcast_to(np.sin(np.pi * self.y), (self.nx, self.ny)).copy()

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> Tuple[int, int]:
        return self.nx, self.ny

    def poisson_solve(self, omega: np.ndarray) -> np.ndarray:
        """``psi`` with ``Laplacian(psi) = -omega`` inside and ``psi = 0`` on the walls."""
        rhs = np.asarray(omega, dtype=float)[1:-1, 1:-1]
        coeffs = sfft.dstn(rhs, type=1, norm="ortho")
        psi = np.zeros(self.shape)
        psi[1:-1, 1:-1] = sfft.idstn(coeffs / self._poisson_eig, type=1, norm="ortho")
        return psi

    def laplacian_5pt(self, f: np.ndarray) -> np.ndarray:
        """Five-point Laplacian at interior nodes, zero on the walls."""
        out = np.zeros(self.shape)
        out[1:-1, 1:-1] = (f[2:, 1:-1] - 2.0 * f[1:-1, 1:-1] + f[:-2, 1:-1]) / self.dx**2 + (
            f[1:-1, 2:] - 2.0 * f[1:-1, 1:-1] + f[1:-1, :-2]
        ) / self.dy**2
        return out

    def velocities(self, psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """``(u, v) = (dpsi/dy, -dpsi/dx)`` on every node."""
        flat = np.asarray(psi, dtype=float).ravel()
        return (self.Dy @ flat).reshape(self.shape), -(self.Dx @ flat).reshape(self.shape)

    def vorticity(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``dv/dx - du/dy`` on every node."""
        return (self.Dx @ np.ravel(v) - self.Dy @ np.ravel(u)).reshape(self.shape)

    def divergence(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (self.Dx @ np.ravel(u) + self.Dy @ np.ravel(v)).reshape(self.shape)


def arakawa_jacobian(p: np.ndarray, q: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Arakawa's nine-point ``p_x q_y - p_y q_x`` on every node, zero outside the grid.

    For fields vanishing on the walls, the node sums of ``J``, ``p J`` and
    ``q J`` are zero up to rounding.
    """
    P = np.pad(np.asarray(p, dtype=float), 1)
    Q = np.pad(np.asarray(q, dtype=float), 1)

    def at(F: np.ndarray, di: int, dj: int) -> np.ndarray:
        ni, nj = F.shape[0] - 2, F.shape[1] - 2
        return F[1 + di : 1 + di + ni, 1 + dj : 1 + dj + nj]

    j_pp = (at(P, 1, 0) - at(P, -1, 0)) * (at(Q, 0, 1) - at(Q, 0, -1)) - (
        at(P, 0, 1) - at(P, 0, -1)
    ) * (at(Q, 1, 0) - at(Q, -1, 0))
    j_px = (
        at(P, 1, 0) * (at(Q, 1, 1) - at(Q, 1, -1))
        - at(P, -1, 0) * (at(Q, -1, 1) - at(Q, -1, -1))
        - at(P, 0, 1) * (at(Q, 1, 1) - at(Q, -1, 1))
        + at(P, 0, -1) * (at(Q, 1, -1) - at(Q, -1, -1))
    )
    j_xp = (
        at(Q, 0, 1) * (at(P, 1, 1) - at(P, -1, 1))
        - at(Q, 0, -1) * (at(P, 1, -1) - at(P, -1, -1))
        - at(Q, 1, 0) * (at(P, 1, 1) - at(P, 1, -1))
        + at(Q, -1, 0) * (at(P, -1, 1) - at(P, -1, -1))
    )
    return (j_pp + j_px + j_xp) / (12.0 * dx * dy)


def ns_rhs(
    omega: np.ndarray, grid: NsGrid, reynolds: float = REYNOLDS, rossby: float = ROSSBY
) -> np.ndarray:
    """Vorticity tendency ``-J(psi, omega) + Re^-1 Lap(omega) + Ro^-1 (psi_x + F)``.

    ``J(psi, omega) = psi_y omega_x - psi_x omega_y``; walls are held at zero.
    """
    psi = grid.poisson_solve(omega)
    tendency = arakawa_jacobian(psi, omega, grid.dx, grid.dy)
    tendency += grid.laplacian_5pt(omega) / reynolds
    psi_x = np.zeros(grid.shape)
    psi_x[1:-1, 1:-1] = (psi[2:, 1:-1] - psi[:-2, 1:-1]) / (2.0 * grid.dx)
    tendency += (psi_x + grid.forcing) / rossby
    tendency[0, :] = tendency[-1, :] = 0.0
    tendency[:, 0] = tendency[:, -1] = 0.0
    return tendency


def rk3_step(
    omega: np.ndarray,
    dt: float,
    grid: NsGrid,
    reynolds: float = REYNOLDS,
    rossby: float = ROSSBY,
) -> np.ndarray:
    """Three-stage strong-stability-preserving Runge-Kutta step."""
    if not dt > 0:
        raise ValueError(f"Time step must be positive, got {dt}")
    def f(w: np.ndarray) -> np.ndarray:
        return ns_rhs(w, grid, reynolds, rossby)

    w1 = omega + dt * f(omega)
    w2 = 0.75 * omega + 0.25 * (w1 + dt * f(w1))
    return omega / 3.0 + 2.0 / 3.0 * (w2 + dt * f(w2))


def state_from_psi(psi: np.ndarray, grid: NsGrid) -> np.ndarray:
    u, v = grid.velocities(psi)
    return np.concatenate([u.ravel(), v.ravel()])


def split_state(x: np.ndarray, grid: NsGrid) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.shape != (2 * grid.size,):
        raise ValueError(f"Velocity state must have shape ({2 * grid.size},), got {x.shape}")
    return x[: grid.size].reshape(grid.shape), x[grid.size :].reshape(grid.shape)


def vorticity_from_state(x: np.ndarray, grid: NsGrid) -> np.ndarray:
    """Model vorticity of a velocity state, with the homogeneous wall values."""
    omega = grid.vorticity(*split_state(x, grid))
    omega[0, :] = omega[-1, :] = 0.0
    omega[:, 0] = omega[:, -1] = 0.0
    return omega


def kinetic_energy(x: np.ndarray, grid: NsGrid) -> float:
    x = np.asarray(x, dtype=float)
    return 0.5 * grid.area * float(x @ x)


def enstrophy(x: np.ndarray, grid: NsGrid) -> float:
    omega = grid.vorticity(*split_state(x, grid))
    return 0.5 * grid.area * float(np.sum(omega * omega))


def ns_constraint_function(x: np.ndarray, grid: NsGrid, energy_ref: float, enstrophy_ref: float) -> np.ndarray:
    """Divergence at every node, then energy and enstrophy relative to the references."""
    u, v = split_state(x, grid)
    return np.concatenate(
        [
            grid.divergence(u, v).ravel(),
            [kinetic_energy(x, grid) / energy_ref, enstrophy(x, grid) / enstrophy_ref],
        ]
    )


def ns_constraint_jacobian(
    x: np.ndarray, grid: NsGrid, energy_ref: float, enstrophy_ref: float
) -> sps.csr_matrix:
    u, v = split_state(x, grid)
    omega = grid.vorticity(u, v).ravel()
    energy_row = grid.area * np.asarray(x, dtype=float) / energy_ref
    enstrophy_row = grid.area * np.concatenate([-(grid.Dy.T @ omega), grid.Dx.T @ omega]) / enstrophy_ref
    return sps.vstack(
        [
            sps.hstack([grid.Dx, grid.Dy]),
            sps.csr_matrix(energy_row[None, :]),
            sps.csr_matrix(enstrophy_row[None, :]),
        ],
        format="csr",
    )


def ns_constraints(forecast_member: np.ndarray, grid: NsGrid) -> ConstraintSystem:
    """Incompressibility plus energy and enstrophy of ``forecast_member``.

    The two global rows are normalized by the member's own energy and
    enstrophy, so they read ``E(x)/E(x_f) - 1`` and ``Z(x)/Z(x_f) - 1``.
    """
    energy_ref = kinetic_energy(forecast_member, grid)
    enstrophy_ref = enstrophy(forecast_member, grid)
    if energy_ref <= 0.0 or enstrophy_ref <= 0.0:
        raise ValueError("Forecast member has no kinetic energy or enstrophy to anchor to")
    relative = np.zeros(grid.size + 2, dtype=bool)
    relative[-2:] = True
    return ConstraintSystem.forecast_relative(
        lambda x: ns_constraint_function(x, grid, energy_ref, enstrophy_ref),
        lambda x: ns_constraint_jacobian(x, grid, energy_ref, enstrophy_ref),
        forecast_member,
        relative=relative,
        groups=stack_groups([grid.size, 1, 1], ["divergence", "energy", "enstrophy"]),
    )


def smooth_streamfunction(
    grid: NsGrid, rng: np.random.Generator, max_mode: int = 6
) -> np.ndarray:
    """Random streamfunction built from the lowest sine modes, unit maximum."""
    coeffs = np.zeros((grid.nx - 2, grid.ny - 2))
    kx = min(max_mode, grid.nx - 2)
    ky = min(2 * max_mode, grid.ny - 2)
    p = np.arange(1, kx + 1)[:, None]
    q = np.arange(1, ky + 1)[None, :]
    coeffs[:kx, :ky] = rng.standard_normal((kx, ky)) / (p**2 + (q / 2.0) ** 2)
    psi = np.zeros(grid.shape)
    psi[1:-1, 1:-1] = sfft.idstn(coeffs, type=1, norm="ortho")
    return psi / np.max(np.abs(psi))


class NavierStokesModel(ForwardModel):
    """Double-gyre twin-experiment model with per-member constraints."""

    name = "navier_stokes"
    fd_step = 1e-3

    def __init__(
        self,
        time_step: float = TIME_STEP,
        nx: int = 64,
        ny: int = 129,
        reynolds: float = REYNOLDS,
        rossby: float = ROSSBY,
        obs_per_axis: int = 16,
        obs_variance: float = 400.0,
        initial_vorticity: float = 10.0,
        spinup_time: float = 100 * OBS_INTERVAL,
        ensemble_spread: float = 10.0,
    ):
        super().__init__(time_step)
        self.grid = NsGrid(nx, ny)
        self.reynolds = float(reynolds)
        self.rossby = float(rossby)
        self.obs_variance = float(obs_variance)
        self.initial_vorticity = float(initial_vorticity)
        self.spinup_time = float(spinup_time)
        self.ensemble_spread = float(ensemble_spread)

        ix = np.round(np.linspace(0, nx - 1, obs_per_axis + 2)).astype(int)[1:-1]
        iy = np.round(np.linspace(0, ny - 1, obs_per_axis + 2)).astype(int)[1:-1]
        if np.unique(ix).size != ix.size or np.unique(iy).size != iy.size:
            raise ValueError(f"Grid {nx} x {ny} is too coarse for a {obs_per_axis}-point lattice")
        II, JJ = np.meshgrid(ix, iy, indexing="ij")
        nodes = (II * ny + JJ).ravel()
        self.obs_indices = np.concatenate([nodes, self.grid.size + nodes])
        node_coords = np.column_stack([self.grid.x[II.ravel()], self.grid.y[JJ.ravel()]])
        self.obs_coords = np.vstack([node_coords, node_coords])

    @property
    def n_s(self) -> int:
        return 2 * self.grid.size

    @property
    def n_c(self) -> int:
        return self.grid.size + 2

    def _march(self, omega: np.ndarray, duration: float) -> np.ndarray:
        n_steps = max(1, int(np.ceil(duration / self.time_step - 1e-9)))
        dt = duration / n_steps
        for _ in range(n_steps):
            omega = rk3_step(omega, dt, self.grid, self.reynolds, self.rossby)
        return omega

    def _to_state(self, omega: np.ndarray) -> np.ndarray:
        return state_from_psi(self.grid.poisson_solve(omega), self.grid)

    def step(self, x: np.ndarray, dt: float) -> np.ndarray:
        omega = rk3_step(vorticity_from_state(x, self.grid), dt, self.grid, self.reynolds, self.rossby)
        return self._to_state(omega)

    def advance(self, x: np.ndarray, duration: float) -> np.ndarray:
        # Convert once per forecast, not once per RK3 step.
        omega = self._march(vorticity_from_state(x, self.grid), duration)
        state = self._to_state(omega)
        if not np.all(np.isfinite(state)):
            raise ModelStepError("Navier-Stokes state became non-finite")
        return state

    def constraints(self, forecast: Optional[np.ndarray] = None) -> List[ConstraintSystem]:
        if forecast is None:
            raise ValueError("Navier-Stokes constraints are anchored to forecast members")
        forecast = np.asarray(forecast, dtype=float)
        if forecast.ndim == 1:
            forecast = forecast[:, None]
        return [ns_constraints(forecast[:, e], self.grid) for e in range(forecast.shape[1])]

    @property
    def constraint_groups(self) -> Dict[str, slice]:
        return stack_groups([self.grid.size, 1, 1], ["divergence", "energy", "enstrophy"])

    @property
    def state_coords(self) -> np.ndarray:
        X, Y = np.meshgrid(self.grid.x, self.grid.y, indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        return np.vstack([nodes, nodes])

    def laplacian_like(self) -> sps.csr_matrix:
        """``blkdiag(Lap, Lap)`` with the Dirichlet closure; ``u`` and ``v`` uncorrelated."""
        return sps.block_diag([self.grid.laplacian, self.grid.laplacian], format="csr")

    def initial_conditions(self, n_e: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Spun-up smooth random vorticity as truth; members add smooth solenoidal noise."""
        psi0 = smooth_streamfunction(self.grid, rng)
        omega0 = -self.grid.laplacian_5pt(psi0)
        omega0 *= self.initial_vorticity / max(np.sqrt(np.mean(omega0**2)), 1e-300)
        logger.info(f"Spinning up Navier-Stokes truth for t={self.spinup_time:g}")
        truth = self._to_state(self._march(omega0, self.spinup_time))

        members = []
        for _ in range(n_e):
            dx = state_from_psi(smooth_streamfunction(self.grid, rng), self.grid)
            dx *= self.ensemble_spread / np.sqrt(np.mean(dx**2))
            members.append(truth + dx)
        return truth, np.column_stack(members)

    def observation_model(self, y: Optional[np.ndarray] = None) -> ObservationModel:
        n_o = self.obs_indices.size
        y = np.zeros(n_o) if y is None else y
        return ObservationModel.selection(
            self.obs_indices, self.n_s, y, self.obs_variance * np.eye(n_o), coords=self.obs_coords
        )

    def self_checks(self, rng: np.random.Generator) -> List[CheckResult]:
        grid = self.grid
        psi = smooth_streamfunction(grid, rng)
        omega = -grid.laplacian_5pt(psi)
        checks = []

        x = state_from_psi(psi, grid) + 1e-3 * rng.standard_normal(self.n_s)
        cs = ns_constraints(x, grid)
        columns = rng.choice(self.n_s, size=min(self.n_s, JACOBIAN_SAMPLE), replace=False)
        checks.append(
            CheckResult(
                "constraint jacobian vs finite differences (sampled columns)",
                jacobian_check(cs, x, self.fd_step, columns),
                1e-5,
            )
        )

        a = np.zeros(grid.shape)
        b = np.zeros(grid.shape)
        a[1:-1, 1:-1] = rng.standard_normal((grid.nx - 2, grid.ny - 2))
        b[1:-1, 1:-1] = rng.standard_normal((grid.nx - 2, grid.ny - 2))
        J = arakawa_jacobian(a, b, grid.dx, grid.dy)
        scale = float(np.max(np.abs(J)))
        checks.append(CheckResult("Arakawa sum of J (relative)", abs(float(J.sum())) / scale, 1e-10))
        checks.append(CheckResult("Arakawa sum of a J (relative)", abs(float((a * J).sum())) / scale, 1e-10))
        checks.append(CheckResult("Arakawa sum of b J (relative)", abs(float((b * J).sum())) / scale, 1e-10))

        recovered = grid.poisson_solve(omega)
        residual = grid.laplacian_5pt(recovered) + omega
        residual[0, :] = residual[-1, :] = residual[:, 0] = residual[:, -1] = 0.0
        checks.append(
            CheckResult(
                "Poisson residual (relative)",
                float(np.max(np.abs(residual)) / np.max(np.abs(omega))),
                1e-10,
            )
        )

        u, v = grid.velocities(psi)
        div = grid.divergence(u, v)
        checks.append(
            CheckResult(
                "divergence of velocities from psi (relative)",
                float(np.max(np.abs(div)) / np.max(np.abs(u) + np.abs(v)) * grid.dx),
                1e-12,
            )
        )
        return checks
