"""Equality constraints, Newton projection onto their manifold and pseudo-observations."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from ..config import settings
from ..exceptions import DimensionError, NumericalError, ProjectionError, RankDeficiencyError
from .observations import ObservationModel

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sps.spmatrix]

STATE_INVARIANT = "state-invariant"
FORECAST_RELATIVE = "forecast-relative"

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50
MAX_HALVINGS = 30
KRYLOV_RTOL = 1e-12
KRYLOV_MIN_ITER = 200
GMRES_RESTART = 200
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class ConstraintSystem:
    """Constraint function ``g`` with Jacobian ``G = dg/dx``.

    A forecast-relative system evaluates ``h(x) - anchor`` where ``anchor``
    holds ``h(x_f)`` of the member it was built for.
    """

    n_c: int
    eval_fn: Callable[[np.ndarray], np.ndarray]
    jacobian_fn: Callable[[np.ndarray], Matrix]
    kind: str = STATE_INVARIANT
    anchor: Optional[np.ndarray] = field(default=None, repr=False)
    groups: Dict[str, slice] = field(default_factory=dict)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.eval_fn(np.asarray(x, dtype=float)), dtype=float).ravel()
        if self.anchor is not None:
            g = g - self.anchor
        return g

    def jacobian(self, x: np.ndarray) -> Matrix:
        G = self.jacobian_fn(np.asarray(x, dtype=float))
        if sps.issparse(G):
            return sps.csr_matrix(G)
        return np.atleast_2d(np.asarray(G, dtype=float))

    @classmethod
    def linear(cls, A: np.ndarray, b: Union[float, np.ndarray] = 0.0) -> "ConstraintSystem":
        """``g(x) = A x - b``; a 1-D ``A`` is a single constraint."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.broadcast_to(np.asarray(b, dtype=float), (A.shape[0],)).copy()
        return cls(n_c=A.shape[0], eval_fn=lambda x: A @ x - b, jacobian_fn=lambda x: A)

    @classmethod
    def forecast_relative(
        cls,
        h: Callable[[np.ndarray], np.ndarray],
        h_jacobian: Callable[[np.ndarray], Matrix],
        x_f: np.ndarray,
        relative: Optional[np.ndarray] = None,
        groups: Optional[Dict[str, slice]] = None,
    ) -> "ConstraintSystem":
        """``g(x) = h(x) - h(x_f)`` on the entries flagged in ``relative`` (all by default)."""
        anchor = np.asarray(h(np.asarray(x_f, dtype=float)), dtype=float).ravel()
        if relative is not None:
            anchor = np.where(np.asarray(relative, dtype=bool), anchor, 0.0)
        return cls(
            n_c=anchor.size,
            eval_fn=h,
            jacobian_fn=h_jacobian,
            kind=FORECAST_RELATIVE,
            anchor=anchor,
            groups=dict(groups or {}),
        )


Constraints = Union[ConstraintSystem, Sequence[ConstraintSystem]]


def member_constraint(constraints: Constraints, member: int) -> ConstraintSystem:
    """Constraint system of one ensemble member (shared or per-member)."""
    if isinstance(constraints, ConstraintSystem):
        return constraints
    return constraints[member]


def is_shared(constraints: Constraints) -> bool:
    return isinstance(constraints, ConstraintSystem)


@dataclass(frozen=True)
class ProjectionResult:
    """State on the manifold with the multiplier that moved it there."""

    x: np.ndarray
    lam: np.ndarray
    iterations: int
    residual: float


def _to_dense(M: Matrix) -> np.ndarray:
    return M.toarray() if sps.issparse(M) else np.asarray(M)


def _jacobi(J: sps.spmatrix) -> spla.LinearOperator:
    diag = np.abs(J.diagonal())
    inv = np.where(diag > 0.0, 1.0 / np.where(diag > 0.0, diag, 1.0), 1.0)
    return spla.LinearOperator(J.shape, matvec=lambda v: inv * np.ravel(v), dtype=float)


def _is_symmetric(J: sps.spmatrix) -> bool:
    asym = abs(J - J.T)
    return asym.nnz == 0 or float(asym.max()) <= SYMMETRY_TOL * max(1.0, float(abs(J).max()))


def solve_inner(J: Matrix, r: np.ndarray, dense_limit: Optional[int] = None) -> np.ndarray:
    """Solve ``J delta = r`` for the small constraint-space system.

    Dense least squares up to ``dense_limit`` constraints, giving the
    minimum-norm solution. Above it a Jacobi-preconditioned Krylov solve
    started from zero: MINRES for the symmetric ``G G^T`` and restarted GMRES
    when the two Jacobians differ. Redundant but consistent constraints are
    accepted; an inconsistent singular system is not.
    """
    dense_limit = settings.dense_limit if dense_limit is None else dense_limit
    n_c = r.size
    scale = max(1.0, float(np.linalg.norm(r)))
    if n_c <= dense_limit:
        Jd = _to_dense(J)
        if not np.all(np.isfinite(Jd)):
            raise NumericalError("Constraint Jacobian product has non-finite entries")
        delta, _, rank, sv = sla.lstsq(Jd, r, cond=None)
        if rank < n_c:
            mismatch = float(np.linalg.norm(Jd @ delta - r))
            if mismatch > 1e-8 * scale:
                raise RankDeficiencyError(
                    f"Constraint Jacobian product is singular (rank {rank} < {n_c})",
                    {"rank": float(rank), "mismatch": mismatch, "smallest_sv": float(sv[-1])},
                )
        return delta
    J = sps.csr_matrix(J)
    if not np.all(np.isfinite(J.data)):
        raise NumericalError("Constraint Jacobian product has non-finite entries")
    M = _jacobi(J)
    maxiter = max(KRYLOV_MIN_ITER, 10 * n_c)
    if _is_symmetric(J):
        solver = "minres"
        delta, info = spla.minres(J, r, rtol=KRYLOV_RTOL, maxiter=maxiter, M=M)
    else:
        solver = "gmres"
        restart = min(n_c, GMRES_RESTART)
        delta, info = spla.gmres(
            J, r, rtol=KRYLOV_RTOL, atol=0.0, restart=restart,
            maxiter=max(1, maxiter // restart), M=M,
        )
    mismatch = float(np.linalg.norm(J @ delta - r))
    if not np.all(np.isfinite(delta)) or mismatch > 1e-8 * scale:
        raise RankDeficiencyError(
            "Constraint Jacobian product is singular and the Newton system inconsistent",
            {"mismatch": mismatch, "n_c": float(n_c), "krylov_info": float(info)},
        )
    logger.debug("%s solve of %d constraints: mismatch %.2e (info %d)", solver, n_c, mismatch, info)
    return delta


def project_to_manifold(
    x_hat: np.ndarray,
    cs: ConstraintSystem,
    jac_anchor: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    dense_limit: Optional[int] = None,
) -> ProjectionResult:
    """Move ``x_hat`` along ``G^T(jac_anchor)`` until ``|g|_inf <= tol``.

    Newton iteration on the multiplier with inner matrix
    ``G(x_k) G^T(jac_anchor)``, globalized by step halving on ``||g||_2``.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    anchor = x_hat if jac_anchor is None else np.asarray(jac_anchor, dtype=float)
    Gt = cs.jacobian(anchor).T
    if Gt.shape != (x_hat.size, cs.n_c):
        raise DimensionError(
            f"Constraint Jacobian has shape {Gt.T.shape}, expected ({cs.n_c}, {x_hat.size})"
        )

    lam = np.zeros(cs.n_c)
    x = x_hat.copy()
    r = cs.evaluate(x)
    residual = float(np.max(np.abs(r))) if r.size else 0.0
    iterations = 0
    while residual > tol:
        if iterations >= max_iter:
            raise ProjectionError(
                f"Projection did not reach tol={tol:g} in {max_iter} iterations "
                f"(residual {residual:.3e})",
                residual=residual,
                iterations=iterations,
            )
        J = cs.jacobian(x) @ Gt
        delta = solve_inner(J, r, dense_limit)

        norm0 = float(np.linalg.norm(r))
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            lam_c = lam + step * delta
            x_c = x_hat - Gt @ lam_c
            r_c = cs.evaluate(x_c)
            if np.all(np.isfinite(r_c)) and (
                np.linalg.norm(r_c) < norm0 or np.max(np.abs(r_c)) <= tol
            ):
                break
            step *= 0.5
        else:
            raise ProjectionError(
                f"Projection line search stalled at residual {residual:.3e}",
                residual=residual,
                iterations=iterations,
            )
        lam, x, r = lam_c, np.asarray(x_c).ravel(), r_c
        residual = float(np.max(np.abs(r)))
        iterations += 1

    return ProjectionResult(x=x, lam=lam, iterations=iterations, residual=residual)


def project_ensemble(
    ens: np.ndarray,
    constraints: Constraints,
    anchors: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    scheme: Optional[str] = None,
) -> np.ndarray:
    """Project every member; failures are re-raised with the member index."""
    out = np.empty_like(ens, dtype=float)
    for e in range(ens.shape[1]):
        anchor = None if anchors is None else anchors[:, e]
        try:
            result = project_to_manifold(
                ens[:, e], member_constraint(constraints, e), anchor, tol, max_iter
            )
        except ProjectionError as err:
            raise err.for_member(e, scheme) from err
        out[:, e] = result.x
    return out


def tangent_projection(cs: ConstraintSystem, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(I - G^T (G G^T)^{-1} G)(x) v``: the component of ``v`` tangent to the manifold."""
    G = cs.jacobian(x)
    w = solve_inner(G @ G.T, np.asarray(G @ v).ravel())
    return v - np.asarray(G.T @ w).ravel()


def pseudo_inverse_apply(cs: ConstraintSystem, x: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``G^T (G G^T)^{-1} r`` with ``G`` evaluated at ``x``."""
    G = cs.jacobian(x)
    w = solve_inner(G @ G.T, r)
    return np.asarray(G.T @ w).ravel()


def max_violation(constraints: Constraints, ens: np.ndarray) -> np.ndarray:
    """``|g|_inf`` of every member."""
    return np.array(
        [
            float(np.max(np.abs(member_constraint(constraints, e).evaluate(ens[:, e]))))
            for e in range(ens.shape[1])
        ]
    )


def jacobian_check(
    cs: ConstraintSystem, x: np.ndarray, h_fd: float = 1e-6, columns: Optional[np.ndarray] = None
) -> float:
    """Largest ``|G_ij - central difference| / (1 + |G_ij|)``, over ``columns`` when given."""
    x = np.asarray(x, dtype=float)
    columns = np.arange(x.size) if columns is None else np.asarray(columns, dtype=int)
    G = _to_dense(cs.jacobian(x)[:, columns])
    fd = np.empty_like(G)
    for k, j in enumerate(columns):
        step = np.zeros_like(x)
        step[j] = h_fd
        fd[:, k] = (cs.evaluate(x + step) - cs.evaluate(x - step)) / (2.0 * h_fd)
    return float(np.max(np.abs(G - fd) / (1.0 + np.abs(G)))) if G.size else 0.0


def augment_observations(
    obs: ObservationModel, cs: Optional[ConstraintSystem], R_g: Optional[np.ndarray]
) -> ObservationModel:
    """Append ``g(x) = 0`` as pseudo-observations with error covariance ``R_g``."""
    if cs is None or cs.n_c == 0:
        return obs
    R_g = np.atleast_2d(np.asarray(R_g, dtype=float))
    if R_g.shape != (cs.n_c, cs.n_c):
        raise DimensionError(f"R_g has shape {R_g.shape}, expected ({cs.n_c}, {cs.n_c})")
    if not np.allclose(R_g, R_g.T):
        raise ValueError("Pseudo-observation covariance R_g must be symmetric")
    try:
        sla.cholesky(R_g, lower=True)
    except sla.LinAlgError as e:
        raise ValueError("Pseudo-observation covariance R_g must be positive definite") from e

    def operator(x: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(obs.apply(x)).ravel(), cs.evaluate(x)])

    def linearization(x: np.ndarray) -> np.ndarray:
        return np.vstack([_to_dense(obs.jacobian(x)), _to_dense(cs.jacobian(x))])

    coords = None
    if obs.coords is not None:
        pseudo = np.full((cs.n_c, obs.coords.shape[1]), np.nan)
        coords = np.vstack([obs.coords, pseudo])

    return ObservationModel(
        operator=operator,
        y=np.concatenate([obs.y, np.zeros(cs.n_c)]),
        R=sla.block_diag(obs.R, R_g),
        linearization=linearization,
        coords=coords,
    )


def stack_groups(sizes: List[int], names: List[str]) -> Dict[str, slice]:
    """Contiguous index ranges for named constraint groups."""
    groups: Dict[str, slice] = {}
    start = 0
    for name, size in zip(names, sizes):
        groups[name] = slice(start, start + size)
        start += size
    return groups
