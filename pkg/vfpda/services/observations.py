"""Observation models: operator, data and error covariance."""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps

from ..exceptions import DimensionError, NumericalError

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sps.spmatrix]


@dataclass(frozen=True)
class ObservationModel:
    """Operator ``H``, data ``y`` and error covariance ``R`` for one analysis time.

    ``coords`` holds one location per observation for localization; rows of
    NaN mark observations without a location (they act globally).
    """

    operator: Callable[[np.ndarray], np.ndarray]
    y: np.ndarray
    R: np.ndarray
    linearization: Optional[Callable[[np.ndarray], Matrix]] = None
    matrix: Optional[Matrix] = None
    coords: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (y.size, y.size):
            raise DimensionError(f"R has shape {R.shape} but there are {y.size} observations")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "R", R)
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=float)
            if coords.ndim == 1:
                coords = coords[:, None]
            if coords.shape[0] != y.size:
                raise DimensionError(
                    f"{coords.shape[0]} observation locations for {y.size} observations"
                )
            object.__setattr__(self, "coords", coords)

    @classmethod
    def linear(
        cls, H: Matrix, y: np.ndarray, R: np.ndarray, coords: Optional[np.ndarray] = None
    ) -> "ObservationModel":
        """Observation model for a linear operator given as a (sparse) matrix."""
        if sps.issparse(H):
            H = sps.csr_matrix(H, dtype=float)
        else:
            H = np.atleast_2d(np.asarray(H, dtype=float))
        return cls(
            operator=lambda x: H @ x,
            y=y,
            R=R,
            linearization=lambda x: H,
            matrix=H,
            coords=coords,
        )

    @classmethod
    def selection(
        cls,
        indices: np.ndarray,
        n_s: int,
        y: np.ndarray,
        R: np.ndarray,
        coords: Optional[np.ndarray] = None,
    ) -> "ObservationModel":
        """Direct observation of the state components ``indices``."""
        indices = np.asarray(indices, dtype=int)
        H = sps.csr_matrix(
            (np.ones(indices.size), (np.arange(indices.size), indices)),
            shape=(indices.size, n_s),
        )
        return cls.linear(H, y, R, coords)

    def with_data(self, y: np.ndarray) -> "ObservationModel":
        """Same operator and covariance with different data."""
        return replace(self, y=y)

    @property
    def n_o(self) -> int:
        return self.y.size

    @property
    def is_linear(self) -> bool:
        return self.matrix is not None

    def apply(self, X: np.ndarray) -> np.ndarray:
        """``H(x)`` for a state vector or for every column of an ensemble."""
        X = np.asarray(X, dtype=float)
        if self.is_linear:
            out = self.matrix @ X
            return np.asarray(out)
        if X.ndim == 1:
            return np.asarray(self.operator(X), dtype=float)
        return np.column_stack([self.operator(X[:, e]) for e in range(X.shape[1])])

    def jacobian(self, x: np.ndarray) -> Matrix:
        """Linearized operator at ``x``."""
        if self.linearization is None:
            raise NumericalError("Observation operator has no linearization")
        return self.linearization(x)

    @cached_property
    def _chol(self) -> np.ndarray:
        try:
            return sla.cholesky(self.R, lower=True)
        except sla.LinAlgError as e:
            raise NumericalError(
                "Observation error covariance is not positive definite",
                {"min_diag": float(np.min(np.diag(self.R)))},
            ) from e

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """``R^{-1/2} v`` with the lower Cholesky factor of ``R``."""
        return sla.solve_triangular(self._chol, v, lower=True)

    def precision_apply(self, v: np.ndarray) -> np.ndarray:
        """``R^{-1} v``."""
        return sla.cho_solve((self._chol, True), v)

    def sample_noise(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draws from ``N(0, R)``; one column per draw when ``size`` is given."""
        n = 1 if size is None else size
        if not np.any(self.R):
            draws = np.zeros((self.n_o, n))
        else:
            draws = self._chol @ rng.standard_normal((self.n_o, n))
        return draws[:, 0] if size is None else draws
