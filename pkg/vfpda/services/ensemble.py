"""Ensemble containers, sample statistics and covariance regularization.

An ensemble is an ``n_s x n_e`` array whose columns are the members. All
functions here are pure: inputs are never modified in place.
"""
import logging
from abc import ABC, abstractmethod
from functools import cached_property
from typing import Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from ..exceptions import DegenerateEnsembleError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sps.spmatrix]


def as_ensemble(ens: np.ndarray, min_members: int = 1) -> np.ndarray:
    """Check shape and finiteness of an ensemble and return it as a float array."""
    ens = np.asarray(ens, dtype=float)
    if ens.ndim != 2:
        raise DimensionError(f"Ensemble must be a 2-D (n_s x n_e) array, got shape {ens.shape}")
    if ens.shape[1] < min_members:
        raise DegenerateEnsembleError(
            f"Ensemble needs at least {min_members} member(s), got {ens.shape[1]}"
        )
    if not np.all(np.isfinite(ens)):
        raise DimensionError("Ensemble contains non-finite entries")
    return ens


def ensemble_mean(ens: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the members."""
    ens = as_ensemble(ens, min_members=1)
    return ens.mean(axis=1)


def ensemble_anomalies(ens: np.ndarray) -> np.ndarray:
    """Members minus the ensemble mean; every row sums to zero."""
    ens = as_ensemble(ens, min_members=2)
    return ens - ens.mean(axis=1, keepdims=True)


def empirical_covariance(ens: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance ``A A^T / (n_e - 1)``."""
    anomalies = ensemble_anomalies(ens)
    cov = anomalies @ anomalies.T / (anomalies.shape[1] - 1)
    return 0.5 * (cov + cov.T)


def component_variances(ens: np.ndarray) -> np.ndarray:
    """Per-component sample variance with the ``n_e - 1`` divisor."""
    anomalies = ensemble_anomalies(ens)
    return np.einsum("ij,ij->i", anomalies, anomalies) / (anomalies.shape[1] - 1)


def shrink_covariance(cov: np.ndarray, gamma_sh: float) -> np.ndarray:
    """Static shrinkage towards the identity: ``gamma_sh P + (1 - gamma_sh) I``."""
    if not 0.0 <= gamma_sh <= 1.0:
        raise ValueError(f"Shrinkage weight must lie in [0, 1], got {gamma_sh}")
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"Covariance must be square, got shape {cov.shape}")
    return gamma_sh * cov + (1.0 - gamma_sh) * np.eye(cov.shape[0])


class PrecisionOperator(ABC):
    """Regularized inverse covariance, applied without forming the inverse."""

    kind: str

    @property
    @abstractmethod
    def size(self) -> int:
        """State dimension the operator acts on."""

    @abstractmethod
    def _apply(self, v: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def _forward(self, v: np.ndarray) -> np.ndarray:
        ...

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.size:
            raise DimensionError(
                f"{self.kind} precision acts on vectors of length {self.size}, got {v.shape[0]}"
            )
        return v

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``P^{-1} v`` for a vector or for every column of a matrix."""
        return self._apply(self._check(v))

    def forward(self, v: np.ndarray) -> np.ndarray:
        """``P v``, the covariance this precision regularizes."""
        return self._forward(self._check(v))

    def dense(self) -> np.ndarray:
        """Materialized precision matrix; only meant for small problems and tests."""
        return self.apply(np.eye(self.size))


class ShrunkPrecision(PrecisionOperator):
    """Inverse of ``gamma P + (1 - gamma) I`` held as a Cholesky factorization."""

    kind = "shrunk-dense-inverse"

    def __init__(self, cov: np.ndarray, gamma_sh: float):
        self.gamma_sh = float(gamma_sh)
        self.covariance = shrink_covariance(cov, gamma_sh)
        try:
            self._factor = sla.cho_factor(self.covariance, lower=True)
        except sla.LinAlgError as e:
            raise NumericalError(
                f"Shrunk covariance is not positive definite (gamma_sh={gamma_sh})",
                {"gamma_sh": self.gamma_sh, "min_diag": float(np.min(np.diag(self.covariance)))},
            ) from e

    @property
    def size(self) -> int:
        return self.covariance.shape[0]

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._factor, v)

    def _forward(self, v: np.ndarray) -> np.ndarray:
        return self.covariance @ v


class LaplacianPrecision(PrecisionOperator):
    """Scaled squared Laplacian-like precision ``s L^2``; ``L^2`` is never formed."""

    kind = "scaled-squared-laplacian"

    def __init__(self, lap: Matrix, scale: float):
        if scale <= 0 or not np.isfinite(scale):
            raise ValueError(f"Precision scale must be positive and finite, got {scale}")
        lap = sps.csr_matrix(lap, dtype=float)
        if lap.shape[0] != lap.shape[1]:
            raise DimensionError(f"Laplacian-like operator must be square, got {lap.shape}")
        self.lap = lap
        self.scale = float(scale)

    @property
    def size(self) -> int:
        return self.lap.shape[0]

    @cached_property
    def _lu(self):
        return spla.splu(sps.csc_matrix(self.lap))

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return self.scale * (self.lap @ (self.lap @ v))

    def _forward(self, v: np.ndarray) -> np.ndarray:
        return self._lu.solve(self._lu.solve(v)) / self.scale


def shrunk_precision(ens: np.ndarray, gamma_sh: float) -> ShrunkPrecision:
    """Shrinkage-regularized precision built once from an ensemble."""
    return ShrunkPrecision(empirical_covariance(ens), gamma_sh)


def laplacian_precision(lap: Matrix, ens: np.ndarray) -> LaplacianPrecision:
    """Precision ``L^2 / max_i Var_i(ens)`` from a Laplacian-like operator and an ensemble."""
    lap = sps.csr_matrix(lap, dtype=float)
    ens = as_ensemble(ens, min_members=2)
    if lap.shape != (ens.shape[0], ens.shape[0]):
        raise DimensionError(
            f"Laplacian-like operator {lap.shape} does not match state dimension {ens.shape[0]}"
        )
    max_variance = float(component_variances(ens).max())
    if max_variance <= 0.0:
        raise DegenerateEnsembleError("Ensemble has zero spread; cannot scale the precision")
    return LaplacianPrecision(lap, 1.0 / max_variance)


def apply_precision(prec: PrecisionOperator, v: np.ndarray) -> np.ndarray:
    """``P^{-1} v`` under the operator's kind."""
    return prec.apply(v)
