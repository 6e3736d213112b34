"""Common interface of the constrained forward models."""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sps

from ..exceptions import ConfigError, ModelStepError
from ..services.constraints import Constraints, jacobian_check, member_constraint
from ..services.observations import ObservationModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    """One line of a model self-check report."""

    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.threshold)

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "value": self.value,
            "threshold": self.threshold,
            "passed": self.passed,
        }


class ForwardModel(ABC):
    """A forward model with its constraint manifold and twin-experiment setup.

    Subclasses fix the state layout; states are 1-D float arrays of length
    ``n_s`` and ensembles are ``n_s x n_e`` arrays.
    """

    name: str = "model"
    fd_step: float = 1e-6

    def __init__(self, time_step: float):
        if not time_step > 0:
            raise ValueError(f"Model time step must be positive, got {time_step}")
        self.time_step = float(time_step)

    @property
    @abstractmethod
    def n_s(self) -> int:
        ...

    @property
    @abstractmethod
    def n_c(self) -> int:
        ...

    @abstractmethod
    def step(self, x: np.ndarray, dt: float) -> np.ndarray:
        """One step of the structure-preserving integrator."""

    def advance(self, x: np.ndarray, duration: float) -> np.ndarray:
        """Integrate over ``duration`` with equal steps no longer than ``time_step``."""
        n_steps = max(1, int(np.ceil(duration / self.time_step - 1e-9)))
        dt = duration / n_steps
        x = np.asarray(x, dtype=float)
        for _ in range(n_steps):
            x = self.step(x, dt)
        if not np.all(np.isfinite(x)):
            raise ModelStepError(f"{self.name} state became non-finite")
        return x

    @abstractmethod
    def constraints(self, forecast: Optional[np.ndarray] = None) -> Constraints:
        """Constraint system, shared or one per forecast member."""

    @property
    @abstractmethod
    def constraint_groups(self) -> Dict[str, slice]:
        ...

    @abstractmethod
    def initial_conditions(self, n_e: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Initial truth and initial ensemble."""

    @abstractmethod
    def observation_model(self, y: Optional[np.ndarray] = None) -> ObservationModel:
        """Observation operator, covariance and locations (data ``y`` optional)."""

    @property
    def state_coords(self) -> np.ndarray:
        """Location of every state component (for localization)."""
        return np.arange(self.n_s, dtype=float)[:, None]

    @property
    def periods(self) -> Optional[np.ndarray]:
        return None

    def laplacian_like(self) -> Optional[sps.spmatrix]:
        return None

    def default_crmse_scaling(self) -> np.ndarray:
        return np.ones(self.n_c)

    def group_scaling(self, weights: Dict[str, float]) -> np.ndarray:
        """Diagonal scaling from per-group weights; unnamed groups get 0."""
        unknown = set(weights) - set(self.constraint_groups)
        if unknown:
            raise ConfigError(
                f"unknown constraint group(s) for {self.name}: {sorted(unknown)}", "metrics.crmse"
            )
        scaling = np.zeros(self.n_c)
        for group, weight in weights.items():
            scaling[self.constraint_groups[group]] = weight
        return scaling

    def self_checks(self, rng: np.random.Generator) -> List[CheckResult]:
        """Jacobian and structure checks; subclasses extend the list."""
        _, ens = self.initial_conditions(2, rng)
        cs = member_constraint(self.constraints(ens), 0)
        point = ens[:, 0] + 1e-3 * rng.standard_normal(self.n_s)
        error = jacobian_check(cs, point, self.fd_step)
        return [CheckResult("constraint jacobian vs finite differences", error, 1e-5)]

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n_s={self.n_s}, n_c={self.n_c}, time_step={self.time_step:g})"
