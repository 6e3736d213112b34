"""Spatio-temporal RMSE and constraint RMSE accumulated from a spinup cycle on."""
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..exceptions import ConfigError, DimensionError
from .constraints import Constraints, member_constraint

logger = logging.getLogger(__name__)


def constraint_values(constraints: Constraints, ens: np.ndarray) -> np.ndarray:
    """``g`` of every member as an ``n_c x n_e`` array."""
    return np.column_stack(
        [member_constraint(constraints, e).evaluate(ens[:, e]) for e in range(ens.shape[1])]
    )


def _check_window(k: int, spinup: int, n_cycles: int) -> None:
    if k < spinup:
        raise ValueError(f"Metrics start at the spinup cycle {spinup}; got k={k}")
    if k >= n_cycles:
        raise ValueError(f"Cycle {k} is beyond the {n_cycles} recorded cycles")


def rmse(analyses: np.ndarray, truths: np.ndarray, spinup: int, k: int) -> float:
    """``sqrt(sum_{i=rho..k} sum_e |x_a,i^e - x_true,i|^2 / ((k - rho + 1) n_e n_s))``.

    Args:
        analyses: ``(cycles, n_s, n_e)`` analysis ensembles.
        truths: ``(cycles, n_s)`` true states.
        spinup: first cycle that counts.
        k: last cycle that counts.
    """
    analyses = np.asarray(analyses, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if analyses.ndim != 3 or truths.shape != analyses.shape[:2]:
        raise DimensionError(f"analyses {analyses.shape} and truths {truths.shape} do not match")
    _check_window(k, spinup, analyses.shape[0])
    _, n_s, n_e = analyses.shape
    err = analyses[spinup : k + 1] - truths[spinup : k + 1, :, None]
    return float(np.sqrt(np.sum(err**2) / ((k - spinup + 1) * n_e * n_s)))


def crmse(g_values: np.ndarray, scaling: np.ndarray, spinup: int, k: int) -> float:
    """``sqrt(sum_{i=rho..k} sum_e |E g(x_a,i^e)|^2 / ((k - rho + 1) n_e n_c))`` for diagonal ``E``.

    Args:
        g_values: ``(cycles, n_c, n_e)`` constraint values of the analysis members.
        scaling: diagonal of ``E`` (length ``n_c``).
    """
    g_values = np.asarray(g_values, dtype=float)
    scaling = np.asarray(scaling, dtype=float)
    if g_values.ndim != 3 or scaling.shape != (g_values.shape[1],):
        raise DimensionError(
            f"Scaling of length {scaling.size} does not match {g_values.shape[1]} constraints"
        )
    _check_window(k, spinup, g_values.shape[0])
    _, n_c, n_e = g_values.shape
    scaled = scaling[None, :, None] * g_values[spinup : k + 1]
    return float(np.sqrt(np.sum(scaled**2) / ((k - spinup + 1) * n_e * n_c)))


ScalingSpec = Union[str, Sequence[float], Dict[str, float]]


def resolve_scaling(spec: ScalingSpec, model, name: str = "default") -> np.ndarray:
    """Diagonal of ``E`` from a config entry and the model's constraint layout."""
    path = f"metrics.crmse.{name}"
    if isinstance(spec, str):
        if spec == "default":
            return np.asarray(model.default_crmse_scaling(), dtype=float)
        if spec == "identity":
            return np.ones(model.n_c)
        raise ConfigError(f"unknown scaling {spec!r}", path)
    if isinstance(spec, dict):
        return model.group_scaling(spec)
    diag = np.asarray(spec, dtype=float)
    if diag.shape != (model.n_c,):
        raise ConfigError(f"diagonal has length {diag.size}, model has {model.n_c} constraints", path)
    return diag


class MetricAccumulator:
    """Running squared sums past spinup, so cumulative metrics cost O(1) per cycle.

    ``state_cum[k]`` holds the squared state error summed over cycles
    ``spinup..k`` (zero inside spinup); ``constraint_cum`` does the same per
    named scaling.
    """

    def __init__(self, n_s: int, n_c: int, n_e: int, spinup: int, scalings: Dict[str, np.ndarray]):
        self.n_s = n_s
        self.n_c = n_c
        self.n_e = n_e
        self.spinup = spinup
        self.scalings = {name: np.asarray(s, dtype=float) for name, s in scalings.items()}
        for name, s in self.scalings.items():
            if s.shape != (n_c,):
                raise DimensionError(f"Scaling {name!r} has length {s.size}, expected {n_c}")
        self.state_cum: List[float] = []
        self.constraint_cum: Dict[str, List[float]] = {name: [] for name in self.scalings}

    @property
    def n_cycles(self) -> int:
        return len(self.state_cum)

    def _push(self, totals: List[float], value: float) -> None:
        counted = self.n_cycles >= self.spinup
        previous = totals[-1] if totals else 0.0
        totals.append(previous + value if counted else 0.0)

    def add(self, analysis: np.ndarray, truth: np.ndarray, g_values: np.ndarray) -> None:
        """Record one cycle: the analysis ensemble, the truth and ``g`` of every member."""
        err = np.asarray(analysis, dtype=float) - np.asarray(truth, dtype=float)[:, None]
        for name, s in self.scalings.items():
            self._push(self.constraint_cum[name], float(np.sum((s[:, None] * g_values) ** 2)))
        self._push(self.state_cum, float(np.sum(err**2)))

    def rmse(self, k: Optional[int] = None) -> float:
        k = self.n_cycles - 1 if k is None else k
        _check_window(k, self.spinup, self.n_cycles)
        return float(np.sqrt(self.state_cum[k] / ((k - self.spinup + 1) * self.n_e * self.n_s)))

    def crmse(self, name: str, k: Optional[int] = None) -> float:
        k = self.n_cycles - 1 if k is None else k
        _check_window(k, self.spinup, self.n_cycles)
        if self.n_c == 0:
            return 0.0
        total = self.constraint_cum[name][k]
        return float(np.sqrt(total / ((k - self.spinup + 1) * self.n_e * self.n_c)))

    def current(self) -> Dict[str, Optional[float]]:
        """Cumulative metrics at the latest cycle; None while still in spinup."""
        k = self.n_cycles - 1
        if k < self.spinup:
            return {"rmse": None, **{name: None for name in self.scalings}}
        return {"rmse": self.rmse(k), **{name: self.crmse(name, k) for name in self.scalings}}
