"""Shared fixtures for the test suite."""
import copy
from typing import Any, Dict

import numpy as np
import pytest

from vfpda.services.constraints import ConstraintSystem
from vfpda.services.observations import ObservationModel

PENDULUM_CONFIG: Dict[str, Any] = {
    "name": "pendulum_test",
    "model": {"kind": "pendulum"},
    "filter": {"variant": "ETKF", "inflation": 1.08},
    "n_members": 6,
    "cycles": 4,
    "spinup": 1,
    "obs_interval": 0.1,
    "output": {"record_wall_time": False},
}


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture
def make_config():
    """Factory for small pendulum experiment trees; nested keys are merged."""

    def _make(**overrides) -> Dict[str, Any]:
        data = copy.deepcopy(PENDULUM_CONFIG)
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
        return data

    return _make


@pytest.fixture
def sphere():
    """``g(x) = (|x|^2 - 1) / 2`` in three dimensions."""
    return ConstraintSystem(
        n_c=1,
        eval_fn=lambda x: np.array([0.5 * (x @ x - 1.0)]),
        jacobian_fn=lambda x: x[None, :],
    )


@pytest.fixture
def linear_gaussian(rng):
    """Four-component ensemble observed in its first two components."""
    ens = rng.standard_normal((4, 25)) + np.array([1.0, -1.0, 0.5, 2.0])[:, None]
    H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    obs = ObservationModel.linear(H, np.array([1.5, -0.5]), 0.5 * np.eye(2))
    return ens, obs
