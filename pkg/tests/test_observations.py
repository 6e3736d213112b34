import numpy as np
import pytest

from vfpda.exceptions import DimensionError
from vfpda.services.observations import ObservationModel


def test_selection_picks_components(rng):
    obs = ObservationModel.selection([1, 3], 5, np.zeros(2), np.eye(2))
    x = rng.standard_normal(5)
    np.testing.assert_allclose(obs.apply(x), x[[1, 3]])
    ens = rng.standard_normal((5, 4))
    np.testing.assert_allclose(obs.apply(ens), ens[[1, 3]])
    assert obs.is_linear
    assert obs.n_o == 2


def test_zero_covariance_gives_exact_observations(rng):
    obs = ObservationModel.linear(np.eye(3), np.zeros(3), np.zeros((3, 3)))
    np.testing.assert_array_equal(obs.sample_noise(rng), np.zeros(3))


def test_noise_has_the_requested_covariance(rng):
    R = np.array([[2.0, 0.5], [0.5, 1.0]])
    obs = ObservationModel.linear(np.eye(2), np.zeros(2), R)
    draws = obs.sample_noise(rng, size=40000)
    np.testing.assert_allclose(np.cov(draws), R, atol=0.05)


def test_whiten_and_precision(rng):
    R = np.diag([4.0, 0.25])
    obs = ObservationModel.linear(np.eye(2), np.zeros(2), R)
    v = np.array([2.0, 1.0])
    np.testing.assert_allclose(obs.whiten(v), [1.0, 2.0])
    np.testing.assert_allclose(obs.precision_apply(v), [0.5, 4.0])


def test_covariance_shape_mismatch():
    with pytest.raises(DimensionError):
        ObservationModel.linear(np.eye(3), np.zeros(3), np.eye(2))


def test_with_data_keeps_operator():
    obs = ObservationModel.selection([0], 2, np.zeros(1), np.eye(1), coords=[0.0])
    other = obs.with_data(np.array([3.0]))
    np.testing.assert_array_equal(other.y, [3.0])
    np.testing.assert_array_equal(other.apply(np.array([7.0, 8.0])), [7.0])
    assert other.coords.shape == (1, 1)
