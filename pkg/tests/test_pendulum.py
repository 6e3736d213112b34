import numpy as np
import pytest

from vfpda.dynamics.pendulum import (
    GRAVITY,
    REFERENCE_STATE,
    PendulumModel,
    mirror,
    pendulum_constraint_values,
    pendulum_energy,
    pendulum_rhs,
    pherk2_step,
)
from vfpda.exceptions import ConfigError, ModelStepError
from vfpda.services.constraints import jacobian_check, max_violation


@pytest.fixture(scope="module")
def model():
    return PendulumModel()


def test_reference_state_lies_on_the_manifold(model):
    assert model.energy == pytest.approx(GRAVITY * (4.0 + np.sqrt(3.0)))
    g = pendulum_constraint_values(REFERENCE_STATE, model.energy)
    np.testing.assert_allclose(g, np.zeros(5), atol=1e-14)


def test_hanging_at_rest_is_an_equilibrium():
    state = np.array([0.0, -1.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0])
    acc, lam = pendulum_rhs(state)
    np.testing.assert_allclose(acc, np.zeros(4), atol=1e-12)
    np.testing.assert_allclose(lam, [2.0 * GRAVITY, GRAVITY])


def test_collapsed_rod_is_rejected():
    state = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(ModelStepError):
        pendulum_rhs(state)


def test_pherk_keeps_constraints(model):
    x = REFERENCE_STATE
    worst = 0.0
    for _ in range(500):
        x = pherk2_step(x, 0.01)
        worst = max(worst, float(max_violation(model.constraints(), x[:, None])[0]))
    assert worst <= 1e-6
    assert pendulum_energy(x) == pytest.approx(model.energy, abs=1e-9)


@pytest.mark.slow
def test_pherk_keeps_constraints_over_long_runs(model):
    x = REFERENCE_STATE
    for _ in range(10000):
        x = pherk2_step(x, 0.01)
    assert float(max_violation(model.constraints(), x[:, None])[0]) <= 1e-6


def test_pherk_is_second_order():
    T = 0.4

    def integrate(dt):
        x = REFERENCE_STATE
        for _ in range(int(round(T / dt))):
            x = pherk2_step(x, dt)
        return x

    reference = integrate(0.00125)
    errors = [np.linalg.norm(integrate(dt) - reference) for dt in (0.02, 0.01)]
    order = np.log2(errors[0] / errors[1])
    assert order == pytest.approx(2.0, abs=0.2)


def test_step_commutes_with_mirror():
    x = REFERENCE_STATE
    for _ in range(20):
        x = pherk2_step(x, 0.01)
    np.testing.assert_allclose(pherk2_step(mirror(x), 0.01), mirror(pherk2_step(x, 0.01)), atol=1e-10)


def test_step_rejects_non_positive_time_step():
    with pytest.raises(ValueError):
        pherk2_step(REFERENCE_STATE, 0.0)


def test_initial_conditions_come_from_the_trajectory(model, rng):
    truth, ens = model.initial_conditions(5, rng)
    assert truth.shape == (8,)
    assert ens.shape == (8, 5)
    samples = model.sample_trajectory(6)
    for column in np.column_stack([truth, ens]).T:
        assert np.any(np.all(np.isclose(samples, column[:, None], atol=0.0), axis=0))
    assert not np.any(np.all(ens == truth[:, None], axis=0))
    assert np.all(max_violation(model.constraints(), ens) <= 1e-9)


def test_observation_model_sees_the_full_state(model):
    obs = model.observation_model(np.arange(8.0))
    x = np.linspace(-1.0, 1.0, 8)
    np.testing.assert_allclose(obs.apply(x[:, None])[:, 0], x)
    np.testing.assert_allclose(obs.R, 0.1 * np.eye(8))


def test_scalings(model):
    np.testing.assert_allclose(model.default_crmse_scaling(), [1, 1, 1, 1, 1.0 / model.energy])
    np.testing.assert_allclose(model.group_scaling({"energy": 2.0}), [0, 0, 0, 0, 2.0])
    with pytest.raises(ConfigError):
        model.group_scaling({"momentum": 1.0})


def test_constraint_jacobian_matches_finite_differences(model, rng):
    x = REFERENCE_STATE + 0.1 * rng.standard_normal(8)
    assert jacobian_check(model.constraints(), x, model.fd_step) <= 1e-6


def test_self_checks_pass(model, rng):
    failed = [check.name for check in model.self_checks(rng) if not check.passed]
    assert failed == []
