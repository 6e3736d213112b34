import numpy as np
import pytest

from vfpda.dynamics import PendulumModel
from vfpda.exceptions import ConfigError, DimensionError
from vfpda.services.constraints import ConstraintSystem
from vfpda.services.metrics import MetricAccumulator, constraint_values, crmse, resolve_scaling, rmse


def _loop_rmse(analyses, truths, spinup, k):
    total = 0.0
    cycles, n_s, n_e = analyses.shape
    for i in range(spinup, k + 1):
        for e in range(n_e):
            for j in range(n_s):
                total += (analyses[i, j, e] - truths[i, j]) ** 2
    return np.sqrt(total / ((k - spinup + 1) * n_e * n_s))


def test_perfect_analyses_have_zero_error(rng):
    truths = rng.standard_normal((5, 3))
    analyses = np.repeat(truths[:, :, None], 4, axis=2)
    assert rmse(analyses, truths, 0, 4) == 0.0


def test_unit_error_gives_unit_rmse():
    analyses = np.ones((1, 7, 1))
    truths = np.zeros((1, 7))
    assert rmse(analyses, truths, 0, 0) == pytest.approx(1.0)


def test_rmse_matches_explicit_sum(rng):
    analyses = rng.standard_normal((6, 4, 3))
    truths = rng.standard_normal((6, 4))
    for k in range(2, 6):
        assert rmse(analyses, truths, 2, k) == pytest.approx(_loop_rmse(analyses, truths, 2, k), abs=1e-12)


def test_crmse_scales_each_constraint(rng):
    g = rng.standard_normal((4, 2, 3))
    scaling = np.array([2.0, 0.0])
    expected = np.sqrt(np.sum((2.0 * g[1:, 0, :]) ** 2) / (3 * 3 * 2))
    assert crmse(g, scaling, 1, 3) == pytest.approx(expected)


def test_window_is_checked(rng):
    analyses = rng.standard_normal((4, 2, 2))
    truths = rng.standard_normal((4, 2))
    with pytest.raises(ValueError):
        rmse(analyses, truths, 2, 1)
    with pytest.raises(ValueError):
        rmse(analyses, truths, 0, 4)
    with pytest.raises(DimensionError):
        rmse(analyses, truths[:, :1], 0, 3)
    with pytest.raises(DimensionError):
        crmse(np.zeros((4, 2, 2)), np.ones(3), 0, 3)


def test_accumulator_matches_direct_computation(rng):
    cycles, n_s, n_c, n_e, spinup = 7, 3, 2, 4, 2
    analyses = rng.standard_normal((cycles, n_s, n_e))
    truths = rng.standard_normal((cycles, n_s))
    g = rng.standard_normal((cycles, n_c, n_e))
    scaling = np.array([1.0, 0.5])
    acc = MetricAccumulator(n_s, n_c, n_e, spinup, {"default": scaling})
    for i in range(cycles):
        acc.add(analyses[i], truths[i], g[i])
        current = acc.current()
        if i < spinup:
            assert current == {"rmse": None, "default": None}
        else:
            assert current["rmse"] == pytest.approx(rmse(analyses, truths, spinup, i), rel=1e-12)
            assert current["default"] == pytest.approx(crmse(g, scaling, spinup, i), rel=1e-12)
    assert acc.n_cycles == cycles
    assert acc.rmse(4) == pytest.approx(rmse(analyses, truths, spinup, 4), rel=1e-12)


def test_accumulator_rejects_mismatched_scaling():
    with pytest.raises(DimensionError):
        MetricAccumulator(3, 2, 4, 0, {"default": np.ones(3)})


def test_constraint_values_per_member():
    cs = ConstraintSystem.linear(np.array([1.0, 1.0]), 1.0)
    ens = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(constraint_values(cs, ens), [[0.0, 2.0, -1.0]])
    per_member = [ConstraintSystem.linear(np.array([1.0, 0.0]), float(e)) for e in range(3)]
    np.testing.assert_allclose(constraint_values(per_member, ens), [[1.0, 1.0, -2.0]])


def test_resolve_scaling():
    model = PendulumModel()
    np.testing.assert_allclose(resolve_scaling("default", model), model.default_crmse_scaling())
    np.testing.assert_allclose(resolve_scaling("identity", model), np.ones(5))
    np.testing.assert_allclose(resolve_scaling({"rods": 1.0}, model), [1, 1, 0, 0, 0])
    np.testing.assert_allclose(resolve_scaling([1, 2, 3, 4, 5], model), [1, 2, 3, 4, 5])
    with pytest.raises(ConfigError) as excinfo:
        resolve_scaling([1.0, 2.0], model, "short")
    assert excinfo.value.path == "metrics.crmse.short"
    with pytest.raises(ConfigError):
        resolve_scaling("unit", model)


def test_accumulator_keeps_running_totals(rng):
    n_s, n_c, n_e, spinup = 2, 1, 3, 1
    acc = MetricAccumulator(n_s, n_c, n_e, spinup, {"default": np.ones(1)})
    errors = []
    for _ in range(4):
        analysis = rng.standard_normal((n_s, n_e))
        acc.add(analysis, np.zeros(n_s), np.ones((n_c, n_e)))
        errors.append(float(np.sum(analysis**2)))
    assert acc.state_cum[0] == 0.0
    assert acc.state_cum[-1] == pytest.approx(sum(errors[spinup:]), rel=1e-12)
    assert acc.constraint_cum["default"] == [0.0, 3.0, 6.0, 9.0]
    assert acc.crmse("default") == pytest.approx(1.0)
