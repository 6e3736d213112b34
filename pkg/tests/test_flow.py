import numpy as np
import pytest

from vfpda.exceptions import ConfigError
from vfpda.services.constraints import ConstraintSystem, max_violation, project_ensemble
from vfpda.services.ensemble import ShrunkPrecision, shrink_covariance, shrunk_precision
from vfpda.services.flow import (
    DAE_SCHEMES,
    DiagonalDiffusion,
    FactorDiffusion,
    FlowConfig,
    GaussianFlowContext,
    InverseOperatorDiffusion,
    WienerStream,
    ZeroDiffusion,
    drift_jacobian,
    drift_jacobian_fd,
    optimal_drift,
    perturbed_observations,
    rosenbrock_em_predictor,
    run_flow,
    vfp_step_em,
    vfpdae_step,
    vfpstab_drift,
    vfpstab_step,
)
from vfpda.services.observations import ObservationModel


def exact_precision(ens):
    return shrunk_precision(ens, 1.0)


def scalar_context():
    """Frozen-statistics context whose drift is ``-(1.5 + sigma^2 / 4) x``."""
    obs = ObservationModel.linear(np.eye(1), np.zeros(1), np.eye(1))
    return GaussianFlowContext(
        mean_f=np.zeros(1),
        prec_f=ShrunkPrecision(np.array([[1.0]]), 1.0),
        mean_tau=np.zeros(1),
        prec_tau=ShrunkPrecision(np.array([[2.0]]), 1.0),
        obs=obs,
    )


def test_scalar_drift_is_the_expected_linear_map():
    ctx = scalar_context()
    diff = DiagonalDiffusion(np.array([1.0]))
    x = np.array([[0.5, -2.0]])
    np.testing.assert_allclose(optimal_drift(x, ctx, diff), -1.75 * x)


def test_deterministic_flow_reaches_the_kalman_posterior_mean(linear_gaussian):
    ens, obs = linear_gaussian
    P = np.cov(ens)
    m = ens.mean(axis=1)
    H, R = obs.matrix, obs.R
    posterior = m + P @ H.T @ np.linalg.solve(H @ P @ H.T + R, obs.y - H @ m)

    cfg = FlowConfig(pseudo_step=0.01, stop_tol=1e-10, max_steps=20000)
    result = run_flow(ens, obs, None, cfg, ZeroDiffusion(4), exact_precision, variant="VFP")
    assert result.converged
    np.testing.assert_allclose(result.ensemble.mean(axis=1), posterior, atol=1e-3)


def test_euler_maruyama_strong_convergence():
    ctx = scalar_context()
    diff = DiagonalDiffusion(np.array([1.0]))
    rng = np.random.default_rng(7)
    n_paths, fine_exp, T = 400, 12, 1.0
    n_fine = 2**fine_exp
    dW = rng.standard_normal((n_fine, n_paths)) * np.sqrt(T / n_fine)

    def integrate(level: int) -> np.ndarray:
        block = n_fine // 2**level
        h = T / 2**level
        x = np.ones((1, n_paths))
        for k in range(2**level):
            increment = dW[k * block : (k + 1) * block].sum(axis=0)
            x = vfp_step_em(x, ctx, diff, h, increment[None, :] / np.sqrt(h))
        return x

    reference = integrate(fine_exp)
    levels = np.arange(3, 8)
    errors = [np.mean(np.abs(integrate(level) - reference)) for level in levels]
    slope = np.polyfit(np.log(T / 2.0**levels), np.log(errors), 1)[0]
    # Additive noise: Euler-Maruyama is strong order 1 here, order 1/2 in general.
    assert 0.4 <= slope <= 1.2


def test_rosenbrock_predictor_differs_from_euler_maruyama_at_second_order():
    ctx = scalar_context()
    diff = DiagonalDiffusion(np.array([1.0]))
    x = np.array([0.8])
    xi = np.zeros(1)
    drift = optimal_drift(x, ctx, diff)
    jf = float(drift_jacobian(ctx, diff)[0, 0] * drift[0])
    for h in (1e-2, 1e-3, 1e-4):
        em = x + h * drift
        gap = float(rosenbrock_em_predictor(x, ctx, diff, h, xi)[0] - em[0])
        assert gap == pytest.approx(h**2 * jf, rel=0.05)


def test_analytic_drift_jacobian_matches_finite_differences(linear_gaussian):
    ens, obs = linear_gaussian
    ctx = GaussianFlowContext(
        mean_f=ens.mean(axis=1),
        prec_f=shrunk_precision(ens, 0.5),
        mean_tau=ens.mean(axis=1) + 0.1,
        prec_tau=shrunk_precision(0.5 * ens, 0.5),
        obs=obs,
    )
    diff = DiagonalDiffusion(np.array([0.1, 0.2, 0.3, 0.4]))
    np.testing.assert_allclose(
        drift_jacobian(ctx, diff), drift_jacobian_fd(ens[:, 0], ctx, diff), atol=1e-6
    )


def sphere_problem(rng, n_e=12):
    cs = ConstraintSystem(1, lambda x: np.array([0.5 * (x @ x - 1.0)]), lambda x: x[None, :])
    ens = project_ensemble(np.array([0.6, 0.6, 0.5])[:, None] + 0.1 * rng.standard_normal((3, n_e)), cs)
    obs = ObservationModel.selection([0], 3, np.array([0.8]), 0.1 * np.eye(1))
    return cs, ens, obs


def test_vfpdae_stays_on_the_manifold(rng):
    cs, ens, obs = sphere_problem(rng)
    cfg = FlowConfig(pseudo_step=1e-3, stop_tol=1e-12, max_steps=40, seed=5, check_manifold=True)
    diff = DiagonalDiffusion(np.full(3, 0.02))
    result = run_flow(ens, obs, cs, cfg, diff, lambda e: shrunk_precision(e, 0.5), variant="VFPDAE")
    assert result.steps == 40
    assert not result.converged
    assert max_violation(cs, result.ensemble).max() <= 1e-10


@pytest.mark.parametrize("scheme", DAE_SCHEMES)
def test_every_dae_scheme_projects(rng, scheme):
    cs, ens, obs = sphere_problem(rng)
    ctx = GaussianFlowContext(
        mean_f=ens.mean(axis=1),
        prec_f=shrunk_precision(ens, 0.5),
        mean_tau=ens.mean(axis=1),
        prec_tau=shrunk_precision(ens, 0.5),
        obs=obs,
    )
    cfg = FlowConfig(pseudo_step=1e-3, dae_scheme=scheme)
    diff = DiagonalDiffusion(np.full(3, 0.02))
    stepped = vfpdae_step(ens, ctx, diff, cs, cfg, rng.standard_normal(ens.shape))
    assert max_violation(cs, stepped).max() <= 1e-10
    assert not np.allclose(stepped, ens)


def test_stabilization_reduces_constraint_drift(rng):
    A = np.array([[1.0, 1.0, 0.0]])
    cs = ConstraintSystem.linear(A, 1.0)
    ens = project_ensemble(rng.standard_normal((3, 20)), cs)
    obs = ObservationModel.selection([2], 3, np.array([0.3]), 0.5 * np.eye(1))
    diff = DiagonalDiffusion(np.full(3, 0.05))
    factory = lambda e: shrunk_precision(e, 0.5)  # noqa: E731

    plain = run_flow(ens, obs, cs, FlowConfig(stop_tol=1e-12, max_steps=200, seed=11), diff, factory, "VFP")
    stab_cfg = FlowConfig(stop_tol=1e-12, max_steps=200, seed=11, stabilization=100.0)
    stabilized = run_flow(ens, obs, cs, stab_cfg, diff, factory, "VFPSTAB")
    assert np.mean(max_violation(cs, stabilized.ensemble)) < np.mean(max_violation(cs, plain.ensemble))


def test_flow_is_deterministic_for_a_fixed_seed(rng):
    cs, ens, obs = sphere_problem(rng)
    cfg = FlowConfig(pseudo_step=1e-3, max_steps=10, seed=3, perturbed_obs=0.05)
    diff = DiagonalDiffusion(np.full(3, 0.02))
    factory = lambda e: shrunk_precision(e, 0.5)  # noqa: E731
    first = run_flow(ens, obs, cs, cfg, diff, factory, "VFPDAE", cycle=4)
    second = run_flow(ens, obs, cs, cfg, diff, factory, "VFPDAE", cycle=4)
    np.testing.assert_array_equal(first.ensemble, second.ensemble)
    other_cycle = run_flow(ens, obs, cs, cfg, diff, factory, "VFPDAE", cycle=5)
    assert not np.array_equal(first.ensemble, other_cycle.ensemble)


def test_perturbed_observations_are_keyed_per_member():
    obs = ObservationModel.linear(np.eye(2), np.array([1.0, 2.0]), np.eye(2))
    stream = WienerStream(seed=9, cycle=2)
    y = perturbed_observations(obs, 0.05, 4, stream)
    assert y.shape == (2, 4)
    assert np.all(np.abs(y - obs.y[:, None]) < 0.5)
    np.testing.assert_array_equal(y[:, 1:3], perturbed_observations(obs, 0.05, 4, stream)[:, 1:3])
    assert not np.allclose(y[:, 0], y[:, 1])


def test_max_steps_reports_non_convergence(linear_gaussian):
    ens, obs = linear_gaussian
    cfg = FlowConfig(pseudo_step=1e-3, stop_tol=1e-12, max_steps=2)
    result = run_flow(ens, obs, None, cfg, ZeroDiffusion(4), exact_precision, variant="VFP")
    assert result.steps == 2
    assert not result.converged


def test_flow_config_and_variant_errors(linear_gaussian):
    with pytest.raises(ConfigError, match="pseudo_step"):
        FlowConfig(pseudo_step=0.0)
    with pytest.raises(ConfigError, match="integrator"):
        FlowConfig(integrator="heun")
    ens, obs = linear_gaussian
    with pytest.raises(ConfigError):
        run_flow(ens, obs, None, FlowConfig(), ZeroDiffusion(4), exact_precision, variant="VFPSTAB")


def test_diffusion_families(rng):
    v = rng.standard_normal(4)

    diag = DiagonalDiffusion(np.array([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_allclose(diag.quadratic(v), 0.5 * np.array([1.0, 4.0, 9.0, 16.0]) * v)

    M = np.diag([2.0, 4.0, 5.0, 10.0])
    inv = InverseOperatorDiffusion(M, scale=3.0)
    np.testing.assert_allclose(inv.apply(v), 3.0 * v / np.diag(M))
    np.testing.assert_allclose(inv.quadratic(v), 4.5 * v / np.diag(M) ** 2)

    ens = rng.standard_normal((4, 8))
    factor = FactorDiffusion.forecast_sqrt(ens, 0.5, 2.0)
    cov = shrink_covariance(np.cov(ens), 0.5)
    np.testing.assert_allclose(factor.quadratic(v), 2.0 * cov @ v, atol=1e-12)


def stiff_scalar_context(members):
    """Prior and intermediate precision ``1e6``; unit observation of zero."""
    obs = ObservationModel.linear(np.eye(1), np.zeros(1), np.eye(1))
    prec = ShrunkPrecision(np.array([[1e-6]]), 1.0)
    return GaussianFlowContext(
        mean_f=np.zeros(1), prec_f=prec, mean_tau=members.mean(axis=1), prec_tau=prec, obs=obs
    )


def test_rosenbrock_step_is_implicit_in_the_stiff_prior():
    ens = np.array([[1.0, 1.2]])
    ctx = stiff_scalar_context(ens)
    h, A = 0.01, 1e6
    stepped = rosenbrock_em_predictor(ens, ctx, ZeroDiffusion(1), h, np.zeros_like(ens))

    denom = 1.0 + h * (A + 1.0)
    mean = 1.1 / denom
    anomalies = np.array([-0.1, 0.1]) * (1.0 + h * A) / denom
    np.testing.assert_allclose(stepped[0], mean + anomalies, rtol=1e-10)
    assert np.max(np.abs(stepped)) < np.max(np.abs(ens))

    explicit = vfp_step_em(ens, ctx, ZeroDiffusion(1), h, np.zeros_like(ens))
    assert np.max(np.abs(explicit)) > 1e3


def test_vfpstab_drift_hand_value():
    ctx = GaussianFlowContext(
        mean_f=np.zeros(2),
        prec_f=ShrunkPrecision(np.eye(2), 1.0),
        mean_tau=np.zeros(2),
        prec_tau=ShrunkPrecision(0.5 * np.eye(2), 1.0),
        obs=ObservationModel.linear(np.eye(2), np.array([1.0, 0.0]), np.eye(2)),
    )
    diff = DiagonalDiffusion(np.ones(2))
    cs = ConstraintSystem.linear(np.array([1.0, 1.0]), 1.0)
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(optimal_drift(x, ctx, diff), [0.0, -2.0])
    np.testing.assert_allclose(vfpstab_drift(x, ctx, diff, cs, 30.0), [-30.0, -32.0])


def test_vfpstab_contracts_a_linear_constraint_monotonically(rng):
    A = np.array([[1.0, 1.0, 0.0]])
    cs = ConstraintSystem.linear(A, 0.0)
    prec = ShrunkPrecision(np.eye(3), 1.0)
    obs = ObservationModel.selection([2], 3, np.array([0.3]), 0.5 * np.eye(1))
    ctx = GaussianFlowContext(mean_f=np.zeros(3), prec_f=prec, mean_tau=np.zeros(3), prec_tau=prec, obs=obs)
    cfg = FlowConfig(pseudo_step=0.01, stabilization=30.0)
    ens = rng.standard_normal((3, 4))

    violations = [np.abs(A @ ens)[0]]
    for _ in range(20):
        ens = vfpstab_step(ens, ctx, ZeroDiffusion(3), cs, cfg, np.zeros_like(ens))
        violations.append(np.abs(A @ ens)[0])
    violations = np.array(violations)
    assert np.all(np.diff(violations, axis=0) < 0)
    np.testing.assert_allclose(violations[-1], 0.7**20 * violations[0], rtol=1e-8)


def test_projected_flow_on_the_circle_follows_the_exact_solution():
    # F(x) = y - x with y = (0, 2): on the unit circle the angle obeys theta' = 2 cos(theta).
    circle = ConstraintSystem(
        n_c=1,
        eval_fn=lambda x: np.array([0.5 * (x @ x - 1.0)]),
        jacobian_fn=lambda x: x[None, :],
    )
    prec = ShrunkPrecision(np.eye(2), 1.0)
    obs = ObservationModel.linear(np.eye(2), np.array([0.0, 2.0]), np.eye(2))
    ctx = GaussianFlowContext(mean_f=np.zeros(2), prec_f=prec, mean_tau=np.zeros(2), prec_tau=prec, obs=obs)
    theta0 = np.array([0.0, -0.5])
    ens = np.vstack([np.cos(theta0), np.sin(theta0)])
    cfg = FlowConfig(pseudo_step=1e-3)

    for _ in range(1000):
        ens = vfpdae_step(ens, ctx, ZeroDiffusion(2), circle, cfg, np.zeros_like(ens))
        assert max_violation(circle, ens).max() <= 1e-10

    exact = np.arcsin(np.tanh(2.0 + np.arctanh(np.sin(theta0))))
    np.testing.assert_allclose(np.arctan2(ens[1], ens[0]), exact, atol=1e-2)
