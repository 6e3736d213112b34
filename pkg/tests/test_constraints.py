import numpy as np
import pytest
import scipy.sparse as sps

from vfpda.exceptions import DimensionError, ProjectionError, RankDeficiencyError
from vfpda.services.constraints import (
    FORECAST_RELATIVE,
    ConstraintSystem,
    augment_observations,
    is_shared,
    jacobian_check,
    max_violation,
    member_constraint,
    project_ensemble,
    project_to_manifold,
    solve_inner,
    stack_groups,
    tangent_projection,
)
from vfpda.services.observations import ObservationModel


def closed_form_projection(A, b, x):
    return x - A.T @ np.linalg.solve(A @ A.T, A @ x - b)


def test_linear_projection_matches_closed_form(rng):
    A = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    x = rng.standard_normal(5)
    result = project_to_manifold(x, ConstraintSystem.linear(A, b))
    np.testing.assert_allclose(result.x, closed_form_projection(A, b, x), atol=1e-12)
    assert result.residual <= 1e-10


def test_linear_projection_sparse_path_agrees(rng):
    A = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    x = rng.standard_normal(6)
    cs = ConstraintSystem.linear(A, b)
    dense = project_to_manifold(x, cs, dense_limit=64).x
    sparse = project_to_manifold(x, cs, dense_limit=0).x
    np.testing.assert_allclose(sparse, dense, atol=1e-10)


def test_projection_is_idempotent(rng, sphere):
    x = 2.0 * rng.standard_normal(3)
    once = project_to_manifold(x, sphere).x
    twice = project_to_manifold(once, sphere)
    assert abs(sphere.evaluate(once)[0]) <= 1e-10
    assert twice.iterations == 0
    np.testing.assert_array_equal(twice.x, once)


def test_sphere_projection_is_radial(sphere):
    x = np.array([3.0, 0.0, 4.0])
    result = project_to_manifold(x, sphere)
    np.testing.assert_allclose(result.x, x / 5.0, atol=1e-10)


def test_projection_iteration_cap(sphere):
    with pytest.raises(ProjectionError) as info:
        project_to_manifold(np.array([2.0, 0.0, 0.0]), sphere, max_iter=1)
    assert info.value.iterations == 1
    assert info.value.residual > 1e-10


def test_redundant_consistent_constraints_are_accepted():
    cs = ConstraintSystem.linear(np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([1.0, 2.0]))
    result = project_to_manifold(np.array([3.0, 5.0]), cs)
    np.testing.assert_allclose(result.x, [1.0, 5.0], atol=1e-10)


def test_inconsistent_singular_system_raises():
    cs = ConstraintSystem.linear(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0.0, 1.0]))
    with pytest.raises(RankDeficiencyError):
        project_to_manifold(np.array([3.0, 5.0]), cs)


def test_solve_inner_minimum_norm():
    J = np.array([[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(solve_inner(J, np.array([2.0, 2.0])), [1.0, 1.0])


def test_project_ensemble_labels_failing_member(sphere):
    ens = np.column_stack([np.array([0.6, 0.8, 0.0]), np.array([5.0, 0.0, 0.0])])
    with pytest.raises(ProjectionError) as info:
        project_ensemble(ens, sphere, max_iter=1, scheme="evolve-project")
    assert info.value.member == 1
    assert info.value.scheme == "evolve-project"
    assert "member 1" in str(info.value)


def test_per_member_systems(rng):
    A = np.array([[1.0, 1.0, 0.0]])
    members = [ConstraintSystem.linear(A, float(e)) for e in range(3)]
    ens = rng.standard_normal((3, 3))
    projected = project_ensemble(ens, members)
    np.testing.assert_allclose(A @ projected, [[0.0, 1.0, 2.0]], atol=1e-12)
    assert not is_shared(members)
    assert member_constraint(members, 2) is members[2]
    np.testing.assert_allclose(max_violation(members, projected), 0.0, atol=1e-12)


def test_forecast_relative_vanishes_at_its_forecast(rng):
    x_f = rng.standard_normal(4)
    cs = ConstraintSystem.forecast_relative(
        lambda x: np.array([x @ x, x.sum()]),
        lambda x: np.vstack([2.0 * x, np.ones_like(x)]),
        x_f,
        relative=np.array([True, False]),
    )
    assert cs.kind == FORECAST_RELATIVE
    g = cs.evaluate(x_f)
    assert g[0] == pytest.approx(0.0, abs=1e-14)
    assert g[1] == pytest.approx(x_f.sum())


def test_tangent_projection_is_tangent(rng, sphere):
    x = project_to_manifold(rng.standard_normal(3), sphere).x
    v = rng.standard_normal(3)
    t = tangent_projection(sphere, x, v)
    assert abs(x @ t) < 1e-12


def test_jacobian_check(rng, sphere):
    assert jacobian_check(sphere, rng.standard_normal(3)) < 1e-8
    wrong = ConstraintSystem(1, sphere.eval_fn, lambda x: 2.0 * x[None, :])
    assert jacobian_check(wrong, np.array([1.0, 2.0, 3.0])) > 0.1


def test_augment_observations(rng, sphere):
    obs = ObservationModel.selection([0], 3, np.array([0.3]), np.eye(1), coords=[0.0])
    aug = augment_observations(obs, sphere, 1e-3 * np.eye(1))
    assert aug.n_o == 2
    x = np.array([1.0, 1.0, 0.0])
    np.testing.assert_allclose(aug.apply(x), [1.0, 0.5])
    assert np.isnan(aug.coords[1, 0])
    with pytest.raises(DimensionError):
        augment_observations(obs, sphere, np.eye(2))


def test_stack_groups():
    groups = stack_groups([2, 2, 1], ["rods", "velocities", "energy"])
    assert groups["energy"] == slice(4, 5)


def periodic_difference(n):
    return sps.csr_matrix(np.roll(np.eye(n), 1, axis=1) - np.eye(n))


def test_krylov_solve_of_singular_consistent_system(rng):
    D = periodic_difference(40)
    J = (D @ D.T).tocsr()
    r = D @ rng.standard_normal(40)
    delta = solve_inner(J, r, dense_limit=0)
    assert np.linalg.norm(J @ delta - r) <= 1e-8 * max(1.0, np.linalg.norm(r))
    dense = solve_inner(J.toarray(), r, dense_limit=64)
    np.testing.assert_allclose(D.T @ delta, D.T @ dense, atol=1e-8)


def test_krylov_solve_rejects_inconsistent_system():
    D = periodic_difference(40)
    with pytest.raises(RankDeficiencyError):
        solve_inner((D @ D.T).tocsr(), np.ones(40), dense_limit=0)


def test_krylov_solve_of_nonsymmetric_system(rng):
    J = sps.csr_matrix(np.eye(30) * 4.0 + np.triu(rng.uniform(0.0, 0.1, (30, 30)), 1))
    r = rng.standard_normal(30)
    delta = solve_inner(J, r, dense_limit=0)
    np.testing.assert_allclose(delta, np.linalg.solve(J.toarray(), r), atol=1e-9)


def test_divergence_and_energy_projection_sparse_path_agrees(rng):
    n = 8
    Dx = sps.kron(periodic_difference(n), sps.identity(n))
    Dy = sps.kron(sps.identity(n), periodic_difference(n))
    div = sps.hstack([Dx, Dy]).tocsr()
    energy_ref = 1.0

    def g(x):
        return np.concatenate([div @ x, [0.5 * x @ x - energy_ref]])

    def G(x):
        return sps.vstack([div, sps.csr_matrix(x[None, :])]).tocsr()

    cs = ConstraintSystem(n_c=n * n + 1, eval_fn=g, jacobian_fn=G)
    x = rng.standard_normal(2 * n * n)
    dense = project_to_manifold(x, cs, dense_limit=1000)
    sparse = project_to_manifold(x, cs, dense_limit=0)
    assert sparse.residual <= 1e-10
    np.testing.assert_allclose(sparse.x, dense.x, atol=1e-8)
