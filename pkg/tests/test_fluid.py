import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlasov_stokes import Grid, InitialData, sample_ensemble
from vlasov_stokes.diagnostics import fluid_identity_residual
from vlasov_stokes.fluid import (BrinkmanConvergenceError, ParticleDrag, brinkman_residual,
                                 fluid_energy_terms,
                                 intermediate_velocity, oseen_tensor, oseen_velocity,
                                 solve_brinkman, solve_limit_fluid, solve_stokes)
from vlasov_stokes.grid import (deposit_current, deposit_density, mean_velocity, relative_divergence)

K = 2 * math.pi / 8.0


@pytest.fixture(scope="module")
def grid():
    return Grid(32, 8.0)


@pytest.fixture(scope="module")
def cloud(grid):
    ens = sample_ensemble(InitialData(radius_v=0.2), 30000, 3, 8.0)
    ens = ens.with_state(ens.positions, ens.velocities + [0.0, 0.0, -1.0])
    rho, j = deposit_density(ens, grid), deposit_current(ens, grid)
    return ens, rho, j


def test_single_mode_stokes(grid):
    X = grid.nodes()
    f = np.zeros((3,) + grid.shape)
    f[1] = np.sin(K * X[0])
    u = solve_stokes(f, grid)
    np.testing.assert_allclose(u[1], np.sin(K * X[0]) / K**2, atol=1e-10)
    assert np.abs(u[[0, 2]]).max() < 1e-12


def test_gradient_force_annihilated(grid):
    # f = grad(cos(k x1) sin(2k x3))
    X = grid.nodes()
    f = np.stack([-K * np.sin(K * X[0]) * np.sin(2 * K * X[2]), np.zeros(grid.shape),
                  2 * K * np.cos(K * X[0]) * np.cos(2 * K * X[2])])
    assert np.abs(solve_stokes(f, grid)).max() < 1e-12


def test_mean_force_removed(grid):
    f = np.zeros((3,) + grid.shape)
    f[2] = -1.0
    assert np.abs(solve_stokes(f, grid)).max() < 1e-14


def test_stokes_output_divergence_free(grid, cloud):
    _, rho, _ = cloud
    u = solve_limit_fluid(rho, [0, 0, -1], grid)
    assert relative_divergence(u, grid) <= 1e-10
    assert abs(u.mean(axis=(1, 2, 3))).max() < 1e-14


@settings(max_examples=10, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_stokes_linear(a, b, seed):
    g = Grid(8, 8.0)
    rng = np.random.default_rng(seed)
    f, h = rng.standard_normal((2, 3) + g.shape)
    lhs = solve_stokes(a * f + b * h, g)
    rhs = a * solve_stokes(f, g) + b * solve_stokes(h, g)
    scale = max(np.abs(lhs).max(), 1e-300)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(scale, abs(a) + abs(b))


def test_limit_fluid_zero_density(grid):
    assert np.all(solve_limit_fluid(np.zeros(grid.shape), [0, 0, -1], grid) == 0)
    assert np.all(intermediate_velocity(np.zeros(grid.shape), [0, 0, -1], grid) == 0)


def test_limit_fluid_single_mode(grid):
    X = grid.nodes()
    rho = 1.0 + 0.5 * np.sin(K * X[0])
    u = solve_limit_fluid(rho, [0, 0, -1], grid)
    # force -rho e3 varies along x1 only, so e3 is transverse and passes the projection
    np.testing.assert_allclose(u[2], -0.5 * np.sin(K * X[0]) / K**2, atol=1e-10)


def test_intermediate_equals_limit_for_same_density(grid, cloud):
    _, rho, _ = cloud
    np.testing.assert_array_equal(intermediate_velocity(rho, [0, 0, -1], grid),
                                  solve_limit_fluid(rho, [0, 0, -1], grid))


def test_brinkman_zero_density(grid):
    vbar = np.ones((3,) + grid.shape)
    u, rep = solve_brinkman(np.zeros(grid.shape), vbar, grid)
    assert np.all(u == 0)
    assert rep.iterations == 1 and rep.converged


def test_brinkman_zero_vbar(grid, cloud):
    _, rho, _ = cloud
    u, rep = solve_brinkman(rho, np.zeros((3,) + grid.shape), grid)
    assert np.all(u == 0) and rep.converged


def test_brinkman_energy_identity(grid, cloud):
    ens, rho, j = cloud
    u, rep = solve_brinkman(rho, mean_velocity(rho, j), grid, tol=1e-9)
    assert rep.converged and rep.final_residual <= 1e-9
    assert fluid_identity_residual(u, rho, j, grid) <= 1e-8
    assert relative_divergence(u, grid) <= 1e-10
    t = fluid_energy_terms(u, rho, j, grid)
    e = float(np.sum(ens.weights * np.sum(ens.velocities**2, axis=1)))
    assert t["u_dot_j"] <= t["vbar_rho_sq"] <= e
    assert brinkman_residual(u, rho, mean_velocity(rho, j), grid) <= 1e-9


def test_brinkman_warm_start_needs_fewer_iterations(grid, cloud):
    _, rho, j = cloud
    vbar = mean_velocity(rho, j)
    u, cold = solve_brinkman(rho, vbar, grid)
    _, warm = solve_brinkman(rho, vbar, grid, u0=u * (1 + 1e-6))
    assert warm.iterations < cold.iterations


def test_brinkman_nonconvergence_carries_report(grid, cloud):
    _, rho, j = cloud
    with pytest.raises(BrinkmanConvergenceError) as info:
        solve_brinkman(50.0 * rho, mean_velocity(rho, j), grid, max_iter=1)
    assert info.value.report.iterations == 1
    assert not info.value.report.converged
    assert "did not converge" in str(info.value)


def test_brinkman_rejects_negative_density(grid):
    with pytest.raises(ValueError):
        solve_brinkman(-np.ones(grid.shape), np.zeros((3,) + grid.shape), grid)


def test_unconverged_solution_detected(grid, cloud):
    """One undamped Picard sweep from zero leaves a visible identity residual."""
    _, rho, j = cloud
    u1 = solve_stokes(rho[None] * mean_velocity(rho, j), grid)
    assert fluid_identity_residual(u1, rho, j, grid) > 1e-3


def test_oseen_tensor_unit_x():
    np.testing.assert_allclose(oseen_tensor([1.0, 0.0, 0.0]),
                               np.diag([1 / (4 * math.pi), 1 / (8 * math.pi), 1 / (8 * math.pi)]),
                               atol=1e-14)
    np.testing.assert_allclose(np.diag(oseen_tensor([1, 0, 0])), [0.0795775, 0.0397887, 0.0397887],
                               atol=5e-8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_subnormal=False), min_size=3, max_size=3)
       .filter(lambda y: np.linalg.norm(y) > 1e-3))
def test_oseen_tensor_properties(y):
    y = np.array(y)
    r = np.linalg.norm(y)
    phi = oseen_tensor(y)
    np.testing.assert_allclose(phi, phi.T, rtol=0, atol=1e-15 / r)
    np.testing.assert_allclose(oseen_tensor(-y), phi, rtol=1e-14)
    np.testing.assert_allclose(oseen_tensor(2 * y), phi / 2, rtol=1e-13)
    assert np.trace(phi) == pytest.approx(1 / (2 * math.pi * r), rel=1e-13)
    np.testing.assert_allclose(phi @ (y / r), y / r / (4 * math.pi * r), rtol=1e-12, atol=1e-15 / r)
    assert np.all(np.linalg.eigvalsh(phi) > 0)


def test_oseen_singular():
    with pytest.raises(ValueError, match="singular evaluation"):
        oseen_tensor([0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="singular evaluation"):
        oseen_velocity([[1.0, 1.0, 1.0]], [[0, 0, 1.0]], [1.0, 1.0, 1.0])


def test_oseen_point_force():
    u = oseen_velocity([[0, 0, 0]], [[0, 0, 1.0]], [2.0, 0.0, 0.0])
    np.testing.assert_allclose(u, [0, 0, 1 / (16 * math.pi)], atol=1e-16)


def test_oseen_symmetric_pair_cancels_transverse():
    pts = [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]
    u = oseen_velocity(pts, [[0, 0, 1.0], [0, 0, 1.0]], [0.0, 0.0, 0.0])
    assert abs(u[0]) < 1e-17 and abs(u[1]) < 1e-17 and u[2] > 0


def test_oseen_matches_tensor_sum():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-1, 1, (20, 3))
    F = rng.standard_normal((20, 3))
    x = np.array([3.0, 0.5, -0.2])
    ref = sum(oseen_tensor(x - p) @ f for p, f in zip(pts, F))
    np.testing.assert_allclose(oseen_velocity(pts, F, x), ref, rtol=1e-13)


def test_spectral_solve_matches_oseen_at_mid_range():
    from vlasov_stokes.cli import oseen_comparison

    assert oseen_comparison(8.0, 64) <= 0.02


def test_particle_drag_cancels_comoving_current(grid, cloud):
    ens, _, _ = cloud
    rng = np.random.default_rng(9)
    u = rng.standard_normal((3,) + grid.shape)
    drag = ParticleDrag(ens.positions, ens.weights, grid)
    comoving = ens.with_state(ens.positions, drag.at_particles(u))
    np.testing.assert_allclose(drag(u), deposit_current(comoving, grid), rtol=1e-12, atol=1e-12)


def test_particle_drag_symmetric_psd(grid, cloud):
    ens, _, _ = cloud
    rng = np.random.default_rng(10)
    a, b = rng.standard_normal((2, 3) + grid.shape)
    drag = ParticleDrag(ens.positions, ens.weights, grid)
    dv = grid.cell_volume
    assert np.sum(a * drag(b)) * dv == pytest.approx(np.sum(b * drag(a)) * dv, rel=1e-12)
    assert np.sum(a * drag(a)) * dv == pytest.approx(drag.weighted_norm_sq(a), rel=1e-12)
    assert drag.weighted_norm_sq(a) > 0


def test_brinkman_particle_drag_identity(grid, cloud):
    ens, rho, j = cloud
    drag = ParticleDrag(ens.positions, ens.weights, grid)
    u, rep = solve_brinkman(rho, mean_velocity(rho, j), grid, drag=drag)
    assert rep.converged
    assert fluid_identity_residual(u, rho, j, grid, drag) <= 1e-8
    assert brinkman_residual(u, rho, mean_velocity(rho, j), grid, drag) <= 1e-9
    t = fluid_energy_terms(u, rho, j, grid, drag)
    assert t["u_dot_j"] <= t["vbar_rho_sq"] <= float(np.sum(ens.weights * np.sum(ens.velocities**2, 1)))
