import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import grid_dims, seeds
from pgld.grid import ScalarField, SurfaceField, build_grid
from pgld.operators import PhysParams
from pgld.velocity import diagnostic_solver, solve_diagnostic

PARAMS = PhysParams(f0=1.0, beta_cor=0.5, A_h=0.7)


@given(grid_dims, seeds)
def test_residuals_are_at_roundoff(dims, seed):
    rng = np.random.default_rng(seed)
    g = build_grid(*dims, 1.3, 0.8, 1.0)
    th = ScalarField(g, rng.normal(size=g.shape))
    mu = tuple(SurfaceField(g, rng.normal(size=(g.nx, g.ny))) for _ in range(2))
    sol = solve_diagnostic(th, mu, PARAMS)
    assert sol.residual_momentum <= 1e-9 and sol.residual_constraint <= 1e-9
    # zero-mean surface pressure and walls closed to normal flow
    assert abs(g.surface_weights @ sol.p_s.flat) <= 1e-9
    np.testing.assert_allclose(sol.v.v1[[0, -1]], 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.v.v2[:, [0, -1]], 0.0, atol=1e-12)


def test_horizontally_uniform_temperature_drives_no_flow():
    g = build_grid(5, 5, 4, 1, 1, 1)
    _, _, Z = g.mesh()
    sol = solve_diagnostic(ScalarField(g, np.cos(Z)), None, PARAMS)
    np.testing.assert_allclose(sol.v.values, 0.0, atol=1e-10)


@given(seeds)
def test_velocity_is_linear_in_temperature(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(5, 4, 3, 1, 1, 1)
    s = diagnostic_solver(g, PARAMS)
    a, b = rng.normal(size=(2, g.size))
    va = s.solve_flat(a)[0]
    vb = s.solve_flat(b)[0]
    np.testing.assert_allclose(s.solve_flat(2 * a - 3 * b)[0], 2 * va - 3 * vb, atol=1e-10)


@given(seeds)
def test_transpose_satisfies_the_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(4, 5, 4, 1, 1, 1)
    s = diagnostic_solver(g, PARAMS)
    th, g1, g2 = rng.normal(size=(3, g.size))
    v1, v2, _ = s.solve_flat(th)
    assert g1 @ v1 + g2 @ v2 == pytest.approx(th @ s.velocity_transpose(g1, g2), rel=1e-9, abs=1e-11)


def test_batched_solve_matches_single_columns():
    rng = np.random.default_rng(0)
    g = build_grid(4, 4, 3, 1, 1, 1)
    s = diagnostic_solver(g, PARAMS)
    T = rng.normal(size=(g.size, 3))
    v1, _, _ = s.solve_flat(T)
    for k in range(3):
        np.testing.assert_allclose(v1[:, k], s.solve_flat(T[:, k])[0], atol=1e-12)
