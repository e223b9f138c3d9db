"""Small builders shared by the unit tests."""
import numpy as np
from hypothesis import strategies as st

from pgld.grid import build_grid
from pgld.noise import NoiseModel
from pgld.operators import ForcingSet, PhysParams, eigenmodes_a2
from pgld.stepper import Problem


def small_problem(nx=4, ny=4, nz=3, T=0.1, dt=0.01, kind="diagonal_lipschitz", m=2,
                  advection=True, params=None, **kw):
    params = params or PhysParams(f0=1.0, beta_cor=0.5)
    grid = build_grid(nx, ny, nz, 1.0, 1.0, params.h)
    noise = NoiseModel(eigenmodes_a2(params, grid, m), np.linspace(1.0, 0.5, m), kind,
                       np.full(m, 2.0), offset=0.5)
    X, Y, Z = grid.mesh()
    theta0 = (np.cos(np.pi * X) * np.cos(np.pi * Z) + Y).ravel()
    return Problem(grid, params, ForcingSet.zero(grid), noise, theta0, T, dt,
                   advection=advection, **kw)


grid_dims = st.tuples(st.integers(3, 7), st.integers(3, 7), st.integers(3, 6))
extents = st.tuples(*[st.floats(0.3, 3.0)] * 3)
seeds = st.integers(0, 2 ** 32 - 1)
