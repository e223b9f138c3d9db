"""Empirical values of the grid-dependent constants in the norm, advection and velocity bounds."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .grid import Grid, HVectorField, ScalarField, compute_norms, poincare_constant_k2
from .operators import PhysParams, trilinear_b
from .velocity import solve_diagnostic, velocity_h1_sq, velocity_h2_sq


@dataclass(frozen=True)
class ConstantsReport:
    K1: float            # two-sided equivalence of the energy and H1 norms
    K2: float            # Poincare constant (closed form)
    K_trilinear: float   # bound constant of the advection form
    K_velocity: float    # diagnostic velocity quotient
    n_samples: int

    def as_dict(self):
        return asdict(self)


def smooth_field(grid: Grid, coeffs, kind="cos"):
    """Sum of separable cosines (or wall-vanishing sines) with the given coefficient table.

    ``coeffs`` has shape (a, b, c); entry ``[i, j, k]`` multiplies mode
    ``(i, j, k)``.  The same table gives the same function on any grid.
    """
    X, Y, Z = grid.mesh()
    zeta = (Z + grid.h) / grid.h
    out = np.zeros(grid.shape)
    fx = np.sin if kind == "sin_x" else np.cos
    fy = np.sin if kind == "sin_y" else np.cos
    for (i, j, k), c in np.ndenumerate(coeffs):
        if kind == "sin_x" and i == 0 or kind == "sin_y" and j == 0:
            continue
        out += c * fx(i * np.pi * X / grid.Lx) * fy(j * np.pi * Y / grid.Ly) * np.cos(k * np.pi * zeta)
    return out


def _draw(rng, shape=(3, 3, 3)):
    return rng.standard_normal(shape) / (1.0 + np.add.outer(np.add.outer(*[np.arange(s) for s in shape[:2]]),
                                                           np.arange(shape[2])))


def measure_constants(grid: Grid, params: PhysParams, n_samples: int = 200, seed: int = 0,
                      tables=None) -> ConstantsReport:
    """Empirical maxima over smooth random fields; pass ``tables`` to reuse draws across grids."""
    rng = np.random.default_rng(seed)
    if tables is None:
        tables = [tuple(_draw(rng) for _ in range(4)) for _ in range(n_samples)]
    K1 = Kb = Kv = 0.0
    W = grid.weights
    for tv1, tv2, tth, teta in tables:
        th = ScalarField(grid, smooth_field(grid, tth))
        eta = ScalarField(grid, smooth_field(grid, teta))
        v = HVectorField.from_components(grid, smooth_field(grid, tv1, "sin_x"),
                                         smooth_field(grid, tv2, "sin_y"))
        r = compute_norms(th, params)
        if r.v2 > 0:
            K1 = max(K1, r.h1 ** 2 / r.v2 ** 2, r.v2 ** 2 / r.h1 ** 2)
        re = compute_norms(eta, params)
        h1v = np.sqrt(sum(float(W @ v.values[c].ravel() ** 2) for c in (0, 1)) + velocity_h1_sq(v, params))
        h2v = np.sqrt(velocity_h2_sq(v, params) + sum(float(W @ v.values[c].ravel() ** 2) for c in (0, 1)))
        den = np.sqrt(h1v * h2v) * r.v2 * np.sqrt(re.l2 * re.v2)
        if den > 0:
            Kb = max(Kb, abs(trilinear_b(v, th, eta)) / den)
        sol = solve_diagnostic(th, None, params)
        Kv = max(Kv, sol.constants_ratio)
    return ConstantsReport(float(K1), poincare_constant_k2(params), float(Kb), float(Kv), len(tables))


def draw_tables(n_samples: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [tuple(_draw(rng) for _ in range(4)) for _ in range(n_samples)]
