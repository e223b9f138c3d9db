"""
Diagnostic horizontal velocity and surface pressure from temperature and wind stress.

Solves, at each instant,

    grad p_s - int_{-h}^z grad theta + f v_perp + L1 v = 0,
    int_{-h}^0 div v = 0,

with ``A_nu v_z = mu`` on the surface, ``v_z = 0`` on the bottom, no normal
flow and no tangential shear on the side walls.

The depth-integrated divergence is discretized as the negative adjoint of the
pressure gradient (centered differences, rows on walls dropped), so the saddle
system is consistent.  Its pressure kernel is the constants plus the
collocated-grid checkerboard modes; all of them are gauge-fixed to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import (Grid, HVectorField, ScalarField, SurfaceField, derivative_matrix,
                   surface_h1_sq, trapezoid_weights)
from .operators import PhysParams, a1_stiffness, wall_masks


class VelocitySolveError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True, eq=False)
class DiagnosticSolution:
    v: HVectorField
    p_s: SurfaceField
    residual_momentum: float
    residual_constraint: float
    constants_ratio: float
    refinements: int = 0


def _interior_derivative(n, step):
    d = derivative_matrix(n, step).tolil()
    d[0, :] = 0.0
    d[n - 1, :] = 0.0
    return d.tocsr()


class DiagnosticSolver:
    """Factorized saddle-point system for one ``(grid, params)`` pair.

    Every call reuses the sparse LU factorization, so re-diagnosing the
    velocity each time step costs one forward/back substitution.
    """

    def __init__(self, grid: Grid, params: PhysParams):
        self.grid, self.params = grid, params
        N, nh, nz = grid.size, grid.surface_size, grid.nz
        m1, m2 = wall_masks(grid)
        self.idx1 = np.flatnonzero(~m1)
        self.idx2 = np.flatnonzero(~m2)
        n1, n2 = len(self.idx1), len(self.idx2)

        W = grid.weights
        Wh = grid.surface_weights
        L = sp.diags(1.0 / W) @ a1_stiffness(grid, params)
        L = L.tocsr()
        f = params.coriolis(grid)

        # 2-D pressure gradient, zero rows where the matching velocity component is fixed
        Gxh = sp.kron(_interior_derivative(grid.nx, grid.dx), sp.identity(grid.ny), format="csr")
        Gyh = sp.kron(sp.identity(grid.nx), _interior_derivative(grid.ny, grid.dy), format="csr")
        E = sp.kron(sp.identity(nh), np.ones((nz, 1)), format="csr")  # surface -> column
        Zsum = sp.kron(sp.identity(nh), trapezoid_weights(nz, grid.dz)[None, :], format="csr")

        P1 = sp.csr_matrix((np.ones(n1), (self.idx1, np.arange(n1))), shape=(N, n1))
        P2 = sp.csr_matrix((np.ones(n2), (self.idx2, np.arange(n2))), shape=(N, n2))

        A11 = P1.T @ L @ P1
        A22 = P2.T @ L @ P2
        C12 = P1.T @ sp.diags(-f) @ P2
        C21 = P2.T @ sp.diags(f) @ P1
        G1 = P1.T @ E @ Gxh
        G2 = P2.T @ E @ Gyh
        inv_wh = sp.diags(1.0 / Wh)
        D1 = -(inv_wh @ Gxh.T @ sp.diags(Wh) @ Zsum @ P1)
        D2 = -(inv_wh @ Gyh.T @ sp.diags(Wh) @ Zsum @ P2)

        null = la.null_space(sp.vstack([Gxh, Gyh]).toarray(), rcond=1e-10)
        # orthonormalize the kernel in the surface-weighted inner product
        null = null / np.sqrt(np.sum(Wh[:, None] * null ** 2, axis=0))
        r = null.shape[1]
        Nm = sp.csr_matrix(null)
        gauge = sp.csr_matrix((null * Wh[:, None]).T)

        self.kkt = sp.bmat([
            [A11, C12, G1, None],
            [C21, A22, G2, None],
            [D1, D2, None, Nm],
            [None, None, gauge, None],
        ], format="csc")
        self.n1, self.n2, self.nh, self.nnull = n1, n2, nh, r
        self.null_modes = null
        self.D = sp.hstack([D1, D2], format="csr")
        self.R1 = (grid.vertical_integral @ grid.Dx)[self.idx1].tocsr()
        self.R2 = (grid.vertical_integral @ grid.Dy)[self.idx2].tocsr()
        self.top1 = np.flatnonzero(np.isin(self.idx1, grid.top))
        self.top2 = np.flatnonzero(np.isin(self.idx2, grid.top))
        self.top1_surface = self.idx1[self.top1] // grid.nz
        self.top2_surface = self.idx2[self.top2] // grid.nz
        self.lu = spla.splu(self.kkt)
        self.size = self.kkt.shape[0]

    def rhs(self, theta, mu=None):
        """Right-hand side for flat ``theta`` (column-wise for 2-D input)."""
        batch = theta.shape[1:] if theta.ndim == 2 else ()
        b = np.zeros((self.size,) + batch)
        b[:self.n1] = self.R1 @ theta
        b[self.n1:self.n1 + self.n2] = self.R2 @ theta
        if mu is not None:
            scale = self.params.kappa / (0.5 * self.grid.dz)
            mu1, mu2 = (np.asarray(m, dtype=float).ravel() for m in mu)
            if batch:
                b[self.top1] += scale * mu1[self.top1_surface][:, None]
                b[self.n1 + self.top2] += scale * mu2[self.top2_surface][:, None]
            else:
                b[self.top1] += scale * mu1[self.top1_surface]
                b[self.n1 + self.top2] += scale * mu2[self.top2_surface]
        return b

    def unpack(self, x):
        batch = x.shape[1:]
        N = self.grid.size
        v1 = np.zeros((N,) + batch)
        v2 = np.zeros((N,) + batch)
        v1[self.idx1] = x[:self.n1]
        v2[self.idx2] = x[self.n1:self.n1 + self.n2]
        p = x[self.n1 + self.n2:self.n1 + self.n2 + self.nh]
        return v1, v2, p

    def solve_flat(self, theta, mu=None):
        """Velocity components and pressure (flat) for flat ``theta``."""
        return self.unpack(self.lu.solve(self.rhs(theta, mu)))

    def velocity_transpose(self, g1, g2):
        """Gradient w.r.t. theta of ``<g1, v1> + <g2, v2>`` (Euclidean pairing)."""
        batch = g1.shape[1:]
        y = np.zeros((self.size,) + batch)
        y[:self.n1] = g1[self.idx1]
        y[self.n1:self.n1 + self.n2] = g2[self.idx2]
        z = self.lu.solve(y, trans="T")
        return self.R1.T @ z[:self.n1] + self.R2.T @ z[self.n1:self.n1 + self.n2]

    def residuals(self, x, b):
        """Momentum residual (discrete L2) and max depth-integrated divergence."""
        nm = self.n1 + self.n2
        r = (self.kkt @ x - b)[:nm]
        w = np.concatenate([self.grid.weights[self.idx1], self.grid.weights[self.idx2]])
        mom = float(np.sqrt(np.sum(w * r * r)))
        con = float(np.max(np.abs(self.D @ x[:nm])))
        return mom, con


@lru_cache(maxsize=16)
def diagnostic_solver(grid: Grid, params: PhysParams) -> DiagnosticSolver:
    return DiagnosticSolver(grid, params)


def _mu_arrays(mu, grid):
    if mu is None:
        return None
    return tuple(m.values if isinstance(m, SurfaceField) else np.asarray(m) for m in mu)


def solve_diagnostic(theta: ScalarField, mu, params: PhysParams,
                     tol: float = 1e-10, max_refinements: int = 3) -> DiagnosticSolution:
    """Velocity ``v`` and zero-mean surface pressure for temperature ``theta``.

    ``mu`` is a pair of SurfaceFields (wind stress components) or None.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    grid = theta.grid
    solver = diagnostic_solver(grid, params)
    mu_arr = _mu_arrays(mu, grid)
    b = solver.rhs(theta.flat, mu_arr)
    x = solver.lu.solve(b)
    history = [solver.residuals(x, b)]
    k = 0
    while max(history[-1]) > tol and k < max_refinements:
        x = x + solver.lu.solve(b - solver.kkt @ x)
        history.append(solver.residuals(x, b))
        k += 1
    mom, con = history[-1]
    if max(mom, con) > tol:
        raise VelocitySolveError(
            f"diagnostic solve stagnated: momentum {mom:.3e}, constraint {con:.3e}", history)
    v1, v2, p = solver.unpack(x)
    v = HVectorField.from_components(grid, v1, v2)
    p_s = SurfaceField(grid, p)
    sol = DiagnosticSolution(v, p_s, mom, con, np.nan, k)
    try:
        ratio = verify_estimate(theta, mu, sol, params)
    except ValueError:
        ratio = np.nan
    return DiagnosticSolution(v, p_s, mom, con, ratio, k)


def velocity_h1_sq(v: HVectorField, params: PhysParams) -> float:
    """``A_h |grad v|^2 + A_nu |v_z|^2`` integrated over the box."""
    grid = v.grid
    W = grid.weights
    total = 0.0
    for c in (0, 1):
        u = v.values[c].ravel()
        gx, gy, gz = grid.Dx @ u, grid.Dy @ u, grid.Dz @ u
        total += params.A_h * np.sum(W * (gx ** 2 + gy ** 2)) + params.A_nu * np.sum(W * gz ** 2)
    return float(total)


def velocity_h2_sq(v: HVectorField, params: PhysParams) -> float:
    """H1 part plus all second differences."""
    grid = v.grid
    W = grid.weights
    total = velocity_h1_sq(v, params)
    ops = (grid.Dx, grid.Dy, grid.Dz)
    for c in (0, 1):
        u = v.values[c].ravel()
        for a in range(3):
            da = ops[a] @ u
            for b in range(a, 3):
                total += np.sum(W * (ops[b] @ da) ** 2)
    return float(total)


def verify_estimate(theta: ScalarField, mu, sol: DiagnosticSolution, params: PhysParams) -> float:
    """``(|v|_H1^2 + |p_s|^2) / (|theta|^2 + |mu|_H1^2)`` for a computed solution."""
    grid = theta.grid
    num = velocity_h1_sq(sol.v, params) + float(np.sum(grid.surface_weights * sol.p_s.flat ** 2))
    den = float(np.sum(grid.weights * theta.flat ** 2))
    if mu is not None:
        for m in _mu_arrays(mu, grid):
            den += surface_h1_sq(grid, np.ravel(m))
    if den == 0.0:
        raise ValueError("quotient undefined for theta = 0 and mu = 0")
    return num / den
