"""
Discrete diffusion operators, vertical velocity, advection and the Gronwall audit.

The temperature operator is assembled from its bilinear form: with ``W`` the
diagonal trapezoidal mass and ``K`` the edge-based stiffness (plus the Robin
surface term), ``A2 = W^-1 K``.  This reproduces ghost-node closures of the
boundary conditions and is self-adjoint in the discrete L2 inner product.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import (Grid, HVectorField, ScalarField, SurfaceField, stiffness_matrix,
                   trapezoid_weights)


class GridMismatchError(ValueError):
    pass


class EigenSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhysParams:
    A_h: float = 1.0
    A_nu: float = 1.0
    K_h: float = 1.0
    K_nu: float = 1.0
    beta_robin: float = 1.0
    f0: float = 0.0
    beta_cor: float = 0.0
    kappa: float = 1.0
    h: float = 1.0

    def __post_init__(self):
        for name in ("A_h", "A_nu", "K_h", "K_nu", "beta_robin", "h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("f0", "beta_cor", "kappa"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def coriolis(self, grid):
        """``f = f0 + beta_cor * y`` on the flat node ordering."""
        _, Y, _ = grid.mesh()
        return (self.f0 + self.beta_cor * Y).ravel()


def _check_h(grid, params):
    if not np.isclose(grid.h, params.h, rtol=1e-12, atol=0.0):
        raise GridMismatchError(f"grid depth {grid.h} != params.h {params.h}")


def _same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError("fields live on different grids")
    return g


def normal_derivative_mismatch(sfield: SurfaceField) -> float:
    """Largest one-sided normal derivative of a surface field on the side walls."""
    g = sfield.grid
    u = sfield.values
    d = []
    for axis, step in ((0, g.dx), (1, g.dy)):
        a = np.moveaxis(u, axis, 0)
        d.append(np.abs(-1.5 * a[0] + 2.0 * a[1] - 0.5 * a[2]) / step)
        d.append(np.abs(1.5 * a[-1] - 2.0 * a[-2] + 0.5 * a[-3]) / step)
    return float(max(np.max(x) for x in d))


@dataclass(frozen=True, eq=False)
class ForcingSet:
    """Wind stress, surface reference temperature and heat source.

    ``g`` maps a time to a flat array of node values (or ``None`` for no source).
    The reference temperature must satisfy the no-flux condition on the side
    walls; the check uses one-sided differences and ``compat_tol``.  Callers
    that verified the condition on an analytic expression pass
    ``check_compat=False``.
    """
    mu_x: SurfaceField
    mu_y: SurfaceField
    theta_star: SurfaceField
    g: Optional[Callable[[float], np.ndarray]] = None
    compat_tol: float = 1e-8
    check_compat: bool = True

    def __post_init__(self):
        _same_grid(self.mu_x, self.mu_y, self.theta_star)
        if not self.check_compat:
            return
        mismatch = normal_derivative_mismatch(self.theta_star)
        if mismatch > self.compat_tol:
            raise ValueError(f"theta_star violates the side-wall no-flux condition "
                             f"(normal derivative {mismatch:.3e} > {self.compat_tol:.1e})")

    @property
    def grid(self):
        return self.theta_star.grid

    @classmethod
    def zero(cls, grid):
        z = SurfaceField.zeros(grid)
        return cls(z, z, z)

    def source(self, t):
        if self.g is None:
            return None
        return np.asarray(self.g(t), dtype=float).ravel()


@dataclass(frozen=True, eq=False)
class ModeBasis:
    grid: Grid
    eigenvalues: np.ndarray
    modes: np.ndarray  # (m, size), orthonormal in the discrete L2 inner product

    @property
    def m(self):
        return len(self.eigenvalues)

    def field(self, k):
        return ScalarField(self.grid, self.modes[k])

    def coefficients(self, flat):
        """Discrete L2 projections <theta, omega_j>; column-wise for 2-D input."""
        return self.modes @ (self.grid.weights * flat if flat.ndim == 1
                             else self.grid.weights[:, None] * flat)

    def gram(self):
        return self.modes @ (self.grid.weights[:, None] * self.modes.T)


@dataclass
class GronwallAudit:
    times: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    a: np.ndarray
    Z: np.ndarray
    passed: bool
    max_slack: float
    first_violation: Optional[int] = None
    lhs: np.ndarray = field(default=None, repr=False)
    rhs: np.ndarray = field(default=None, repr=False)


# --------------------------------------------------------------------------
# Assembled matrices (cached per grid/params pair).

@lru_cache(maxsize=32)
def a2_stiffness(grid: Grid, params: PhysParams):
    """Stiffness ``K`` of the temperature form with theta_star = 0; ``A2 = W^-1 K``."""
    _check_h(grid, params)
    mx = sp.diags(trapezoid_weights(grid.nx, grid.dx))
    my = sp.diags(trapezoid_weights(grid.ny, grid.dy))
    mz = sp.diags(trapezoid_weights(grid.nz, grid.dz))
    kx = stiffness_matrix(grid.nx, grid.dx)
    ky = stiffness_matrix(grid.ny, grid.dy)
    kz = stiffness_matrix(grid.nz, grid.dz)
    etop = sp.csr_matrix(([1.0], ([grid.nz - 1], [grid.nz - 1])), shape=(grid.nz, grid.nz))
    kron = lambda a, b, c: sp.kron(sp.kron(a, b), c, format="csr")
    K = (params.K_h * (kron(kx, my, mz) + kron(mx, ky, mz))
         + params.K_nu * kron(mx, my, kz)
         + params.beta_robin * kron(mx, my, etop))
    return K.tocsr()


@lru_cache(maxsize=32)
def a1_stiffness(grid: Grid, params: PhysParams):
    """Componentwise viscous stiffness with Neumann-type closures everywhere."""
    _check_h(grid, params)
    mx = sp.diags(trapezoid_weights(grid.nx, grid.dx))
    my = sp.diags(trapezoid_weights(grid.ny, grid.dy))
    mz = sp.diags(trapezoid_weights(grid.nz, grid.dz))
    kx = stiffness_matrix(grid.nx, grid.dx)
    ky = stiffness_matrix(grid.ny, grid.dy)
    kz = stiffness_matrix(grid.nz, grid.dz)
    kron = lambda a, b, c: sp.kron(sp.kron(a, b), c, format="csr")
    return (params.A_h * (kron(kx, my, mz) + kron(mx, ky, mz))
            + params.A_nu * kron(mx, my, kz)).tocsr()


def wall_masks(grid):
    """Boolean flat masks of nodes where v1 (x-walls) and v2 (y-walls) vanish."""
    i, j, _ = np.indices(grid.shape)
    m1 = ((i == 0) | (i == grid.nx - 1)).ravel()
    m2 = ((j == 0) | (j == grid.ny - 1)).ravel()
    return m1, m2


def surface_source(grid, params, theta_star_flat):
    """Robin forcing ``W^-1 (beta * theta_star on the surface)`` as a flat array."""
    s = np.zeros(grid.size)
    wz_top = 0.5 * grid.dz
    s[grid.top] = params.beta_robin * theta_star_flat / wz_top
    return s


# --------------------------------------------------------------------------
# Public operators.

def apply_a2(theta: ScalarField, params: PhysParams,
             theta_star: Optional[SurfaceField] = None) -> ScalarField:
    """Discrete action of ``A2``; with ``theta_star`` the Robin term uses ``theta - theta_star``."""
    grid = theta.grid
    K = a2_stiffness(grid, params)
    out = (K @ theta.flat) / grid.weights
    if theta_star is not None:
        _same_grid(theta, theta_star)
        out = out - surface_source(grid, params, theta_star.flat)
    return ScalarField(grid, out)


def apply_a1(v: HVectorField, params: PhysParams, mu=None) -> HVectorField:
    """Viscous operator ``-A_h Lap v - A_nu v_zz`` with the wind-stress top closure.

    ``mu`` is a pair of SurfaceFields (or None).  Rows of the normal velocity
    component on the side walls carry the Dirichlet condition and are returned
    as zero.
    """
    grid = v.grid
    K = a1_stiffness(grid, params)
    m1, m2 = wall_masks(grid)
    out = [(K @ v.values[c].ravel()) / grid.weights for c in (0, 1)]
    if mu is not None:
        for c in (0, 1):
            out[c][grid.top] -= params.kappa * mu[c].flat / (0.5 * grid.dz)
    out[0][m1] = 0.0
    out[1][m2] = 0.0
    return HVectorField.from_components(grid, out[0], out[1])


def vertical_velocity(grid, v1, v2):
    """``w(z) = -int_{-h}^z div v``; flat arrays, column-wise for 2-D input."""
    return -(grid.vertical_integral @ (grid.Dx @ v1 + grid.Dy @ v2))


def diagnose_w(v: HVectorField) -> ScalarField:
    grid = v.grid
    return ScalarField(grid, vertical_velocity(grid, v.v1.ravel(), v.v2.ravel()))


def transport(grid, v1, v2, w, theta):
    """``C theta = v . grad theta + w d_z theta`` (flat, column-wise)."""
    return v1 * (grid.Dx @ theta) + v2 * (grid.Dy @ theta) + w * (grid.Dz @ theta)


def transport_transpose(grid, v1, v2, w, y):
    return grid.Dx.T @ (v1 * y) + grid.Dy.T @ (v2 * y) + grid.Dz.T @ (w * y)


def skew_advection(grid, v1, v2, w, theta):
    """``B(v, theta) = (C theta - W^-1 C^T W theta) / 2``."""
    W = grid.weights if theta.ndim == 1 else grid.weights[:, None]
    return 0.5 * (transport(grid, v1, v2, w, theta)
                  - transport_transpose(grid, v1, v2, w, W * theta) / W)


def trilinear_b(v: HVectorField, theta: ScalarField, eta: ScalarField, params=None) -> float:
    """Skew-symmetrized advection form; ``b(v, theta, eta) = -b(v, eta, theta)`` exactly."""
    grid = _same_grid(v, theta, eta)
    v1, v2 = v.v1.ravel(), v.v2.ravel()
    w = vertical_velocity(grid, v1, v2)
    a1 = float(np.sum(grid.weights * transport(grid, v1, v2, w, theta.flat) * eta.flat))
    a2 = float(np.sum(grid.weights * transport(grid, v1, v2, w, eta.flat) * theta.flat))
    return 0.5 * (a1 - a2)


def advect(v: HVectorField, theta: ScalarField, params=None) -> ScalarField:
    """Field whose discrete L2 pairing with any eta equals ``trilinear_b(v, theta, eta)``."""
    grid = _same_grid(v, theta)
    v1, v2 = v.v1.ravel(), v.v2.ravel()
    w = vertical_velocity(grid, v1, v2)
    return ScalarField(grid, skew_advection(grid, v1, v2, w, theta.flat))


def eigenmodes_a2(params: PhysParams, grid: Grid, m: int, dense_limit: int = 3000) -> ModeBasis:
    """Leading ``m`` eigenpairs of the discrete ``A2`` (theta_star = 0), ascending."""
    n = grid.size
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    K = a2_stiffness(grid, params)
    s = 1.0 / np.sqrt(grid.weights)
    S = sp.diags(s) @ K @ sp.diags(s)
    if n <= dense_limit or m >= n - 1:
        lam, y = la.eigh(S.toarray(), subset_by_index=[0, m - 1])
    else:
        try:
            lam, y = spla.eigsh(S.tocsc(), k=m, sigma=0.0, which="LM", tol=1e-13)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolveError(f"eigensolver did not converge: {exc}") from exc
        order = np.argsort(lam)
        lam, y = lam[order], y[:, order]
    modes = (s[:, None] * y).T
    # fix signs so that each mode has a positive weighted sum (or first nonzero entry)
    for k in range(m):
        ref = np.sum(grid.weights * modes[k])
        if abs(ref) < 1e-10:
            ref = modes[k][np.argmax(np.abs(modes[k]) > 1e-8 * np.max(np.abs(modes[k])))]
        if ref < 0:
            modes[k] = -modes[k]
    res = (K @ modes.T) / grid.weights[:, None] - modes.T * lam[None, :]
    resnorm = np.sqrt(np.sum(grid.weights[:, None] * res ** 2, axis=0))
    if np.any(resnorm > 1e-8 * np.maximum(lam, 1.0)):
        raise EigenSolveError(f"eigen-residual too large: {resnorm.max():.3e}")
    return ModeBasis(grid, lam, modes)


def _cumtrapz(times, f):
    out = np.zeros_like(f, dtype=float)
    out[1:] = np.cumsum(0.5 * np.diff(times) * (f[1:] + f[:-1]))
    return out


def gronwall_audit(times, Y, X, a, Z, rtol: float = 1e-12,
                   x_rule: str = "trapezoid") -> GronwallAudit:
    """Check ``Y(t) + int_0^t X <= Z(t) exp(int_0^t a)`` at every sample time.

    Integrals are trapezoidal; ``x_rule="right"`` integrates ``X`` with
    right-endpoint rectangles instead, which is the quadrature an implicit
    time step actually produces.  Non-finite entries fail the audit at their
    index; negative entries or a decreasing ``Z`` are input errors.
    """
    if x_rule not in ("trapezoid", "right"):
        raise ValueError("x_rule must be 'trapezoid' or 'right'")
    times, Y, X, a, Z = (np.asarray(u, dtype=float) for u in (times, Y, X, a, Z))
    n = len(times)
    if not all(len(u) == n for u in (Y, X, a, Z)):
        raise ValueError("sequences must have equal length")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    bad = ~(np.isfinite(Y) & np.isfinite(X) & np.isfinite(a) & np.isfinite(Z))
    if np.any(bad):
        cut = int(np.argmax(bad))
        if cut > 0:
            # an earlier finite violation takes precedence
            head = gronwall_audit(times[:cut], Y[:cut], X[:cut], a[:cut], Z[:cut], rtol, x_rule)
            if not head.passed:
                return GronwallAudit(times, Y, X, a, Z, False, head.max_slack, head.first_violation)
        return GronwallAudit(times, Y, X, a, Z, False, np.inf, cut)
    for name, u in (("Y", Y), ("X", X), ("a", a), ("Z", Z)):
        if np.any(u < 0):
            raise ValueError(f"{name} has negative entries")
    if np.any(np.diff(Z) < -1e-12 * np.maximum(np.abs(Z[1:]), 1.0)):
        raise ValueError("Z must be non-decreasing")
    if x_rule == "right":
        ix = np.concatenate([[0.0], np.cumsum(np.diff(times) * X[1:])])
    else:
        ix = _cumtrapz(times, X)
    lhs = Y + ix
    rhs = Z * np.exp(_cumtrapz(times, a))
    excess = lhs - rhs
    viol = excess > rtol * np.maximum(np.abs(rhs), 1e-300)
    first = int(np.argmax(viol)) if np.any(viol) else None
    return GronwallAudit(times, Y, X, a, Z, first is None, float(np.max(excess)),
                         first, lhs, rhs)
