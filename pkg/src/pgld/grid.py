"""
Box ocean grid, field containers and discrete norms.

The ocean occupies ``[0, Lx] x [0, Ly] x (-h, 0)``.  Unknowns live on the
nodes of a tensor-product grid; arrays are indexed ``[i, j, k]`` with ``k = 0``
the bottom and ``k = nz - 1`` the surface.  Integrals use tensor-product
trapezoidal weights, gradients use centered differences in the interior and
one-sided second-order differences on the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class GridError(ValueError):
    pass


class FieldError(ValueError):
    pass


def trapezoid_weights(n, step):
    w = np.full(n, step)
    w[0] = w[-1] = 0.5 * step
    return w


def derivative_matrix(n, step):
    """First derivative on ``n`` nodes, second order everywhere."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5, 0.5]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-1.5, 2.0, -0.5, 1.5, -2.0, 0.5]
    return sp.csr_matrix((np.array(vals) / step, (rows, cols)), shape=(n, n))


def stiffness_matrix(n, step):
    # edge-based form sum_e (u_{e+1} - u_e)^2 / step
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / step


def cumulative_trapezoid_matrix(n, step):
    """Lower-triangular map u -> int_{z_0}^{z_k} u."""
    m = np.zeros((n, n))
    for k in range(1, n):
        m[k, : k + 1] = step
        m[k, 0] = m[k, k] = 0.5 * step
    return sp.csr_matrix(m)


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    nz: int
    Lx: float
    Ly: float
    h: float

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if int(n) != n or n < 3:
                raise GridError(f"{name} must be an integer >= 3, got {n}")
        for name in ("Lx", "Ly", "h"):
            L = getattr(self, name)
            if not np.isfinite(L) or L <= 0:
                raise GridError(f"{name} must be positive, got {L}")

    @property
    def dx(self):
        return self.Lx / (self.nx - 1)

    @property
    def dy(self):
        return self.Ly / (self.ny - 1)

    @property
    def dz(self):
        return self.h / (self.nz - 1)

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def size(self):
        return self.nx * self.ny * self.nz

    @property
    def surface_size(self):
        return self.nx * self.ny

    @property
    def x(self):
        return np.linspace(0.0, self.Lx, self.nx)

    @property
    def y(self):
        return np.linspace(0.0, self.Ly, self.ny)

    @property
    def z(self):
        return np.linspace(-self.h, 0.0, self.nz)

    def mesh(self):
        return np.meshgrid(self.x, self.y, self.z, indexing="ij")

    def surface_mesh(self):
        return np.meshgrid(self.x, self.y, indexing="ij")

    def refine(self):
        """Grid with every spacing halved."""
        return Grid(2 * self.nx - 1, 2 * self.ny - 1, 2 * self.nz - 1,
                    self.Lx, self.Ly, self.h)

    # Discrete operators acting on C-ordered flat arrays of length ``size``.

    @cached_property
    def weights(self):
        wx = trapezoid_weights(self.nx, self.dx)
        wy = trapezoid_weights(self.ny, self.dy)
        wz = trapezoid_weights(self.nz, self.dz)
        return np.einsum("i,j,k->ijk", wx, wy, wz).ravel()

    @cached_property
    def surface_weights(self):
        wx = trapezoid_weights(self.nx, self.dx)
        wy = trapezoid_weights(self.ny, self.dy)
        return np.outer(wx, wy).ravel()

    @cached_property
    def top(self):
        """Flat indices of the surface nodes, in surface (i, j) order."""
        return np.arange(self.size).reshape(self.shape)[:, :, -1].ravel()

    def _kron3(self, ax, ay, az):
        return sp.kron(sp.kron(ax, ay), az, format="csr")

    @cached_property
    def _eyes(self):
        return (sp.identity(self.nx, format="csr"),
                sp.identity(self.ny, format="csr"),
                sp.identity(self.nz, format="csr"))

    @cached_property
    def Dx(self):
        ix, iy, iz = self._eyes
        return self._kron3(derivative_matrix(self.nx, self.dx), iy, iz)

    @cached_property
    def Dy(self):
        ix, iy, iz = self._eyes
        return self._kron3(ix, derivative_matrix(self.ny, self.dy), iz)

    @cached_property
    def Dz(self):
        ix, iy, iz = self._eyes
        return self._kron3(ix, iy, derivative_matrix(self.nz, self.dz))

    @cached_property
    def vertical_integral(self):
        """Flat operator u -> int_{-h}^{z} u(x, y, zeta) d zeta."""
        ix, iy, _ = self._eyes
        return self._kron3(ix, iy, cumulative_trapezoid_matrix(self.nz, self.dz))

    @cached_property
    def surface_Dx(self):
        return sp.kron(derivative_matrix(self.nx, self.dx),
                       sp.identity(self.ny), format="csr")

    @cached_property
    def surface_Dy(self):
        return sp.kron(sp.identity(self.nx),
                       derivative_matrix(self.ny, self.dy), format="csr")

    def inner(self, a, b):
        """Discrete L2(O) inner product of flat arrays (column-wise for 2-D)."""
        w = self.weights if np.ndim(a) == 1 else self.weights[:, None]
        return np.sum(w * a * b, axis=0)


def _check_values(values, shape, what):
    values = np.asarray(values, dtype=float)
    n = int(np.prod(shape))
    # flat node order or the exact shape; anything else is a transposition waiting to happen
    if values.shape not in (shape, (n,)):
        raise FieldError(f"{what}: expected shape {shape} or ({n},), got {values.shape}")
    values = values.reshape(shape)
    if not np.all(np.isfinite(values)):
        raise FieldError(f"{what}: non-finite values")
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _check_values(self.values, self.grid.shape, "ScalarField"))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, fun):
        X, Y, Z = grid.mesh()
        return cls(grid, np.broadcast_to(fun(X, Y, Z), grid.shape))

    @property
    def flat(self):
        return self.values.ravel()

    def surface(self):
        return SurfaceField(self.grid, self.values[:, :, -1])

    def __add__(self, other):
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, c):
        return ScalarField(self.grid, c * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class HVectorField:
    """Horizontal velocity ``(v1, v2)``; values have shape ``(2, nx, ny, nz)``."""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _check_values(self.values, (2,) + self.grid.shape, "HVectorField"))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((2,) + grid.shape))

    @classmethod
    def from_components(cls, grid, v1, v2):
        return cls(grid, np.stack([np.reshape(v1, grid.shape), np.reshape(v2, grid.shape)]))

    @property
    def v1(self):
        return self.values[0]

    @property
    def v2(self):
        return self.values[1]


@dataclass(frozen=True, eq=False)
class SurfaceField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _check_values(self.values, (self.grid.nx, self.grid.ny), "SurfaceField"))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.nx, grid.ny)))

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full((grid.nx, grid.ny), float(c)))

    @classmethod
    def from_function(cls, grid, fun):
        X, Y = grid.surface_mesh()
        return cls(grid, np.broadcast_to(fun(X, Y), (grid.nx, grid.ny)))

    @property
    def flat(self):
        return self.values.ravel()

    def extend(self):
        """Constant-in-depth extension to a ScalarField."""
        return ScalarField(self.grid, np.repeat(self.values[:, :, None], self.grid.nz, axis=2))


@dataclass(frozen=True)
class NormReport:
    l2: float
    v2: float
    h1: float
    surface_l2: float


def build_grid(nx, ny, nz, Lx, Ly, h):
    return Grid(nx, ny, nz, float(Lx), float(Ly), float(h))


def gradient(grid, flat):
    return grid.Dx @ flat, grid.Dy @ flat, grid.Dz @ flat


def energy_norm_sq(grid, flat, params):
    """Squared ``||theta||``: conductive energy plus the Robin surface term.

    Works column-wise on 2-D input of shape ``(size, batch)``.
    """
    tx, ty, tz = gradient(grid, flat)
    w = grid.weights if flat.ndim == 1 else grid.weights[:, None]
    ws = grid.surface_weights if flat.ndim == 1 else grid.surface_weights[:, None]
    top = flat[grid.top]
    return (params.K_h * np.sum(w * (tx * tx + ty * ty), axis=0)
            + params.K_nu * np.sum(w * tz * tz, axis=0)
            + params.beta_robin * np.sum(ws * top * top, axis=0))


def compute_norms(theta: ScalarField, params) -> NormReport:
    """L2, energy, H1 and surface-L2 norms of a temperature-like field.

    ``params`` needs ``K_h``, ``K_nu`` and ``beta_robin``.
    """
    grid = theta.grid
    u = theta.flat
    w = grid.weights
    tx, ty, tz = gradient(grid, u)
    l2sq = float(np.sum(w * u * u))
    top = u[grid.top]
    surf = float(np.sum(grid.surface_weights * top * top))
    v2sq = float(energy_norm_sq(grid, u, params))
    grad_sq = float(np.sum(w * (tx * tx + ty * ty + tz * tz)))
    return NormReport(l2=np.sqrt(l2sq), v2=np.sqrt(max(v2sq, 0.0)),
                      h1=np.sqrt(l2sq + grad_sq), surface_l2=np.sqrt(surf))


def poincare_constant_k2(params) -> float:
    """``min(beta / 2h, K_nu / 2h^2)``, the constant in ``K2 |theta|^2 <= ||theta||^2``."""
    beta, K_nu, h = params.beta_robin, params.K_nu, params.h
    if not (beta > 0 and K_nu > 0 and h > 0):
        raise ValueError("beta_robin, K_nu and h must be positive")
    return min(beta / (2.0 * h), K_nu / (2.0 * h * h))


def surface_h1_sq(grid, flat_surface):
    """Squared full H1(M) norm of a surface field (flat, length nx*ny)."""
    ws = grid.surface_weights
    gx = grid.surface_Dx @ flat_surface
    gy = grid.surface_Dy @ flat_surface
    return float(np.sum(ws * (flat_surface ** 2 + gx ** 2 + gy ** 2)))
