"""
Finite-mode Q-Wiener noise and diffusion coefficients.

The noise lives on the span of the leading eigenmodes ``omega_j`` of the
temperature operator.  A U-vector is stored by its coefficients ``u_j`` in the
``omega_j`` basis; the Wiener process is ``W = sum_j sqrt(q_j) beta_j omega_j`` so
increments have independent coefficients of variance ``q_j dt``, and the
Cameron-Martin norm is ``|u|_{U0}^2 = sum_j u_j^2 / q_j``.

A diffusion coefficient acts diagonally: ``sigma(t, theta) u = sum_j u_j
g_j(t, <theta, omega_j>) omega_j``.  Three families are available:

* ``constant``            ``g_j = s_j tau(t)``
* ``diagonal_lipschitz``  ``g_j = s_j (offset + sin(c)) tau(t)``
* ``linear_clipped``      ``g_j = s_j clip(c, -clip, clip) tau(t)``

with the time modulation ``tau(t) = 1 + time_amplitude * sin(time_frequency * t)``.
All are finite rank, hence Hilbert-Schmidt.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import ScalarField
from .operators import ModeBasis

KINDS = ("constant", "diagonal_lipschitz", "linear_clipped")


@dataclass(frozen=True, eq=False)
class U0Vector:
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float).copy()
        if not np.all(np.isfinite(c)):
            raise ValueError("U0Vector entries must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    def norm_u0(self, q):
        return float(np.sqrt(np.sum(self.coefficients ** 2 / q)))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    modes: ModeBasis
    q: np.ndarray
    kind: str = "constant"
    amplitudes: np.ndarray = None
    offset: float = 0.0
    clip: float = 1.0
    time_amplitude: float = 0.0
    time_frequency: float = 0.0
    gamma: float = 1.0
    K: float = None
    L: float = None
    L1: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sigma kind {self.kind!r}; expected one of {KINDS}")
        q = np.asarray(self.q, dtype=float).copy()
        if q.ndim != 1 or len(q) != self.modes.m:
            raise ValueError("need one variance per carrier mode")
        if np.any(q <= 0) or not np.all(np.isfinite(q)):
            raise ValueError("variances q_j must be positive and finite")
        s = np.ones_like(q) if self.amplitudes is None else np.asarray(self.amplitudes, float).copy()
        if s.shape != q.shape:
            raise ValueError("need one amplitude per carrier mode")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "amplitudes", s)
        declared = self.analytic_constants()
        for name in ("K", "L", "L1"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, declared[name])

    @property
    def m(self):
        return len(self.q)

    @property
    def grid(self):
        return self.modes.grid

    @property
    def trace(self):
        return float(np.sum(self.q))

    def analytic_constants(self):
        """Growth, Lipschitz and time-Hoelder constants implied by the parameters."""
        qs2 = self.q * self.amplitudes ** 2
        tmax = 1.0 + abs(self.time_amplitude)
        tlip = abs(self.time_amplitude) * abs(self.time_frequency)
        if self.kind == "constant":
            K = float(np.sum(qs2)) * tmax ** 2
            L = 0.0
            L1 = float(np.sqrt(np.sum(qs2))) * tlip
        elif self.kind == "diagonal_lipschitz":
            bound = abs(self.offset) + 1.0
            K = float(np.sum(qs2)) * bound ** 2 * tmax ** 2
            L = float(np.max(qs2)) * tmax ** 2
            L1 = float(np.sqrt(np.sum(qs2))) * bound * tlip
        else:
            K = float(np.max(qs2)) * tmax ** 2
            L = float(np.max(qs2)) * tmax ** 2
            L1 = float(np.sqrt(np.max(qs2))) * tlip
        # Hoelder exponents below one only need the Lipschitz bound on |dt| <= 1 windows
        return {"K": K, "L": L, "L1": L1}

    def time_factor(self, t):
        return 1.0 + self.time_amplitude * np.sin(self.time_frequency * t)

    def gains(self, t, coeffs):
        """``g_j(t, c_j)`` for projections ``coeffs`` of shape (m,) or (m, batch)."""
        s = self.amplitudes if coeffs.ndim == 1 else self.amplitudes[:, None]
        if self.kind == "constant":
            out = np.broadcast_to(s, coeffs.shape).astype(float)
        elif self.kind == "diagonal_lipschitz":
            out = s * (self.offset + np.sin(coeffs))
        else:
            out = s * np.clip(coeffs, -self.clip, self.clip)
        return out * self.time_factor(t)

    def gain_derivatives(self, t, coeffs):
        """``d g_j / d c_j``."""
        s = self.amplitudes if coeffs.ndim == 1 else self.amplitudes[:, None]
        if self.kind == "constant":
            out = np.zeros(coeffs.shape)
        elif self.kind == "diagonal_lipschitz":
            out = s * np.cos(coeffs)
        else:
            out = s * (np.abs(coeffs) < self.clip)
        return out * self.time_factor(t)

    def apply_flat(self, t, theta, u):
        """``sigma(t, theta) u`` for flat theta; ``u`` of shape (m,) or (m, batch)."""
        g = self.gains(t, self.modes.coefficients(theta))
        return self.modes.modes.T @ (g * u)

    def hs_norm_sq(self, t, theta_flat):
        """Squared Hilbert-Schmidt norm ``tr(sigma Q sigma*)`` from the coefficient matrix."""
        g = self.gains(t, self.modes.coefficients(theta_flat))
        q = self.q if g.ndim == 1 else self.q[:, None]
        return np.sum(q * g * g, axis=0)


class NoiseStream:
    """Reproducible Gaussian stream owned by one trajectory.

    Keyed by ``(master_seed, path_index)`` through a counter-based Philox
    generator, so each path draws the same numbers under any parallel schedule.
    """

    def __init__(self, seed: int, path: int = 0):
        self.seed, self.path = int(seed), int(path)
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.path])))

    def normals(self, n_steps, m):
        return self.rng.standard_normal((n_steps, m))

    def increments(self, model: NoiseModel, dt: float, n_steps: int):
        """Wiener coefficient increments, shape (n_steps, m), variance ``q_j dt``."""
        return self.normals(n_steps, model.m) * np.sqrt(model.q * dt)


def sample_increment(model: NoiseModel, dt: float, rng) -> U0Vector:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if isinstance(rng, NoiseStream):
        rng = rng.rng
    return U0Vector(rng.standard_normal(model.m) * np.sqrt(model.q * dt))


def apply_sigma(model: NoiseModel, t: float, theta: ScalarField, u: U0Vector) -> ScalarField:
    if theta.grid != model.grid:
        raise ValueError("theta and noise model live on different grids")
    return ScalarField(theta.grid, model.apply_flat(t, theta.flat, u.coefficients))


def hs_norm_sq_images(model: NoiseModel, t: float, theta: ScalarField) -> float:
    """Squared HS norm as the sum of squared images of an orthonormal U0 basis."""
    total = 0.0
    for j in range(model.m):
        e = np.zeros(model.m)
        e[j] = np.sqrt(model.q[j])
        img = model.apply_flat(t, theta.flat, e)
        total += float(np.sum(model.grid.weights * img * img))
    return total


@dataclass
class AssumptionReport:
    growth: float
    lipschitz: float
    holder: float
    K: float
    L: float
    L1: float
    n_samples: int
    passed: bool = field(init=False)

    def __post_init__(self):
        # relative slack plus an absolute floor for roundoff in the measured differences
        rtol, atol = 1e-9, 1e-12
        self.passed = bool(self.growth <= self.K * (1 + rtol) + atol
                           and self.lipschitz <= self.L * (1 + rtol) + atol
                           and self.holder <= self.L1 * (1 + rtol) + atol)


def _random_theta(model, rng, scale):
    grid = model.grid
    # a mix of carrier-mode content and rough node noise
    c = rng.standard_normal(model.m)
    u = model.modes.modes.T @ c + 0.3 * rng.standard_normal(grid.size)
    norm = np.sqrt(np.sum(grid.weights * u * u))
    return u * (scale / max(norm, 1e-300))


def verify_assumptions(model: NoiseModel, n_samples: int = 1000, rng=None,
                       T: float = 1.0, max_norm: float = 1e3) -> AssumptionReport:
    """Empirical maxima of the growth, Lipschitz and time-Hoelder quotients."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rng = np.random.default_rng(rng)
    W = model.grid.weights
    growth = lip = hold = 0.0
    for _ in range(n_samples):
        scale1, scale2 = 10.0 ** rng.uniform(-3, np.log10(max_norm), size=2)
        th1 = _random_theta(model, rng, scale1)
        th2 = _random_theta(model, rng, scale2) if rng.random() < 0.5 else \
            th1 + _random_theta(model, rng, scale1 * 10.0 ** rng.uniform(-4, 0))
        t1, t2 = rng.uniform(0, T, size=2)
        n1 = np.sqrt(np.sum(W * th1 * th1))
        growth = max(growth, float(model.hs_norm_sq(t1, th1)) / (1.0 + n1 ** 2))
        d = th1 - th2
        dn = np.sum(W * d * d)
        if dn > 0:
            g1 = model.gains(t1, model.modes.coefficients(th1))
            g2 = model.gains(t1, model.modes.coefficients(th2))
            lip = max(lip, float(np.sum(model.q * (g1 - g2) ** 2)) / dn)
        if t1 != t2:
            c = model.modes.coefficients(th1)
            diff = np.sqrt(np.sum(model.q * (model.gains(t1, c) - model.gains(t2, c)) ** 2))
            hold = max(hold, float(diff) / ((1.0 + n1) * abs(t1 - t2) ** model.gamma))
    return AssumptionReport(growth, lip, hold, model.K, model.L, model.L1, n_samples)
