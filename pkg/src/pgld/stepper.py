"""
Semi-implicit Euler-Maruyama integration of the temperature equation.

One step with size ``dt`` from ``t_n = n dt`` solves

    (I + dt A2) theta_{n+1} = theta_n + dt [s* + g(t_n) - B(v_n, theta_n) + sigma(t_n, theta_n) chi_n]
                              + sqrt(eps) sigma(t_n, theta_n) dW_n

where ``s*`` is the Robin forcing by the surface reference temperature and
``v_n`` is the velocity diagnosed from ``theta_n``.  States are carried as flat
arrays of shape ``(N,)`` or ``(N, batch)``; a batch advances many independent
paths with one sparse solve.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import linregress

from .controls import ControlPath
from .grid import Grid, HVectorField, ScalarField, SurfaceField, energy_norm_sq, poincare_constant_k2
from .noise import NoiseModel, NoiseStream
from .operators import (ForcingSet, GronwallAudit, PhysParams, a2_stiffness, gronwall_audit,
                        skew_advection, surface_source,
                        vertical_velocity)
from .velocity import diagnostic_solver, solve_diagnostic


class NumericalError(RuntimeError):
    """Non-finite state or failed linear solve; ``step`` is the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def default_workers():
    try:
        return max(1, int(os.environ.get("PGLD_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class Problem:
    grid: Grid
    params: PhysParams
    forcing: ForcingSet
    noise: Optional[NoiseModel]
    theta0: np.ndarray
    T: float
    dt: float
    advection: bool = True
    diffusion: bool = True
    advection_scheme: str = "explicit"

    def __post_init__(self):
        th = np.asarray(self.theta0, dtype=float).ravel().copy()
        if th.size != self.grid.size or not np.all(np.isfinite(th)):
            raise ValueError("theta0 must hold one finite value per node")
        th.setflags(write=False)
        object.__setattr__(self, "theta0", th)
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")
        n = round(self.T / self.dt)
        if n < 1 or abs(n * self.dt - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError(f"dt={self.dt} does not divide T={self.T}")
        if self.advection_scheme not in ("explicit", "midpoint"):
            raise ValueError("advection_scheme must be 'explicit' or 'midpoint'")
        if self.forcing.grid != self.grid:
            raise ValueError("forcing lives on a different grid")
        if self.noise is not None and self.noise.grid != self.grid:
            raise ValueError("noise model lives on a different grid")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def replace(self, **changes):
        return replace(self, **changes)

    @cached_property
    def stepper(self):
        return Stepper(self)


class Stepper:
    """Matrices and factorizations shared by every step of one problem."""

    def __init__(self, problem: Problem):
        self.problem = p = problem
        grid = p.grid
        self.grid, self.dt = grid, p.dt
        self.W = grid.weights
        self.K = a2_stiffness(grid, p.params) if p.diffusion else sp.csr_matrix((grid.size, grid.size))
        self.system = (sp.diags(self.W) + p.dt * self.K).tocsc()
        self.lu = spla.splu(self.system) if p.diffusion else None
        th_star = p.forcing.theta_star.flat
        self.s_star = surface_source(grid, p.params, th_star) if p.diffusion else np.zeros(grid.size)
        self.has_s_star = bool(np.any(self.s_star != 0.0))
        self.mu = (p.forcing.mu_x.flat, p.forcing.mu_y.flat)
        self.has_mu = any(np.any(m != 0.0) for m in self.mu)
        self.solver = diagnostic_solver(grid, p.params) if p.advection else None

    # -- pieces ------------------------------------------------------------

    def velocity(self, theta):
        """``(v1, v2, w)`` diagnosed from flat theta (column-wise)."""
        v1, v2, _ = self.solver.solve_flat(theta, self.mu if self.has_mu else None)
        return v1, v2, vertical_velocity(self.grid, v1, v2)

    def source(self, t, batch):
        g = self.problem.forcing.source(t)
        f = self.s_star.copy()
        if g is not None:
            f = f + g
        return f if batch is None else np.repeat(f[:, None], batch, axis=1)

    def solve(self, rhs):
        if self.lu is None:
            return rhs.copy()
        return self.lu.solve(self.W[:, None] * rhs if rhs.ndim == 2 else self.W * rhs)

    def skew_matrix(self, v1, v2, w):
        """Sparse ``W B_v`` (antisymmetric) for one velocity field."""
        g = self.grid
        C = sp.diags(v1) @ g.Dx + sp.diags(v2) @ g.Dy + sp.diags(w) @ g.Dz
        WC = sp.diags(self.W) @ C
        return (0.5 * (WC - WC.T)).tocsc()

    # -- one step ------------------------------------------------------------

    def advance(self, theta, n, eps=0.0, chi=None, dW=None, sigma_state=None, vel=None):
        """Return ``(theta_{n+1}, xi_n)``; ``xi_n`` is the noise increment (or None).

        ``sigma_state`` freezes the state at which sigma is evaluated (used by
        the Picard solver); ``vel`` reuses an already diagnosed velocity.
        """
        p = self.problem
        t = n * self.dt
        batch = theta.shape[1] if theta.ndim == 2 else None
        state = theta if sigma_state is None else sigma_state
        f = self.source(t, batch)
        if p.advection and vel is None:
            vel = self.velocity(theta)
        if p.advection and p.advection_scheme == "explicit":
            f = f - skew_advection(self.grid, *vel, theta)
        if chi is not None:
            u = chi if batch is None or chi.ndim == 2 else chi[:, None]
            f = f + p.noise.apply_flat(t, state, u)
        rhs = theta + self.dt * f
        xi = None
        if dW is not None and eps > 0:
            xi = np.sqrt(eps) * p.noise.apply_flat(t, state, dW)
            rhs = rhs + xi
        if p.advection and p.advection_scheme == "midpoint":
            out = self._midpoint(theta, rhs, vel)
        else:
            out = self.solve(rhs)
        return out, xi

    def _midpoint(self, theta, rhs, vel):
        """Advection by the trapezoidal rule with the velocity frozen over the step."""
        cols = [slice(None)] if theta.ndim == 1 else [np.s_[:, b] for b in range(theta.shape[1])]
        out = np.empty_like(theta)
        half = 0.5 * self.dt
        for c in cols:
            v1, v2, w = (x[c] for x in vel)
            S = self.skew_matrix(v1, v2, w)
            A = (self.system + half * S).tocsc()
            out[c] = spla.spsolve(A, self.W * rhs[c] - half * (S @ theta[c]))
        return out


# --------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    """One path: snapshots plus per-step scalar monitors.

    ``l2sq``, ``v2sq`` and ``a2_energy`` are sampled at every time level;
    ``noise_work[n] = 2 <xi_n, theta_n> + |xi_n|^2`` belongs to step ``n``.
    """
    problem: Problem
    eps: float
    times: np.ndarray
    snapshot_index: np.ndarray
    snapshots: np.ndarray
    l2sq: np.ndarray
    v2sq: np.ndarray
    a2_energy: np.ndarray
    noise_work: np.ndarray
    control_steps: Optional[np.ndarray] = None
    velocity: Optional[HVectorField] = None
    pressure: Optional[SurfaceField] = None
    solves_per_step: int = 1

    @property
    def final(self):
        return self.snapshots[-1]

    def field(self, k):
        return ScalarField(self.problem.grid, self.snapshots[k])

    def sup_l2_distance(self, other: "Trajectory"):
        if not np.array_equal(self.snapshot_index, other.snapshot_index):
            raise ValueError("trajectories sampled at different steps")
        d = self.snapshots - other.snapshots
        return float(np.sqrt(np.max(d ** 2 @ self.problem.grid.weights)))

    def monitor_rows(self):
        """Rows ``(t, l2sq, v2sq, dt, solver_iterations)``, one per step."""
        dt = self.problem.dt
        return [(self.times[n + 1], self.l2sq[n + 1], self.v2sq[n + 1], dt, self.solves_per_step)
                for n in range(len(self.times) - 1)]


@dataclass
class RunResult:
    """Batched integration output (trailing axis = path)."""
    final: np.ndarray
    l2sq: np.ndarray
    a2_energy: np.ndarray
    v2sq: Optional[np.ndarray]
    noise_work: np.ndarray
    snapshots: list = field(default_factory=list)
    snapshot_index: list = field(default_factory=list)
    dev_sq: Optional[np.ndarray] = None


def _a2e(K, x):
    return np.sum(x * (K @ x), axis=0)


def integrate(problem: Problem, theta0=None, eps=0.0, chi_steps=None, dW=None,
              store_every=0, reference=None, full_monitors=True) -> RunResult:
    """Advance ``theta0`` (flat, or (N, batch)) through all steps.

    ``chi_steps`` is (n_steps, m) step-averaged control, ``dW`` is
    (n_steps, m) or (n_steps, m, batch).  ``reference`` is an (n_steps+1, N)
    array against which the squared l2 deviation is recorded.
    """
    st = problem.stepper
    grid = problem.grid
    W, K = st.W, a2_stiffness(grid, problem.params)
    theta = problem.theta0.copy() if theta0 is None else np.array(theta0, dtype=float)
    n_steps = problem.n_steps
    if dW is not None and dW.ndim == 3 and theta.ndim == 1:
        theta = np.repeat(theta[:, None], dW.shape[2], axis=1)
    if dW is not None and eps > 0 and problem.noise is None:
        raise ValueError("noise increments given but the problem has no noise model")
    shape = (n_steps + 1,) + theta.shape[1:]
    l2 = np.empty(shape)
    a2 = np.empty(shape)
    v2 = np.empty(shape) if full_monitors else None
    work = np.zeros((n_steps,) + theta.shape[1:])
    dev = np.empty(shape) if reference is not None else None
    snaps, idx = [], []

    def record(n, th):
        l2[n] = W @ (th * th)
        a2[n] = _a2e(K, th)
        if v2 is not None:
            v2[n] = energy_norm_sq(grid, th, problem.params)
        if dev is not None:
            d = th - (reference[n] if th.ndim == 1 else reference[n][:, None])
            dev[n] = W @ (d * d)
        if store_every and (n % store_every == 0 or n == n_steps):
            snaps.append(th.copy())
            idx.append(n)

    record(0, theta)
    for n in range(n_steps):
        chi = None if chi_steps is None else chi_steps[n]
        dw = None if dW is None else dW[n]
        new, xi = st.advance(theta, n, eps, chi, dw)
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite state after step {n}", step=n)
        if xi is not None:
            work[n] = 2.0 * (W @ (xi * theta)) + W @ (xi * xi)
        theta = new
        record(n + 1, theta)
    return RunResult(theta, l2, a2, v2, work, snaps, idx, dev)


def path_increments(problem: Problem, seed: int, path: int, refine: int = 1):
    """Wiener increments of one path at step ``dt``, shape (n_steps, m).

    The stream is drawn at the finest step ``dt / refine`` and summed in
    blocks, so runs at ``dt`` and ``dt / refine`` share one Brownian path.
    """
    noise = problem.noise
    n_fine = problem.n_steps * refine
    fine = NoiseStream(seed, path).increments(noise, problem.dt / refine, n_fine)
    if refine == 1:
        return fine
    return fine.reshape(problem.n_steps, refine, noise.m).sum(axis=1)


def control_steps(problem: Problem, control: Optional[ControlPath]):
    if control is None:
        return None
    if problem.noise is None:
        raise ValueError("a control needs a noise model (sigma) to act through")
    if control.m != problem.noise.m:
        raise ValueError("control and noise model have different mode counts")
    if abs(control.T - problem.T) > 1e-12 * max(1.0, problem.T):
        raise ValueError(f"control horizon {control.T} differs from T={problem.T}")
    return control.step_values(problem.dt, problem.n_steps)


def simulate(problem: Problem, eps: float = 0.0, control: Optional[ControlPath] = None,
             seed: int = 0, path: int = 0, store_every: int = 1, refine: int = 1,
             with_velocity: bool = True) -> Trajectory:
    """Single trajectory over ``[0, T]``; a control adds ``sigma(t, theta) chi dt``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    chi = control_steps(problem, control)
    dW = path_increments(problem, seed, path, refine) if (eps > 0 and problem.noise is not None) else None
    res = integrate(problem, eps=eps, chi_steps=chi, dW=dW, store_every=max(1, store_every))
    v = ps = None
    if with_velocity and problem.advection:
        th = ScalarField(problem.grid, res.final)
        sol = solve_diagnostic(th, (problem.forcing.mu_x, problem.forcing.mu_y), problem.params)
        v, ps = sol.v, sol.p_s
    return Trajectory(problem, eps, problem.times, np.array(res.snapshot_index),
                      np.array(res.snapshots), res.l2sq, res.v2sq, res.a2_energy, res.noise_work,
                      chi, v, ps, 2 if problem.advection else 1)


@dataclass
class SimState:
    t: float
    theta: ScalarField
    v: HVectorField
    p_s: SurfaceField


def initial_state(problem: Problem) -> SimState:
    th = ScalarField(problem.grid, problem.theta0)
    sol = solve_diagnostic(th, (problem.forcing.mu_x, problem.forcing.mu_y), problem.params)
    return SimState(0.0, th, sol.v, sol.p_s)


def step(state: SimState, problem: Problem, eps: float = 0.0, rng=None,
         chi=None) -> SimState:
    """Advance one state by ``problem.dt``; ``rng`` is a NoiseStream or Generator."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    st = problem.stepper
    n = int(round(state.t / problem.dt))
    theta = state.theta.flat
    dW = None
    if eps > 0 and problem.noise is not None:
        gen = rng.rng if isinstance(rng, NoiseStream) else np.random.default_rng(rng)
        dW = gen.standard_normal(problem.noise.m) * np.sqrt(problem.noise.q * problem.dt)
    vel = None
    if problem.advection:
        v1, v2 = state.v.v1.ravel(), state.v.v2.ravel()
        vel = (v1, v2, vertical_velocity(problem.grid, v1, v2))
    new, _ = st.advance(theta, n, eps, chi, dW, vel=vel)
    if not np.all(np.isfinite(new)):
        raise NumericalError(f"non-finite state after step {n}", step=n)
    th = ScalarField(problem.grid, new)
    sol = solve_diagnostic(th, (problem.forcing.mu_x, problem.forcing.mu_y), problem.params)
    return SimState(state.t + problem.dt, th, sol.v, sol.p_s)


# --------------------------------------------------------------------------
# Ensembles


@dataclass
class EnsembleResult:
    final: np.ndarray          # (N, n_paths)
    l2sq: np.ndarray           # (n_steps + 1, n_paths)
    a2_energy: np.ndarray
    dev_sq: Optional[np.ndarray]
    log_weights: Optional[np.ndarray]
    seed: int
    eps: float


def _run_chunk(problem, eps, chi, seed, paths, reference, refine, tilt):
    m = problem.noise.m
    dW = np.stack([path_increments(problem, seed, p, refine) for p in paths], axis=2)
    res = integrate(problem, eps=eps, chi_steps=chi, dW=dW, reference=reference,
                    full_monitors=False)
    logw = None
    if tilt is not None:
        # inverse Girsanov density, accumulated step by step
        q = problem.noise.q
        cross = np.einsum("nj,njb->b", tilt / q, dW)
        energy = problem.dt * np.sum(tilt ** 2 / q)
        logw = -cross / np.sqrt(eps) - 0.5 * energy / eps
    return res, logw


def run_ensemble(problem: Problem, eps: float, n_paths: int, seed: int,
                 control: Optional[ControlPath] = None, reference=None, chunk: int = 128,
                 workers: Optional[int] = None, refine: int = 1, tilted: bool = False,
                 path_offset: int = 0) -> EnsembleResult:
    """Independent paths in fixed-size chunks; the result does not depend on ``workers``.

    With ``tilted=True`` the control is treated as a Girsanov tilt and every
    path carries its log likelihood ratio back to the untilted measure.
    """
    if problem.noise is None:
        raise ValueError("an ensemble needs a noise model")
    if eps <= 0:
        raise ValueError("ensembles need eps > 0")
    chi = control_steps(problem, control)
    tilt = chi if (tilted and chi is not None) else None
    starts = range(path_offset, path_offset + n_paths, chunk)
    jobs = [list(range(s, min(s + chunk, path_offset + n_paths))) for s in starts]
    workers = workers or default_workers()
    run = lambda paths: _run_chunk(problem, eps, chi, seed, paths, reference, refine, tilt)
    if workers == 1:
        out = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(run, jobs))
    cat = lambda xs, ax: np.concatenate(xs, axis=ax)
    return EnsembleResult(
        final=cat([r.final for r, _ in out], 1),
        l2sq=cat([r.l2sq for r, _ in out], 1),
        a2_energy=cat([r.a2_energy for r, _ in out], 1),
        dev_sq=cat([r.dev_sq for r, _ in out], 1) if reference is not None else None,
        log_weights=cat([w for _, w in out], 0) if tilt is not None else None,
        seed=seed, eps=eps)


# --------------------------------------------------------------------------
# Energy audit


def energy_bound_terms(problem: Problem, chi_steps=None):
    """Per-step nonnegative increments of the Gronwall data for the scheme.

    Returns ``(forcing_increment, rate)`` where ``rate[n]`` multiplies the
    squared l2 norm on step ``n``.
    """
    grid, params = problem.grid, problem.params
    K2 = poincare_constant_k2(params)
    dt, n_steps = problem.dt, problem.n_steps
    ts = problem.forcing.theta_star.flat
    star = 4.0 * params.beta_robin * float(np.sum(grid.surface_weights * ts * ts))
    inc = np.full(n_steps, dt * star)
    for n in range(n_steps):
        g = problem.forcing.source(n * dt)
        if g is not None:
            inc[n] += dt * (4.0 / K2) * float(grid.weights @ (g * g))
    rate = np.zeros(n_steps)
    if chi_steps is not None and problem.noise is not None:
        chi_sq = np.sum(chi_steps ** 2 / problem.noise.q, axis=1)
        rate = (4.0 * problem.noise.K / K2) * chi_sq
        inc = inc + dt * rate
    return inc, rate


def energy_monitor(traj: Trajectory, forcing=None, params=None, eps=None) -> GronwallAudit:
    """Gronwall audit of ``|theta|^2 + int a(theta)`` along a computed trajectory.

    ``Y`` is the squared l2 norm, ``X`` the discrete dissipation
    ``<A2 theta, theta>``, ``a`` the control rate and ``Z`` the initial energy
    plus accumulated forcing and the running maximum of the noise work.
    """
    problem = traj.problem
    if traj.l2sq is None or traj.a2_energy is None or traj.noise_work is None:
        raise ValueError("trajectory has no monitors")
    inc, rate = energy_bound_terms(problem, traj.control_steps)
    F = np.concatenate([[0.0], np.cumsum(inc + traj.noise_work)])
    Z = traj.l2sq[0] + np.maximum.accumulate(np.maximum(F, 0.0))
    # node values whose trapezoid integral dominates the step-constant rate
    a = np.zeros(len(traj.times))
    if len(rate):
        a[:-1] = rate
        a[1:] = np.maximum(a[1:], rate)
    return gronwall_audit(traj.times, traj.l2sq, traj.a2_energy, a, Z, x_rule="right")


# --------------------------------------------------------------------------
# Increment statistic and coupled-path stability


@dataclass
class IncrementReport:
    levels: np.ndarray
    S: np.ndarray
    slope: float
    n_kept: int
    n_paths: int


def increment_statistic(problem: Problem, eps: float, control: Optional[ControlPath] = None,
                        N_list=(2, 3, 4, 5, 6), n_paths: int = 200, seed: int = 0,
                        radius: float = np.inf, workers: Optional[int] = None) -> IncrementReport:
    """Ensemble mean of ``sum_k int_{t_{k-1}}^{t_k} |theta(s) - theta(t_k)|^2 ds``.

    Paths whose ``sup |theta|^2 + int a(theta)`` exceeds ``radius`` are dropped.
    """
    N_list = np.asarray(N_list, dtype=int)
    if np.any(np.diff(N_list) <= 0):
        raise ValueError("N_list must be ascending")
    per = problem.n_steps / 2.0 ** N_list.max()
    if per < 1 or per != int(per):
        raise ValueError("dt too coarse for the finest dyadic level")
    chi = control_steps(problem, control)
    grid, W = problem.grid, problem.grid.weights
    paths = range(n_paths)
    workers = workers or default_workers()

    def one(p):
        dW = path_increments(problem, seed, p) if (eps > 0 and problem.noise is not None) else None
        res = integrate(problem, eps=eps, chi_steps=chi, dW=dW, store_every=1, full_monitors=False)
        th = np.array(res.snapshots)
        energy = np.concatenate([[0.0], np.cumsum(problem.dt * res.a2_energy[1:])])
        keep = np.max(res.l2sq + energy) <= radius
        S = []
        for N in N_list:
            step = problem.n_steps // 2 ** N
            total = 0.0
            for k in range(1, 2 ** N + 1):
                seg = th[(k - 1) * step:k * step + 1]
                d = (seg - seg[-1]) ** 2 @ W
                total += problem.dt * (0.5 * d[0] + d[1:-1].sum() + 0.5 * d[-1])
            S.append(total)
        return keep, np.array(S)

    if workers == 1:
        out = [one(p) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(one, paths))
    kept = [S for k, S in out if k]
    if not kept:
        raise ValueError("no path stayed inside the radius")
    S = np.mean(kept, axis=0)
    slope = np.nan
    if np.all(S > 0):
        slope = float(linregress(N_list, np.log2(S)).slope)
    return IncrementReport(N_list, S, slope, len(kept), n_paths)


@dataclass
class StabilityReport:
    times: np.ndarray
    d: np.ndarray
    weight: np.ndarray
    monotone: bool
    max_increase: float


def pathwise_stability(problem: Problem, theta0_a, theta0_b, eps: float = 0.0, seed: int = 0,
                       seed_b: Optional[int] = None, L2: Optional[float] = None,
                       tol: float = 1e-10) -> StabilityReport:
    """Weighted separation ``phi(t) |theta_a - theta_b|^2`` of two coupled runs.

    ``phi(t) = exp(-L2 int_0^t <A2 theta_b, theta_b>)``.  Monotonicity is
    checked after removing the step's noise work on the difference, which is
    the discrete counterpart of the Ito correction.
    """
    if seed_b is not None and seed_b != seed:
        raise ValueError("coupled runs must share one seed")
    if L2 is None:
        L2 = 0.0
    W = problem.grid.weights
    dW = path_increments(problem, seed, 0) if (eps > 0 and problem.noise is not None) else None
    st = problem.stepper
    a = np.asarray(theta0_a, float).ravel().copy()
    b = np.asarray(theta0_b, float).ravel().copy()
    K = a2_stiffness(problem.grid, problem.params)
    n_steps = problem.n_steps
    d = np.empty(n_steps + 1)
    phi = np.empty(n_steps + 1)
    integral = 0.0
    d[0], phi[0] = float(W @ (a - b) ** 2), 1.0
    excess = 0.0
    for n in range(n_steps):
        dw = None if dW is None else dW[n]
        a_new, xa = st.advance(a, n, eps, None, dw)
        b_new, xb = st.advance(b, n, eps, None, dw)
        integral += problem.dt * float(b_new @ (K @ b_new))
        phi[n + 1] = np.exp(-L2 * integral)
        d[n + 1] = phi[n + 1] * float(W @ (a_new - b_new) ** 2)
        allowance = 0.0
        if xa is not None:
            dx = xa - xb
            diff = a - b
            allowance = phi[n + 1] * float(2.0 * W @ (dx * diff) + W @ (dx * dx))
        excess = max(excess, d[n + 1] - d[n] - allowance)
        a, b = a_new, b_new
    return StabilityReport(problem.times, d, phi, excess <= tol, float(excess))
