"""
Minimum-action computation of the rate function.

The rate at a target is the smallest control energy ``1/2 int |chi|_{U0}^2``
among controls whose skeleton trajectory meets the target.  Controls are
piecewise constant; the constrained problem is replaced by a sequence of
quadratic-penalty problems solved with L-BFGS, warm-started from stage to
stage.  Gradients come from a discrete adjoint of the time stepper or, as an
oracle, from forward differences.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .controls import ControlPath
from .stepper import Problem, control_steps, integrate

TARGET_KINDS = ("terminal_distance", "sup_deviation", "terminal_mode")


class ActionError(RuntimeError):
    pass


def control_energy(chi: ControlPath) -> float:
    return chi.energy


@dataclass(frozen=True, eq=False)
class TargetFunctional:
    """Event ``G <= 0`` with ``G = delta - D(theta)``.

    ``D`` is the l2 distance to the uncontrolled skeleton at ``T``
    (``terminal_distance``), its supremum over time (``sup_deviation``), or the
    signed projection of the terminal deviation on one carrier mode
    (``terminal_mode``).
    """
    kind: str
    delta: float
    reference: np.ndarray        # (n_steps + 1, N)
    weights: np.ndarray
    direction: Optional[np.ndarray] = None   # carrier mode for terminal_mode

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if not self.delta >= 0:
            raise ValueError("delta must be non-negative")
        if self.kind == "terminal_mode" and self.direction is None:
            raise ValueError("terminal_mode needs a direction")

    def with_delta(self, delta):
        return TargetFunctional(self.kind, delta, self.reference, self.weights, self.direction)

    def deviation(self, states):
        """``D`` and its Euclidean gradient ``(step, vector)`` for a (n_steps+1, N) path."""
        W = self.weights
        if self.kind == "terminal_mode":
            n = len(states) - 1
            return float(W @ ((states[n] - self.reference[n]) * self.direction)), n, W * self.direction
        d = states - self.reference
        sq = d ** 2 @ W
        n = len(states) - 1 if self.kind == "terminal_distance" else int(np.argmax(sq))
        D = float(np.sqrt(sq[n]))
        grad = W * d[n] / D if D > 0 else np.zeros_like(W)
        return D, n, grad

    def G(self, states):
        return self.delta - self.deviation(states)[0]

    def batch_deviation(self, final, dev_sq):
        """``D`` per path from ensemble output (final states and squared deviations)."""
        if self.kind == "terminal_mode":
            return (self.weights * self.direction) @ (final - self.reference[-1][:, None])
        if self.kind == "terminal_distance":
            return np.sqrt(dev_sq[-1])
        return np.sqrt(np.max(dev_sq, axis=0))

    def hits(self, final, dev_sq):
        return self.batch_deviation(final, dev_sq) >= self.delta


def make_target(problem: Problem, kind: str, delta: float, mode: int = 0) -> TargetFunctional:
    """Target relative to the uncontrolled, noise-free run of ``problem``."""
    res = integrate(problem, store_every=1, full_monitors=False)
    direction = None
    if kind == "terminal_mode":
        if problem.noise is None:
            raise ValueError("terminal_mode needs a noise model for its carrier modes")
        direction = problem.noise.modes.modes[mode]
    return TargetFunctional(kind, float(delta), np.array(res.snapshots), problem.grid.weights,
                            direction)


@dataclass
class ActionOptions:
    pieces: int = 20
    rho0: float = 100.0
    growth: float = 4.0
    stages: int = 5
    maxiter: int = 500
    gtol: float = 1e-10
    gradient: str = "adjoint"        # or "fd"
    fd_step: float = 1e-7
    feas_tol: float = 1e-3
    x0: Optional[ControlPath] = None


@dataclass
class ActionResult:
    chi_star: ControlPath
    I: float
    penalty_residual: float
    feasible: bool
    trace: list = field(default_factory=list)   # (iteration, energy, residual, gradient norm)
    message: str = ""

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "energy", "residual", "gradient_norm"])
        for row in self.trace:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


# --------------------------------------------------------------------------
# Forward run that keeps what the adjoint needs


def _forward(problem: Problem, chi_steps):
    st = problem.stepper
    theta = problem.theta0.copy()
    states = [theta]
    vels = []
    for n in range(problem.n_steps):
        vel = st.velocity(theta) if problem.advection else None
        vels.append(vel)
        theta, _ = st.advance(theta, n, 0.0, chi_steps[n], vel=vel)
        states.append(theta)
    return np.array(states), vels


def _adjoint(problem: Problem, chi_steps, states, vels, seeds):
    """Euclidean gradient of ``sum_n <seeds[n], theta_n>`` w.r.t. the step controls."""
    if problem.advection and problem.advection_scheme != "explicit":
        raise ActionError("the adjoint supports the explicit advection scheme only")
    st = problem.stepper
    grid, dt = problem.grid, problem.dt
    W = grid.weights
    noise = problem.noise
    Phi = noise.modes.modes
    n_steps = problem.n_steps
    grad = np.zeros_like(chi_steps)
    lam = seeds.get(n_steps, np.zeros(grid.size)).copy()
    for n in reversed(range(n_steps)):
        nu = W * st.lu.solve(lam) if st.lu is not None else lam.copy()
        t = n * dt
        theta = states[n]
        c = Phi @ (W * theta)
        pn = Phi @ nu
        grad[n] = dt * noise.gains(t, c) * pn
        new = nu + dt * (W * (Phi.T @ (noise.gain_derivatives(t, c) * chi_steps[n] * pn)))
        if problem.advection:
            new -= dt * _advection_transpose(problem, theta, vels[n], nu)
        if n in seeds:
            new += seeds[n]
        lam = new
    return grad


def _advection_transpose(problem, theta, vel, nu):
    """``(d/d theta B(v(theta), theta))^T nu`` in the Euclidean pairing."""
    grid = problem.grid
    W = grid.weights
    v1, v2, w = vel
    Dx, Dy, Dz = grid.Dx, grid.Dy, grid.Dz
    s = nu / W
    Wt = W * theta
    # theta slot
    Ct_nu = Dx.T @ (v1 * nu) + Dy.T @ (v2 * nu) + Dz.T @ (w * nu)
    C_s = v1 * (Dx @ s) + v2 * (Dy @ s) + w * (Dz @ s)
    out = 0.5 * (Ct_nu - W * C_s)
    # velocity slot, through w = -Icum (Dx v1 + Dy v2) and the diagnostic solve
    gx = 0.5 * ((Dx @ theta) * nu - Wt * (Dx @ s))
    gy = 0.5 * ((Dy @ theta) * nu - Wt * (Dy @ s))
    gw = 0.5 * ((Dz @ theta) * nu - Wt * (Dz @ s))
    back = grid.vertical_integral.T @ gw
    g1 = gx - Dx.T @ back
    g2 = gy - Dy.T @ back
    return out + problem.stepper.solver.velocity_transpose(g1, g2)


class _Objective:
    """Penalized energy in whitened coordinates ``y = chi sqrt(dtau / q)``."""

    def __init__(self, problem, target, knots, q):
        self.problem, self.target = problem, target
        self.knots, self.q = knots, q
        self.durations = np.diff(knots)
        self.scale = np.sqrt(self.durations[:, None] / q[None, :])
        self.template = ControlPath(knots, np.zeros((len(knots) - 1, len(q))), q)
        self.M = self.template.step_matrix(problem.dt, problem.n_steps)
        self.norm = target.delta if target.delta > 0 else 1.0
        self.rho = 1.0
        self.evals = 0

    def values(self, y):
        return y.reshape(self.scale.shape) / self.scale

    def run(self, y):
        chi = self.M @ self.values(y)
        states, vels = _forward(self.problem, chi)
        return chi, states, vels

    def value(self, y):
        _, states, _ = self.run(y)
        G = self.target.G(states)
        return 0.5 * float(y @ y) + self.rho * (max(G, 0.0) / self.norm) ** 2, G

    def value_and_grad(self, y):
        self.evals += 1
        chi, states, vels = self.run(y)
        D, n, dD = self.target.deviation(states)
        G = self.target.delta - D
        Gp = max(G, 0.0)
        f = 0.5 * float(y @ y) + self.rho * (Gp / self.norm) ** 2
        g = y.copy()
        if Gp > 0:
            coef = -2.0 * self.rho * Gp / self.norm ** 2
            gchi = _adjoint(self.problem, chi, states, vels, {n: coef * dD})
            g += ((self.M.T @ gchi) / self.scale).ravel()
        return f, g

    def fd_grad(self, y, h):
        f0 = self.value(y)[0]
        g = np.empty_like(y)
        for i in range(len(y)):
            step = h * max(1.0, abs(y[i]))
            yp = y.copy()
            yp[i] += step
            g[i] = (self.value(yp)[0] - f0) / step
        return f0, g


def penalty_gradients(problem: Problem, target: TargetFunctional, control: ControlPath,
                      rho: float = 1.0, fd_step: float = 1e-7):
    """Adjoint and forward-difference gradients of the penalized objective."""
    obj = _Objective(problem, target, control.knots, control.q)
    obj.rho = rho
    y = (control.values * obj.scale).ravel()
    return obj.value_and_grad(y)[1], obj.fd_grad(y, fd_step)[1]


def minimize_action(target: TargetFunctional, problem: Problem,
                    opts: Optional[ActionOptions] = None) -> ActionResult:
    """Local minimizer of ``E(chi) + rho (G_+ / delta)^2`` over an increasing ``rho`` ladder."""
    opts = opts or ActionOptions()
    if problem.noise is None:
        raise ValueError("the action needs a noise model")
    q = problem.noise.q
    knots = opts.x0.knots if opts.x0 is not None else np.linspace(0.0, problem.T, opts.pieces + 1)
    zero = ControlPath(knots, np.zeros((len(knots) - 1, len(q))), q)
    obj = _Objective(problem, target, knots, q)
    if target.G(obj.run(np.zeros(obj.scale.size))[1]) <= 0:
        return ActionResult(zero, 0.0, 0.0, True, [(0, 0.0, 0.0, 0.0)], "target met without control")
    if opts.x0 is not None:
        y = (opts.x0.values * obj.scale).ravel()
    else:
        # any nonzero start: the distance targets have no gradient at chi = 0
        y = np.full(obj.scale.size, 1e-2)
    trace = []
    it = [0]

    cache = {}
    best = {}

    def fun(yy):
        f, g = obj.fd_grad(yy, opts.fd_step) if opts.gradient == "fd" else obj.value_and_grad(yy)
        cache.clear()
        cache[yy.tobytes()] = g
        if np.isfinite(f) and f < best.get("f", np.inf):
            best["f"], best["y"] = f, yy.copy()
        return f, g

    def callback(yy):
        it[0] += 1
        g = cache.get(yy.tobytes())
        if g is None:
            g = fun(yy)[1]
        G = obj.value(yy)[1]
        trace.append((it[0], 0.5 * float(yy @ yy), max(G, 0.0) / obj.norm, float(np.linalg.norm(g))))

    message = ""
    for k in range(opts.stages):
        obj.rho = opts.rho0 * opts.growth ** k
        best.clear()
        # dense BFGS: the penalty is only C^1 at the constraint, which stalls
        # the L-BFGS-B line search well short of the optimum
        res = minimize(fun, y, jac=True, method="BFGS", callback=callback,
                       options={"maxiter": opts.maxiter, "gtol": opts.gtol})
        if "y" not in best:
            raise ActionError(f"optimizer produced no finite objective at stage {k}")
        y = res.x if np.isfinite(res.fun) and res.fun <= best["f"] else best["y"]
        message = str(res.message)
    chi_star = ControlPath(knots, obj.values(y), q)
    G = obj.value(y)[1]
    resid = max(G, 0.0) / obj.norm
    feasible = resid <= opts.feas_tol
    if not feasible:
        message = f"infeasible at this penalty (residual {resid:.3e}); {message}"
    return ActionResult(chi_star, chi_star.energy, resid, feasible, trace, message)


def rate_curve(problem: Problem, target: TargetFunctional, deltas, opts: Optional[ActionOptions] = None,
               rtol: float = 1e-6):
    """``(delta, I(delta))`` rows with warm starts; a decreasing rate raises ActionError."""
    deltas = np.asarray(deltas, dtype=float)
    if np.any(np.diff(deltas) < 0):
        raise ValueError("delta list must be ascending")
    opts = opts or ActionOptions()
    rows, prev = [], None
    for d in deltas:
        o = ActionOptions(**{**opts.__dict__, "x0": prev})
        r = minimize_action(target.with_delta(d), problem, o)
        if rows and r.I < rows[-1][1] * (1 - rtol) - 1e-14:
            raise ActionError(f"rate decreased from {rows[-1][1]:.6g} to {r.I:.6g} at delta={d}")
        rows.append((float(d), r.I, r.feasible))
        if r.I > 0:
            prev = r.chi_star
    return rows


# --------------------------------------------------------------------------
# Oracles for linear configurations


def lq_action(lam: float, s: float, q: float, T: float, x: float) -> float:
    """Least energy steering ``c' = -lam c + s chi`` from 0 to ``x`` at ``T``."""
    return lam * x * x / (s * s * q * (1.0 - np.exp(-2.0 * lam * T)))


def linear_response(problem: Problem, knots):
    """Terminal deviation per unit knot value: (N, P*m) matrix, for linear problems."""
    if problem.advection:
        raise ValueError("linear response needs advection off")
    if problem.noise.kind != "constant":
        raise ValueError("linear response needs a constant sigma")
    q = problem.noise.q
    P, m = len(knots) - 1, len(q)
    base = integrate(problem, full_monitors=False).final
    cols = []
    for p in range(P):
        for j in range(m):
            v = np.zeros((P, m))
            v[p, j] = 1.0
            chi = control_steps(problem, ControlPath(knots, v, q))
            cols.append(integrate(problem, chi_steps=chi, full_monitors=False).final - base)
    return np.array(cols).T


def brute_force_action(problem: Problem, target: TargetFunctional, pieces: int):
    """Exact minimum over knot values for a linear problem (quadratic program)."""
    if target.kind == "sup_deviation":
        raise ValueError("brute force covers terminal targets only")
    knots = np.linspace(0.0, problem.T, pieces + 1)
    L = linear_response(problem, knots)
    q = problem.noise.q
    Minv_sqrt = 1.0 / np.sqrt(np.repeat(np.diff(knots), len(q)) / np.tile(q, pieces))
    W = target.weights
    if target.kind == "terminal_mode":
        a = (W * target.direction) @ L * Minv_sqrt
        return 0.5 * target.delta ** 2 / float(a @ a)
    A = (np.sqrt(W)[:, None] * L) * Minv_sqrt[None, :]
    smax = np.linalg.svd(A, compute_uv=False)[0]
    return 0.5 * target.delta ** 2 / smax ** 2
