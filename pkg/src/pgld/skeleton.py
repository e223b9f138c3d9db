"""
The deterministic controlled equation and its two solvers.

``solve_skeleton`` time-steps the controlled dynamics directly.
``picard_solve`` instead iterates the map ``eta -> theta^eta`` where
``theta^eta`` solves the equation with ``sigma(t, eta) chi`` frozen, window by
window, until successive iterates agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlPath
from .grid import energy_norm_sq
from .operators import GronwallAudit, a2_stiffness
from .stepper import NumericalError, Problem, Trajectory, control_steps, energy_monitor, simulate

__all__ = ["ControlPath", "PicardDivergenceError", "PicardReport", "solve_skeleton",
           "picard_solve", "skeleton_energy_bound"]


class PicardDivergenceError(NumericalError):
    def __init__(self, message, factors=(), window=None):
        super().__init__(message)
        self.factors = list(factors)
        self.window = window


@dataclass
class PicardReport:
    sweeps: list            # sweeps used on each window
    factors: list           # observed contraction factors per window
    differences: list       # successive sup-l2 differences per window


def solve_skeleton(control: ControlPath, problem: Problem, store_every: int = 1) -> Trajectory:
    """Controlled run with the noise switched off."""
    return simulate(problem, eps=0.0, control=control, store_every=store_every)


def picard_solve(control: ControlPath, problem: Problem, window_T0: float = None,
                 max_sweeps: int = 50, tol: float = 1e-10, return_report: bool = False):
    """Fixed-point solve on consecutive windows of length ``window_T0``.

    Each sweep re-integrates the window with ``sigma`` evaluated along the
    previous iterate.  A window stops when the sup-l2 change drops below
    ``tol``; growing changes raise PicardDivergenceError with the factors seen.
    """
    dt, n_steps = problem.dt, problem.n_steps
    window_T0 = problem.T if window_T0 is None else window_T0
    if not window_T0 > 0:
        raise ValueError("window_T0 must be positive")
    per = max(1, int(round(window_T0 / dt)))
    chi = control_steps(problem, control)
    st = problem.stepper
    W = problem.grid.weights
    traj = np.empty((n_steps + 1, problem.grid.size))
    traj[0] = problem.theta0
    report = PicardReport([], [], [])
    start = 0
    while start < n_steps:
        stop = min(start + per, n_steps)
        eta = np.repeat(traj[start][None, :], stop - start + 1, axis=0)
        diffs, factors = [], []
        for sweep in range(1, max_sweeps + 1):
            new = np.empty_like(eta)
            new[0] = eta[0]
            for k, n in enumerate(range(start, stop)):
                new[k + 1], _ = st.advance(new[k], n, 0.0, chi[n] if chi is not None else None,
                                           sigma_state=eta[k])
            if not np.all(np.isfinite(new)):
                raise PicardDivergenceError("non-finite Picard iterate", factors, (start, stop))
            diff = float(np.sqrt(np.max((new - eta) ** 2 @ W)))
            if diffs and diffs[-1] > 0:
                factors.append(diff / diffs[-1])
            diffs.append(diff)
            eta = new
            if diff < tol:
                break
            if len(factors) >= 3 and all(f > 1.0 for f in factors[-3:]):
                raise PicardDivergenceError(
                    f"Picard iteration diverges on steps [{start}, {stop}); shrink window_T0",
                    factors, (start, stop))
        else:
            raise PicardDivergenceError(
                f"no convergence in {max_sweeps} sweeps on steps [{start}, {stop})",
                factors, (start, stop))
        traj[start:stop + 1] = eta
        report.sweeps.append(sweep)
        report.factors.append(factors)
        report.differences.append(diffs)
        start = stop
    K = a2_stiffness(problem.grid, problem.params)
    l2 = traj ** 2 @ W
    a2 = np.einsum("ni,ni->n", traj, (K @ traj.T).T)
    v2 = energy_norm_sq(problem.grid, traj.T, problem.params)
    out = Trajectory(problem, 0.0, problem.times, np.arange(n_steps + 1), traj, l2, v2, a2,
                     np.zeros(n_steps), chi)
    return (out, report) if return_report else out


def skeleton_energy_bound(traj: Trajectory, control: ControlPath = None, forcing=None,
                          params=None) -> GronwallAudit:
    """A-priori energy bound for a skeleton trajectory (the noise-free audit)."""
    if traj.eps != 0.0:
        raise ValueError("expected a skeleton (eps = 0) trajectory")
    if control is not None and traj.control_steps is None:
        traj.control_steps = control_steps(traj.problem, control)
    return energy_monitor(traj)
