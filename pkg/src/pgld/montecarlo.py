"""
Small-noise experiments: crude and importance-sampled tail probabilities,
log-linear rate fits and continuity of the controlled solution map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import binomtest, ks_2samp, linregress, norm

from .controls import ControlPath
from .grid import build_grid
from .noise import NoiseModel
from .operators import ForcingSet, PhysParams, eigenmodes_a2
from .action import TargetFunctional
from .skeleton import solve_skeleton
from .stepper import Problem, run_ensemble, simulate


@dataclass
class TailEstimate:
    eps: float
    delta: float
    n_samples: int
    p_hat: float
    ci_low: float
    ci_high: float
    n_effective: float
    hits: int
    variance: float = np.nan          # per-sample variance of the estimator
    mean_weight: float = 1.0
    mean_weight_se: float = 0.0
    degenerate: bool = False


def wilson_interval(k: int, n: int, level: float = 0.95):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def _needs_reference(target):
    return target.reference if target.kind != "terminal_mode" else None


def estimate_tail(problem: Problem, eps: float, target: TargetFunctional, n_samples: int,
                  seed: int, workers: Optional[int] = None) -> TailEstimate:
    """Crude Monte Carlo frequency of ``G <= 0`` with a 95% Wilson interval."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    if not np.isfinite(target.delta):
        lo, hi = wilson_interval(0, n_samples)
        return TailEstimate(eps, target.delta, n_samples, 0.0, lo, hi, float(n_samples), 0, 0.0)
    ens = run_ensemble(problem, eps, n_samples, seed, reference=_needs_reference(target),
                       workers=workers)
    hits = target.hits(ens.final, ens.dev_sq)
    k = int(np.sum(hits))
    p = k / n_samples
    lo, hi = wilson_interval(k, n_samples)
    return TailEstimate(eps, target.delta, n_samples, p, lo, hi, float(n_samples), k, p * (1 - p))


def girsanov_importance_sampling(problem: Problem, chi_star: ControlPath, eps: float,
                                 target: TargetFunctional, n_samples: int, seed: int,
                                 workers: Optional[int] = None) -> TailEstimate:
    """Tail probability under the tilted dynamics, reweighted to the original law."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    ens = run_ensemble(problem, eps, n_samples, seed, control=chi_star,
                       reference=_needs_reference(target), workers=workers, tilted=True)
    w = np.exp(ens.log_weights)
    hits = target.hits(ens.final, ens.dev_sq)
    x = w * hits
    p = float(np.mean(x))
    var = float(np.var(x, ddof=1))
    se = np.sqrt(var / n_samples)
    z = norm.ppf(0.975)
    n_eff = float(np.sum(x) ** 2 / np.sum(x * x)) if np.any(x > 0) else 0.0
    return TailEstimate(eps, target.delta, n_samples, p, max(0.0, p - z * se), min(1.0, p + z * se),
                        n_eff, int(np.sum(hits)), var, float(np.mean(w)),
                        float(np.std(w, ddof=1) / np.sqrt(n_samples)), n_eff < 10)


@dataclass
class LDPFit:
    slope: float
    stderr: float
    intercept: float
    ratio: float
    valid: bool
    message: str = ""


def ldp_fit(eps_list, estimates: Sequence, I_ref: float) -> LDPFit:
    """Least-squares slope of ``log p_hat`` against ``1/eps``; expect about ``-I_ref``."""
    eps = np.asarray(eps_list, dtype=float)
    p = np.array([e.p_hat if hasattr(e, "p_hat") else float(e) for e in estimates])
    use = p > 0
    if use.sum() < 3:
        raise ValueError("fewer than three eps values with hits; needs importance sampling")
    fit = linregress(1.0 / eps[use], np.log(p[use]))
    valid = bool(fit.slope < 0)
    ratio = fit.slope / (-I_ref) if I_ref else np.nan
    msg = "" if valid else "non-negative slope: probabilities must shrink with eps"
    return LDPFit(float(fit.slope), float(fit.stderr), float(fit.intercept), float(ratio), valid, msg)


# --------------------------------------------------------------------------
# Linear reference configuration and its exact law


def linear_problem(nx=3, ny=3, nz=5, T=1.0, dt=0.005, amplitude=1.0, q=1.0, m=1,
                   params: Optional[PhysParams] = None) -> Problem:
    """No advection, no forcing, zero start, constant sigma on the leading modes."""
    params = params or PhysParams()
    grid = build_grid(nx, ny, nz, 1.0, 1.0, params.h)
    modes = eigenmodes_a2(params, grid, m)
    qs = np.full(m, float(q)) if np.ndim(q) == 0 else np.asarray(q, float)
    amps = np.full(m, float(amplitude)) if np.ndim(amplitude) == 0 else np.asarray(amplitude, float)
    noise = NoiseModel(modes, qs, "constant", amps)
    return Problem(grid, params, ForcingSet.zero(grid), noise, np.zeros(grid.size), T, dt,
                   advection=False)


def terminal_variance(problem: Problem, eps: float, mode: int = 0) -> float:
    """Exact variance of the terminal carrier coefficient for the linear problem."""
    nm = problem.noise
    if nm.kind != "constant" or problem.advection or nm.time_amplitude != 0:
        raise ValueError("closed form needs the linear constant-sigma configuration")
    lam = nm.modes.eigenvalues[mode]
    dt, N = problem.dt, problem.n_steps
    decay = (1.0 + dt * lam) ** (-2.0 * np.arange(1, N + 1))
    return eps * nm.amplitudes[mode] ** 2 * nm.q[mode] * dt * float(np.sum(decay))


def gaussian_tail(problem: Problem, eps: float, target: TargetFunctional, mode: int = 0) -> float:
    """Exact probability of a terminal target for the one-mode linear problem."""
    sd = np.sqrt(terminal_variance(problem, eps, mode))
    if target.kind == "terminal_mode":
        return float(norm.sf(target.delta / sd))
    if target.kind == "terminal_distance" and problem.noise.m == 1:
        return float(2.0 * norm.sf(target.delta / sd))
    raise ValueError("closed form covers terminal_mode, or terminal_distance with one mode")


# --------------------------------------------------------------------------
# Continuity of the controlled solution map


def oscillating_controls(base: ControlPath, amplitude: float, n_list, mode: int = 0,
                         pieces_per_period: int = 16):
    """``base + amplitude sin(n pi t / T) e_mode`` sampled on a fine common knot grid."""
    T = base.T
    out = []
    for n in n_list:
        pieces = max(base.pieces, pieces_per_period * max(n_list))
        fine = ControlPath(np.linspace(0.0, T, pieces + 1),
                           base.step_matrix(T / pieces, pieces) @ base.values, base.q)
        mids = 0.5 * (fine.knots[1:] + fine.knots[:-1])
        v = fine.values.copy()
        v[:, mode] += amplitude * np.sin(n * np.pi * mids / T)
        out.append(fine.with_values(v))
    return out


def control_continuity(problem: Problem, base: ControlPath, amplitude: float,
                       n_list=(1, 2, 4, 8, 16), mode: int = 0):
    """Sup-l2 distance between the skeleton at oscillating controls and at ``base``."""
    ref = solve_skeleton(base, problem)
    return [ref.sup_l2_distance(solve_skeleton(c, problem))
            for c in oscillating_controls(base, amplitude, n_list, mode)]


@dataclass
class ContinuityReport:
    eps: np.ndarray
    distances: np.ndarray
    rate: float
    decreasing: bool


def weak_continuity_experiment(problem: Problem, eps_list, control: ControlPath,
                               perturbation: Optional[Callable[[float], ControlPath]] = None,
                               seed: int = 0) -> ContinuityReport:
    """Distance from the noisy controlled run to the skeleton as ``eps`` shrinks.

    ``perturbation(eps)`` returns the control used at that ``eps`` (default:
    ``control`` itself).  ``rate`` is the fitted log-log slope.
    """
    eps = np.asarray(eps_list, dtype=float)
    ref = solve_skeleton(control, problem)
    d = []
    for e in eps:
        c = control if perturbation is None else perturbation(e)
        d.append(ref.sup_l2_distance(simulate(problem, e, c, seed=seed, with_velocity=False)))
    d = np.array(d)
    order = np.argsort(eps)[::-1]
    rate = float(linregress(np.log(eps), np.log(d)).slope) if np.all(d > 0) else np.nan
    return ContinuityReport(eps, d, rate, bool(np.all(np.diff(d[order]) < 0)))


def ks_probe(problem: Problem, eps: float, control_a: ControlPath, control_b: ControlPath,
             n_samples: int, seed: int, mode: int = 0):
    """Two-sample KS statistic of terminal carrier coefficients under two controls."""
    Phi = problem.noise.modes
    a = run_ensemble(problem, eps, n_samples, seed, control=control_a).final
    b = run_ensemble(problem, eps, n_samples, seed + 1, control=control_b).final
    res = ks_2samp(Phi.coefficients(a)[mode], Phi.coefficients(b)[mode])
    return float(res.statistic), float(res.pvalue)
