"""Command-line entry point: ``pgld <subcommand> --config run.toml [options]``.

Every run writes its outputs plus ``manifest.json`` into ``--out``.  Exit
codes: 0 success, 1 configuration or usage error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .action import ActionError, ActionOptions, make_target, minimize_action
from .config import ConfigError, RunConfig, build_problem, config_grid, config_params, load_config
from .constants import measure_constants
from .controls import ControlPath
from .grid import ScalarField
from .montecarlo import estimate_tail, girsanov_importance_sampling, ldp_fit
from .noise import verify_assumptions
from .operators import EigenSolveError, eigenmodes_a2
from .skeleton import picard_solve, skeleton_energy_bound, solve_skeleton
from .snapshot import encode
from .stepper import NumericalError, energy_monitor, simulate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (NumericalError, ActionError, EigenSolveError, FloatingPointError,
                    np.linalg.LinAlgError)


class _Failed(Exception):
    """A run finished but one of its checks failed."""


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue().encode()


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n").encode()


class Outputs:
    """Single-writer output directory with a digest inventory."""

    def __init__(self, root: Path):
        self.root = root
        self.inventory = {}
        root.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, data: bytes):
        (self.root / name).write_bytes(data)
        self.inventory[name] = hashlib.sha256(data).hexdigest()


def _control(cfg: RunConfig, problem):
    name = cfg.experiment.get("control_file")
    if name is None:
        return None
    path = cfg.base_dir / name
    if not path.is_file():
        raise ConfigError(f"[experiment] control_file {name!r} not found")
    if problem.noise is None:
        raise ConfigError("a control file needs [noise] modes > 0")
    try:
        return ControlPath.from_csv(path.read_text(), problem.noise.q)
    except ValueError as exc:
        raise ConfigError(f"[experiment] control_file: {exc}") from None


def _trajectory_outputs(out: Outputs, traj, prefix="theta"):
    out.write("monitors.csv", _csv(["t", "l2sq", "v2sq", "dt", "solver_iterations"],
                                   traj.monitor_rows()))
    for k, n in enumerate(traj.snapshot_index):
        out.write(f"{prefix}_{int(n):06d}.pgld", encode(traj.field(k)))
    if traj.velocity is not None:
        g = traj.problem.grid
        out.write("v1_final.pgld", encode(ScalarField(g, traj.velocity.v1)))
        out.write("v2_final.pgld", encode(ScalarField(g, traj.velocity.v2)))


def cmd_simulate(cfg, args, out):
    problem = build_problem(cfg)
    every = int(cfg.experiment.get("snapshot_every", problem.n_steps))
    traj = simulate(problem, cfg.eps, _control(cfg, problem), seed=cfg.master_seed,
                    store_every=every)
    _trajectory_outputs(out, traj)
    return {"eps": cfg.eps, "n_steps": problem.n_steps}


def cmd_skeleton(cfg, args, out):
    problem = build_problem(cfg)
    control = _control(cfg, problem)
    if control is None and problem.noise is not None:
        control = ControlPath.zeros(problem.T, problem.noise.q)
    every = int(cfg.experiment.get("snapshot_every", problem.n_steps))
    traj = solve_skeleton(control, problem, store_every=every)
    _trajectory_outputs(out, traj)
    summary = {"n_steps": problem.n_steps}
    if cfg.experiment.get("picard", False):
        window = cfg.experiment.get("window_T0", problem.T)
        ref = solve_skeleton(control, problem)
        pic, report = picard_solve(control, problem, window, return_report=True)
        summary["picard_difference"] = ref.sup_l2_distance(pic)
        out.write("picard.csv", _csv(["window", "sweeps", "last_factor"],
                                     [(i, s, float(f[-1]) if f else 0.0)
                                      for i, (s, f) in enumerate(zip(report.sweeps, report.factors))]))
    return summary


def _target(cfg, problem, delta):
    exp = cfg.experiment
    if delta is None:
        delta = exp.get("delta")
    if delta is None:
        raise ConfigError("a target needs [experiment] delta or --delta")
    return make_target(problem, exp.get("target", "terminal_distance"), float(delta),
                       int(exp.get("mode", 0)))


def _action_options(cfg):
    exp = cfg.experiment
    keys = ("pieces", "rho0", "growth", "stages", "maxiter", "gradient")
    return ActionOptions(**{k: exp[k] for k in keys if k in exp})


def cmd_action(cfg, args, out):
    problem = build_problem(cfg)
    if problem.noise is None:
        raise ConfigError("the action needs [noise] modes > 0")
    target = _target(cfg, problem, args.delta)
    res = minimize_action(target, problem, _action_options(cfg))
    out.write("control.csv", res.chi_star.to_csv().encode())
    out.write("convergence.csv", res.trace_csv().encode())
    summary = {"I": res.I, "penalty_residual": res.penalty_residual, "feasible": res.feasible,
               "delta": target.delta, "target": target.kind, "message": res.message}
    out.write("action.json", _json(summary))
    if not res.feasible:
        raise _Failed(res.message)
    return summary


def cmd_mc(cfg, args, out):
    problem = build_problem(cfg)
    if problem.noise is None:
        raise ConfigError("Monte Carlo needs [noise] modes > 0")
    exp = cfg.experiment
    eps_list = [float(e) for e in exp.get("eps_list", [cfg.eps])]
    if any(e <= 0 for e in eps_list):
        raise ConfigError("Monte Carlo needs eps > 0")
    n = int(args.n_samples or exp.get("n_samples", 1000))
    target = _target(cfg, problem, args.delta)
    chi_star, I_ref = None, exp.get("I_ref")
    if exp.get("importance_sampling", False) or (I_ref is None and len(eps_list) >= 3):
        res = minimize_action(target, problem, _action_options(cfg))
        chi_star, I_ref = res.chi_star, (res.I if I_ref is None else I_ref)
        out.write("control.csv", chi_star.to_csv().encode())
    seeds = np.random.SeedSequence(cfg.master_seed).generate_state(2 * len(eps_list))
    rows, crude = [], []
    for e, s, s_is in zip(eps_list, seeds[0::2], seeds[1::2]):
        est = estimate_tail(problem, e, target, n, int(s), args.threads)
        crude.append(est)
        rows.append((e, "crude", n, est.p_hat, est.ci_low, est.ci_high, est.hits, est.n_effective))
        if exp.get("importance_sampling", False):
            est = girsanov_importance_sampling(problem, chi_star, e, target, n, int(s_is), args.threads)
            rows.append((e, "girsanov", n, est.p_hat, est.ci_low, est.ci_high, est.hits,
                         est.n_effective))
    out.write("tail.csv", _csv(["eps", "method", "n_samples", "p_hat", "ci_low", "ci_high", "hits",
                                "n_effective"], rows))
    summary = {"eps_ladder": eps_list, "n_samples": n, "delta": target.delta}
    if len(eps_list) >= 3 and sum(e.p_hat > 0 for e in crude) >= 3:
        fit = ldp_fit(eps_list, crude, I_ref)
        summary["ldp"] = {"slope": fit.slope, "stderr": fit.stderr, "I_ref": I_ref,
                          "ratio": fit.ratio, "valid": fit.valid}
    out.write("mc.json", _json(summary))
    return summary


def cmd_audit(cfg, args, out):
    problem = build_problem(cfg)
    exp = cfg.experiment
    grid, params = config_grid(cfg), config_params(cfg)
    consts = measure_constants(grid, params, int(exp.get("constant_samples", 50)), cfg.master_seed)
    out.write("constants.json", _json(consts.as_dict()))
    rows = [("deterministic_energy", energy_monitor(simulate(problem, with_velocity=False)))]
    if problem.noise is not None:
        eps = cfg.eps if cfg.eps > 0 else 0.05
        rows.append(("stochastic_energy",
                     energy_monitor(simulate(problem, eps, seed=cfg.master_seed, with_velocity=False))))
        control = ControlPath.uniform(problem.T, np.ones(problem.noise.m), problem.noise.q)
        rows.append(("skeleton_energy", skeleton_energy_bound(solve_skeleton(control, problem), control)))
    verdicts = [(name, a.passed, a.max_slack) for name, a in rows]
    if problem.noise is not None:
        rep = verify_assumptions(problem.noise, int(exp.get("assumption_samples", 200)),
                                 cfg.master_seed, problem.T)
        verdicts.append(("noise_assumptions", rep.passed,
                         max(rep.growth - rep.K, rep.lipschitz - rep.L, rep.holder - rep.L1)))
    out.write("audits.csv", _csv(["audit", "passed", "max_slack"],
                                 [(n, int(p), float(s)) for n, p, s in verdicts]))
    failed = [n for n, p, _ in verdicts if not p]
    if failed:
        raise _Failed(f"audits failed: {', '.join(failed)}")
    return {"audits": len(verdicts)}


def cmd_modes(cfg, args, out):
    grid, params = config_grid(cfg), config_params(cfg)
    m = args.count or int(cfg.experiment.get("modes", max(cfg["noise"]["modes"], 1)))
    basis = eigenmodes_a2(params, grid, m)
    out.write("eigenvalues.csv", _csv(["index", "eigenvalue"],
                                      [(k, float(v)) for k, v in enumerate(basis.eigenvalues)]))
    for k in range(m):
        out.write(f"mode_{k:03d}.pgld", encode(basis.field(k)))
    return {"modes": m}


COMMANDS = {"simulate": cmd_simulate, "skeleton": cmd_skeleton, "action": cmd_action,
            "mc": cmd_mc, "audit": cmd_audit, "modes": cmd_modes}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgld", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pgld {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default="pgld-out", help="output directory (default: pgld-out)")
        p.add_argument("--eps", type=float, help="override the configured noise intensity")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--threads", type=int,
                       help="worker threads for ensembles (default: $PGLD_THREADS or 1)")
        if name in ("action", "mc"):
            p.add_argument("--delta", type=float, help="target threshold")
        if name == "mc":
            p.add_argument("--n-samples", type=int, help="paths per eps value")
        if name == "modes":
            p.add_argument("--count", type=int, help="number of eigenmodes")
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("pgld: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    started = _timestamp()
    try:
        cfg = load_config(args.config).with_overrides(eps=args.eps, master_seed=args.seed)
        out = Outputs(Path(args.out))
        out.write("config.toml", cfg.to_toml().encode())
        summary = COMMANDS[args.command](cfg, args, out)
        status = EXIT_OK
    except ConfigError as exc:
        print(f"pgld: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Failed as exc:
        print(f"pgld: {exc}", file=sys.stderr)
        summary, status = {"failed": str(exc)}, EXIT_NUMERICAL
    except NUMERICAL_ERRORS as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"pgld: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"pgld: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = {
        "tool": "pgld",
        "version": __version__,
        "command": args.command,
        "config_digest": cfg.digest(),
        "master_seed": cfg.master_seed,
        "eps": cfg.eps,
        "started": started,
        "finished": _timestamp(),
        "summary": summary,
        "outputs": dict(sorted(out.inventory.items())),
    }
    (out.root / "manifest.json").write_bytes(_json(manifest))
    return status


def main(argv=None):
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
