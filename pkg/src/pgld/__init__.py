"""Stochastic planetary-geostrophic ocean model: simulation, skeleton controls,
minimum-action rates and small-noise Monte Carlo."""

__version__ = "0.1.0"

from .grid import Grid, HVectorField, ScalarField, SurfaceField, build_grid, compute_norms
from .operators import ForcingSet, PhysParams, apply_a2, eigenmodes_a2, trilinear_b
from .velocity import solve_diagnostic
from .noise import NoiseModel, NoiseStream, U0Vector, verify_assumptions
from .controls import ControlPath
from .stepper import NumericalError, Problem, energy_monitor, run_ensemble, simulate
from .skeleton import PicardDivergenceError, picard_solve, solve_skeleton
from .action import ActionOptions, TargetFunctional, make_target, minimize_action
from .montecarlo import estimate_tail, girsanov_importance_sampling, ldp_fit
from .constants import measure_constants
from .snapshot import read_snapshot, write_snapshot
from .config import ConfigError, RunConfig, build_problem, load_config

__all__ = [
    "Grid", "HVectorField", "ScalarField", "SurfaceField", "build_grid", "compute_norms",
    "ForcingSet", "PhysParams", "apply_a2", "eigenmodes_a2", "trilinear_b",
    "solve_diagnostic", "NoiseModel", "NoiseStream", "U0Vector", "verify_assumptions",
    "ControlPath", "NumericalError", "Problem", "energy_monitor", "run_ensemble", "simulate",
    "PicardDivergenceError", "picard_solve", "solve_skeleton",
    "ActionOptions", "TargetFunctional", "make_target", "minimize_action",
    "estimate_tail", "girsanov_importance_sampling", "ldp_fit", "measure_constants",
    "read_snapshot", "write_snapshot", "ConfigError", "RunConfig", "build_problem", "load_config",
]
