"""
Run configuration: TOML loading, normalization, serialization and problem assembly.

Field entries (``theta_star``, ``mu_x``, ``mu_y``, ``theta0``, ``g``) accept a
number, an arithmetic expression string, or ``{file = "name.pgld"}`` naming a
snapshot on the configured grid (surface fields use its top layer).
Expressions may use the coordinates ``x, y, z`` and time ``t`` (where they make
sense for the field), the constants ``pi`` and ``e``, the operators
``+ - * / % **`` and the functions in ``FUNCTIONS``.
"""
from __future__ import annotations

import ast
import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from .grid import Grid, ScalarField, SurfaceField, build_grid
from .noise import KINDS, NoiseModel
from .operators import ForcingSet, PhysParams, eigenmodes_a2
from .snapshot import SnapshotError, read_snapshot
from .stepper import Problem


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Restricted expressions

FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
    "arcsin": np.arcsin, "arccos": np.arccos, "arctan": np.arctan, "arctan2": np.arctan2,
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "minimum": np.minimum, "maximum": np.maximum,
}
CONSTANTS = {"pi": math.pi, "e": math.e}

_OPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Mod, ast.Pow, ast.USub, ast.UAdd, ast.Load)


class _Floats(ast.NodeTransformer):
    # integer literals become floats so ``9**9**9`` overflows instead of hanging
    def visit_Constant(self, node):
        return ast.copy_location(ast.Constant(float(node.value)), node)


class Expression:
    """A whitelisted arithmetic expression compiled once and evaluated on arrays."""

    def __init__(self, text: str, variables=("x", "y", "z", "t")):
        self.text = text
        self.variables = tuple(variables)
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from None
        used = set()
        for node in ast.walk(tree):
            if isinstance(node, ast.Call):
                if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                    raise ConfigError(f"function not allowed in {text!r}")
                if node.keywords:
                    raise ConfigError(f"keyword arguments not allowed in {text!r}")
            elif isinstance(node, ast.Name):
                if node.id in FUNCTIONS:
                    continue
                if node.id in self.variables:
                    used.add(node.id)
                elif node.id not in CONSTANTS:
                    raise ConfigError(f"unknown name {node.id!r} in {text!r} "
                                      f"(allowed variables: {', '.join(self.variables)})")
            elif isinstance(node, ast.Constant):
                if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                    raise ConfigError(f"only numeric literals allowed in {text!r}")
            elif not isinstance(node, (ast.Expression, ast.BinOp, ast.UnaryOp) + _OPS):
                raise ConfigError(f"{type(node).__name__} not allowed in {text!r}")
        callees = {id(n.func) for n in ast.walk(tree) if isinstance(n, ast.Call)}
        for node in ast.walk(tree):
            if isinstance(node, ast.Name) and node.id in FUNCTIONS and id(node) not in callees:
                raise ConfigError(f"function {node.id!r} used as a value in {text!r}")
        tree = ast.fix_missing_locations(_Floats().visit(tree))
        self.uses = frozenset(used)
        self._code = compile(tree, "<expression>", "eval")

    def __call__(self, **values):
        env = dict(FUNCTIONS)
        env.update(CONSTANTS)
        env.update({k: values.get(k, 0.0) for k in self.variables})
        try:
            with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
                out = eval(self._code, {"__builtins__": {}}, env)
        except (ArithmeticError, FloatingPointError, ValueError, TypeError) as exc:
            raise ConfigError(f"evaluating {self.text!r} failed: {exc}") from None
        return np.asarray(out, dtype=float)


# --------------------------------------------------------------------------
# Schema

DEFAULTS = {
    "grid": {"nx": 9, "ny": 9, "nz": 5, "Lx": 1.0, "Ly": 1.0, "h": 1.0},
    "physics": {"A_h": 1.0, "A_nu": 1.0, "K_h": 1.0, "K_nu": 1.0, "beta_robin": 1.0,
                "f0": 0.0, "beta_cor": 0.0, "kappa": 1.0},
    "forcing": {"mu_x": 0.0, "mu_y": 0.0, "theta_star": 0.0, "g": 0.0, "theta0": 0.0,
                "compat_tol": 1e-8},
    "noise": {"kind": "constant", "modes": 1, "q0": 1.0, "q_decay": 0.0, "amplitudes": 1.0,
              "offset": 0.0, "clip": 1.0, "time_amplitude": 0.0, "time_frequency": 0.0,
              "gamma": 1.0},
    "time": {"T": 1.0, "dt": 0.01},
    "model": {"advection": True, "diffusion": True, "advection_scheme": "explicit"},
}
FIELD_VARIABLES = {"mu_x": ("x", "y"), "mu_y": ("x", "y"), "theta_star": ("x", "y"),
                   "theta0": ("x", "y", "z"), "g": ("x", "y", "z", "t")}
TOP_LEVEL = {"eps": 0.0, "master_seed": 0}


def _number(block, key, value, default):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{block}] {key} must be a number, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int):
            raise ConfigError(f"[{block}] {key} must be an integer, got {value!r}")
        return int(value)
    if not math.isfinite(value):
        raise ConfigError(f"[{block}] {key} must be finite")
    return float(value)


def _field_spec(key, value, base_dir: Path):
    if isinstance(value, bool):
        raise ConfigError(f"[forcing] {key}: booleans are not field specs")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ConfigError(f"[forcing] {key} must be finite")
        return float(value)
    if isinstance(value, str):
        Expression(value, FIELD_VARIABLES[key])
        return value
    if isinstance(value, dict) and set(value) == {"file"} and isinstance(value["file"], str):
        path = base_dir / value["file"]
        if not path.is_file():
            raise ConfigError(f"[forcing] {key}: file {value['file']!r} not found")
        return {"file": value["file"]}
    raise ConfigError(f"[forcing] {key}: expected a number, an expression or {{file = ...}}")


def _normalize(raw: dict, base_dir: Path) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    unknown = set(raw) - set(DEFAULTS) - set(TOP_LEVEL) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    out = {}
    for block, defaults in DEFAULTS.items():
        given = raw.get(block, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{block}] must be a table")
        extra = set(given) - set(defaults)
        if extra:
            raise ConfigError(f"[{block}] unknown keys: {sorted(extra)}")
        norm = {}
        for key, default in defaults.items():
            value = given.get(key, default)
            if block == "forcing" and key in FIELD_VARIABLES:
                norm[key] = _field_spec(key, value, base_dir)
            elif block == "noise" and key == "amplitudes":
                if isinstance(value, list):
                    norm[key] = [_number(block, key, v, 1.0) for v in value]
                else:
                    norm[key] = _number(block, key, value, 1.0)
            elif isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"[{block}] {key} must be true or false")
                norm[key] = value
            elif isinstance(default, str):
                if not isinstance(value, str):
                    raise ConfigError(f"[{block}] {key} must be a string")
                norm[key] = value
            else:
                norm[key] = _number(block, key, value, default)
        out[block] = norm
    exp = raw.get("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("[experiment] must be a table")
    out["experiment"] = copy.deepcopy(exp)
    for key, default in TOP_LEVEL.items():
        out[key] = _number("top", key, raw.get(key, default), default)
    _check(out)
    return out


def _check(c):
    g = c["grid"]
    if min(g["nx"], g["ny"], g["nz"]) < 3:
        raise ConfigError("[grid] needs at least 3 nodes per direction")
    if min(g["Lx"], g["Ly"], g["h"]) <= 0:
        raise ConfigError("[grid] extents must be positive")
    t = c["time"]
    if t["T"] <= 0 or t["dt"] <= 0:
        raise ConfigError("[time] T and dt must be positive")
    n = round(t["T"] / t["dt"])
    if n < 1 or abs(n * t["dt"] - t["T"]) > 1e-12 * max(1.0, t["T"]):
        raise ConfigError(f"[time] dt={t['dt']} does not divide T={t['T']}")
    nz = c["noise"]
    if nz["kind"] not in KINDS:
        raise ConfigError(f"[noise] kind must be one of {KINDS}")
    if nz["modes"] < 0:
        raise ConfigError("[noise] modes must be non-negative")
    if isinstance(nz["amplitudes"], list) and len(nz["amplitudes"]) != nz["modes"]:
        raise ConfigError("[noise] amplitudes list needs one entry per mode")
    if nz["q0"] <= 0:
        raise ConfigError("[noise] q0 must be positive")
    if c["model"]["advection_scheme"] not in ("explicit", "midpoint"):
        raise ConfigError("[model] advection_scheme must be 'explicit' or 'midpoint'")
    if c["eps"] < 0:
        raise ConfigError("eps must be non-negative")


# --------------------------------------------------------------------------
# RunConfig


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "RunConfig":
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        return cls(_normalize(raw, base), base)

    @classmethod
    def from_toml(cls, text: str, base_dir=None) -> "RunConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(raw, base_dir)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.data)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def eps(self) -> float:
        return self.data["eps"]

    @property
    def master_seed(self) -> int:
        return self.data["master_seed"]

    @property
    def experiment(self) -> dict:
        return self.data["experiment"]

    def with_overrides(self, **top) -> "RunConfig":
        d = copy.deepcopy(self.data)
        for k, v in top.items():
            if v is not None:
                d[k] = v
        return RunConfig.from_dict(d, self.base_dir)

    def referenced_files(self):
        return sorted(v["file"] for v in self.data["forcing"].values() if isinstance(v, dict))

    def digest(self) -> str:
        """Content hash of the normalized config and every file it references."""
        h = hashlib.sha256(json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode())
        for name in self.referenced_files():
            h.update(b"\0" + name.encode() + b"\0")
            h.update(hashlib.sha256((self.base_dir / name).read_bytes()).digest())
        return h.hexdigest()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return RunConfig.from_toml(text, path.parent)


# --------------------------------------------------------------------------
# Assembly


def config_grid(cfg: RunConfig) -> Grid:
    g = cfg["grid"]
    return build_grid(g["nx"], g["ny"], g["nz"], g["Lx"], g["Ly"], g["h"])


def config_params(cfg: RunConfig) -> PhysParams:
    return PhysParams(h=cfg["grid"]["h"], **cfg["physics"])


def _from_file(cfg, key, grid) -> ScalarField:
    name = cfg["forcing"][key]["file"]
    try:
        f = read_snapshot(cfg.base_dir / name)
    except (OSError, SnapshotError) as exc:
        raise ConfigError(f"[forcing] {key}: {exc}") from None
    fg = f.grid
    if (fg.nx, fg.ny, fg.nz) != (grid.nx, grid.ny, grid.nz) or not np.allclose(
            (fg.Lx, fg.Ly, fg.h), (grid.Lx, grid.Ly, grid.h), rtol=1e-12, atol=0):
        raise ConfigError(f"[forcing] {key}: snapshot grid does not match [grid]")
    return f


def _surface(cfg, key, grid) -> SurfaceField:
    spec = cfg["forcing"][key]
    if isinstance(spec, float):
        return SurfaceField.constant(grid, spec)
    if isinstance(spec, dict):
        return _from_file(cfg, key, grid).surface()
    expr = Expression(spec, FIELD_VARIABLES[key])
    return SurfaceField.from_function(grid, lambda X, Y: expr(x=X, y=Y))


def wall_flux_mismatch(expr: Expression, grid: Grid, step: float = 1e-3) -> float:
    """Largest normal derivative of a surface expression on the side walls.

    Central differences straddling each wall, Richardson-extrapolated, at the
    grid's wall nodes and at midpoints between them.
    """
    def d(along, fixed, wall_x):
        def central(eta):
            if wall_x:
                return (expr(x=fixed + eta, y=along) - expr(x=fixed - eta, y=along)) / (2 * eta)
            return (expr(x=along, y=fixed + eta) - expr(x=along, y=fixed - eta)) / (2 * eta)
        return (4.0 * central(step / 2) - central(step)) / 3.0

    def dense(n, L):
        s = np.linspace(0.0, L, n)
        return np.sort(np.concatenate([s, 0.5 * (s[1:] + s[:-1])]))

    ys, xs = dense(grid.ny, grid.Ly), dense(grid.nx, grid.Lx)
    vals = [d(ys, 0.0, True), d(ys, grid.Lx, True), d(xs, 0.0, False), d(xs, grid.Ly, False)]
    return float(max(np.max(np.abs(v)) for v in vals))


def build_forcing(cfg: RunConfig, grid: Grid) -> ForcingSet:
    f = cfg["forcing"]
    mu_x, mu_y = _surface(cfg, "mu_x", grid), _surface(cfg, "mu_y", grid)
    theta_star = _surface(cfg, "theta_star", grid)
    tol = f["compat_tol"]
    check = True
    if isinstance(f["theta_star"], str):
        mismatch = wall_flux_mismatch(Expression(f["theta_star"], ("x", "y")), grid)
        if mismatch > tol:
            raise ConfigError(f"[forcing] theta_star violates the side-wall no-flux condition "
                              f"(normal derivative {mismatch:.3e} > {tol:.1e})")
        check = False
    g = _source(cfg, grid)
    try:
        return ForcingSet(mu_x, mu_y, theta_star, g, tol, check)
    except ValueError as exc:
        raise ConfigError(f"[forcing] {exc}") from None


def _source(cfg, grid):
    spec = cfg["forcing"]["g"]
    if isinstance(spec, float):
        if spec == 0.0:
            return None
        vals = np.full(grid.size, spec)
        return lambda t: vals
    if isinstance(spec, dict):
        vals = _from_file(cfg, "g", grid).flat.copy()
        return lambda t: vals
    expr = Expression(spec, FIELD_VARIABLES["g"])
    X, Y, Z = grid.mesh()
    if "t" not in expr.uses:
        vals = np.broadcast_to(expr(x=X, y=Y, z=Z), grid.shape).ravel().copy()
        return lambda t: vals
    return lambda t: np.broadcast_to(expr(x=X, y=Y, z=Z, t=t), grid.shape).ravel()


def build_theta0(cfg: RunConfig, grid: Grid) -> np.ndarray:
    spec = cfg["forcing"]["theta0"]
    if isinstance(spec, float):
        return np.full(grid.size, spec)
    if isinstance(spec, dict):
        return _from_file(cfg, "theta0", grid).flat.copy()
    expr = Expression(spec, FIELD_VARIABLES["theta0"])
    return ScalarField.from_function(grid, lambda X, Y, Z: expr(x=X, y=Y, z=Z)).flat.copy()


def variances(cfg: RunConfig) -> np.ndarray:
    """``q_j = q0 * j**(-q_decay)`` for ``j = 1..modes``."""
    n = cfg["noise"]
    j = np.arange(1, n["modes"] + 1, dtype=float)
    return n["q0"] * j ** (-n["q_decay"])


def build_noise(cfg: RunConfig, grid: Grid, params: PhysParams) -> Optional[NoiseModel]:
    n = cfg["noise"]
    if n["modes"] == 0:
        return None
    modes = eigenmodes_a2(params, grid, n["modes"])
    amps = n["amplitudes"]
    amps = np.full(n["modes"], amps) if isinstance(amps, float) else np.asarray(amps, float)
    try:
        return NoiseModel(modes, variances(cfg), n["kind"], amps, n["offset"], n["clip"],
                          n["time_amplitude"], n["time_frequency"], n["gamma"])
    except ValueError as exc:
        raise ConfigError(f"[noise] {exc}") from None


def build_problem(cfg: RunConfig) -> Problem:
    grid = config_grid(cfg)
    try:
        params = config_params(cfg)
    except ValueError as exc:
        raise ConfigError(f"[physics] {exc}") from None
    forcing = build_forcing(cfg, grid)
    noise = build_noise(cfg, grid, params)
    theta0 = build_theta0(cfg, grid)
    m, t = cfg["model"], cfg["time"]
    try:
        return Problem(grid, params, forcing, noise, theta0, t["T"], t["dt"],
                       m["advection"], m["diffusion"], m["advection_scheme"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
