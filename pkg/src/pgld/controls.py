"""Piecewise-constant Cameron-Martin controls."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Control ``chi`` equal to ``values[p]`` on ``(knots[p], knots[p+1]]``.

    ``values`` has shape ``(P, m)``, entries are U-coefficients in the carrier
    basis and ``q`` holds the noise variances used for the U0 norm.
    """
    knots: np.ndarray
    values: np.ndarray
    q: np.ndarray
    radius: Optional[float] = None

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).copy()
        values = np.atleast_2d(np.asarray(self.values, dtype=float)).copy()
        q = np.asarray(self.q, dtype=float).copy()
        if knots.ndim != 1 or len(knots) < 2:
            raise ValueError("need at least two knots")
        if knots[0] != 0.0 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must start at 0 and increase strictly")
        if values.shape != (len(knots) - 1, len(q)):
            raise ValueError(f"values must have shape {(len(knots) - 1, len(q))}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        if np.any(q <= 0):
            raise ValueError("q must be positive")
        for a in (knots, values, q):
            a.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "q", q)
        if self.radius is not None and self.energy > self.radius * (1 + 1e-12):
            raise ValueError(f"control energy {self.energy:.6g} exceeds radius {self.radius}")

    @classmethod
    def zeros(cls, T, q, pieces=1):
        q = np.asarray(q, dtype=float)
        return cls(np.linspace(0.0, T, pieces + 1), np.zeros((pieces, len(q))), q)

    @classmethod
    def uniform(cls, T, values, q):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(np.linspace(0.0, T, len(values) + 1), values, q)

    @classmethod
    def from_function(cls, T, pieces, fun, q):
        """Sample ``fun(t) -> (m,)`` at piece midpoints."""
        knots = np.linspace(0.0, T, pieces + 1)
        mids = 0.5 * (knots[1:] + knots[:-1])
        return cls(knots, np.array([np.atleast_1d(fun(t)) for t in mids]), q)

    @property
    def T(self):
        return float(self.knots[-1])

    @property
    def pieces(self):
        return len(self.knots) - 1

    @property
    def m(self):
        return len(self.q)

    @property
    def durations(self):
        return np.diff(self.knots)

    @cached_property
    def energy(self):
        """``1/2 sum_p |chi_p|_{U0}^2 (tau_p - tau_{p-1})``."""
        return float(0.5 * np.sum(self.durations * np.sum(self.values ** 2 / self.q, axis=1)))

    def with_values(self, values):
        return ControlPath(self.knots, values, self.q)

    def refine(self, factor=2):
        """Same control on a finer knot grid."""
        k = self.knots
        new = np.concatenate([np.linspace(k[p], k[p + 1], factor + 1)[:-1] for p in range(self.pieces)]
                             + [k[-1:]])
        return ControlPath(new, np.repeat(self.values, factor, axis=0), self.q)

    def concatenate(self, other):
        """This control on ``[0, T]`` followed by ``other`` shifted to ``[T, T + T']``."""
        knots = np.concatenate([self.knots, self.T + other.knots[1:]])
        return ControlPath(knots, np.vstack([self.values, other.values]), self.q)

    def step_matrix(self, dt, n_steps):
        """Matrix ``M`` with step averages ``M @ values`` over ``[n dt, (n+1) dt]``."""
        t0 = np.arange(n_steps)[:, None] * dt
        t1 = t0 + dt
        lo = np.maximum(t0, self.knots[None, :-1])
        hi = np.minimum(t1, self.knots[None, 1:])
        return np.clip(hi - lo, 0.0, None) / dt

    def step_values(self, dt, n_steps):
        return self.step_matrix(dt, n_steps) @ self.values

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["knot", "mode", "value"])
        for p in range(self.pieces):
            for j in range(self.m):
                w.writerow([repr(float(self.knots[p + 1])), j, repr(float(self.values[p, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, q):
        """Inverse of :meth:`to_csv`; each row gives the value on the piece ending at ``knot``."""
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty control file")
        ends = sorted({float(r["knot"]) for r in rows})
        m = len(np.atleast_1d(q))
        values = np.zeros((len(ends), m))
        index = {t: p for p, t in enumerate(ends)}
        for r in rows:
            j = int(r["mode"])
            if not 0 <= j < m:
                raise ValueError(f"mode index {j} out of range")
            values[index[float(r["knot"])], j] = float(r["value"])
        return cls(np.concatenate([[0.0], ends]), values, q)
