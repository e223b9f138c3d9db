import numpy as np
import pytest

from helpers import small_problem
from pgld.controls import ControlPath
from pgld.skeleton import (PicardDivergenceError, picard_solve, skeleton_energy_bound,
                           solve_skeleton)
from pgld.stepper import simulate


def _control(p, pieces=5):
    return ControlPath.from_function(p.T, pieces, lambda t: np.cos(5 * t + np.arange(p.noise.m)),
                                     p.noise.q)


def test_zero_control_gives_the_noise_free_run():
    p = small_problem()
    a = solve_skeleton(ControlPath.zeros(p.T, p.noise.q), p)
    np.testing.assert_array_equal(a.snapshots, simulate(p).snapshots)


@pytest.mark.parametrize("kind", ["diagonal_lipschitz", "linear_clipped"])
def test_picard_agrees_with_direct_stepping(kind):
    p = small_problem(kind=kind, T=0.2, dt=0.01)
    c = _control(p)
    diff = solve_skeleton(c, p).sup_l2_distance(picard_solve(c, p, window_T0=0.05))
    assert diff < 1e-8


def test_constant_sigma_needs_one_effective_sweep():
    p = small_problem(kind="constant", T=0.2, dt=0.01)
    _, rep = picard_solve(_control(p), p, window_T0=0.1, return_report=True)
    assert rep.sweeps == [2, 2] and all(d[-1] == 0.0 for d in rep.differences)


def test_too_few_sweeps_raise_with_diagnostics():
    p = small_problem(T=0.2, dt=0.01)
    with pytest.raises(PicardDivergenceError) as info:
        picard_solve(_control(p), p, window_T0=0.2, max_sweeps=2)
    assert info.value.window == (0, 20)


def test_window_must_be_positive():
    p = small_problem()
    with pytest.raises(ValueError):
        picard_solve(_control(p), p, window_T0=0.0)


def test_energy_bound_holds_and_needs_a_skeleton():
    p = small_problem(T=0.2, dt=0.01)
    c = _control(p)
    assert skeleton_energy_bound(solve_skeleton(c, p), c).passed
    with pytest.raises(ValueError):
        skeleton_energy_bound(simulate(p, 0.1), c)
