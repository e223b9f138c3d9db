import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pgld.controls import ControlPath

finite = st.floats(-50, 50, allow_nan=False)


@st.composite
def controls(draw, m=None):
    m = m or draw(st.integers(1, 3))
    P = draw(st.integers(1, 8))
    gaps = draw(arrays(float, P, elements=st.floats(0.05, 1.0)))
    knots = np.concatenate([[0.0], np.cumsum(gaps)])
    vals = draw(arrays(float, (P, m), elements=finite))
    q = draw(arrays(float, m, elements=st.floats(0.1, 2.0)))
    return ControlPath(knots, vals, q)


def test_energy_of_a_constant_control():
    c = ControlPath.uniform(2.0, np.array([[1.0, 2.0]]), np.array([1.0, 4.0]))
    assert c.energy == pytest.approx(0.5 * 2.0 * (1.0 + 1.0))


@given(controls(), st.integers(1, 200))
def test_step_averages_preserve_the_integral(c, n_steps):
    dt = c.T / n_steps
    integral = np.sum(c.values * c.durations[:, None], axis=0)
    np.testing.assert_allclose(c.step_values(dt, n_steps).sum(axis=0) * dt, integral,
                               rtol=1e-9, atol=1e-9)


@given(controls())
def test_csv_round_trip(c):
    back = ControlPath.from_csv(c.to_csv(), c.q)
    np.testing.assert_array_equal(back.values, c.values)
    np.testing.assert_allclose(back.knots, c.knots, rtol=0, atol=0)


@given(controls(), st.integers(2, 4))
def test_refinement_keeps_energy_and_step_averages(c, factor):
    r = c.refine(factor)
    assert r.pieces == factor * c.pieces
    assert r.energy == pytest.approx(c.energy, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(r.step_values(c.T / 64, 64), c.step_values(c.T / 64, 64),
                               rtol=1e-9, atol=1e-9)


@given(controls(m=2), controls(m=2))
def test_concatenation_adds_energies(a, b):
    b = ControlPath(b.knots, b.values, a.q)
    ab = a.concatenate(b)
    assert ab.T == pytest.approx(a.T + b.T)
    assert ab.energy == pytest.approx(a.energy + b.energy, rel=1e-12, abs=1e-12)


def test_from_function_samples_midpoints():
    c = ControlPath.from_function(1.0, 4, lambda t: [t, -t], np.ones(2))
    np.testing.assert_allclose(c.values[:, 0], [0.125, 0.375, 0.625, 0.875])


def test_radius_is_enforced():
    with pytest.raises(ValueError, match="radius"):
        ControlPath(np.array([0.0, 1.0]), np.array([[3.0]]), np.ones(1), radius=1.0)
    ControlPath(np.array([0.0, 1.0]), np.array([[1.0]]), np.ones(1), radius=1.0)


@pytest.mark.parametrize("knots,values", [([0.0], np.zeros((0, 1))), ([0.1, 1.0], [[1.0]]),
                                          ([0.0, 1.0, 0.5], [[1.0], [1.0]]),
                                          ([0.0, 1.0], [[np.nan]]), ([0.0, 1.0], [[1.0, 2.0]])])
def test_malformed_controls_rejected(knots, values):
    with pytest.raises(ValueError):
        ControlPath(np.array(knots), np.array(values), np.ones(1))


def test_empty_csv_rejected():
    with pytest.raises(ValueError):
        ControlPath.from_csv("knot,mode,value\n", np.ones(1))
