import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import seeds
from pgld.grid import ScalarField, build_grid
from pgld.noise import (NoiseModel, NoiseStream, U0Vector, apply_sigma, hs_norm_sq_images,
                        sample_increment, verify_assumptions)
from pgld.operators import PhysParams, eigenmodes_a2

GRID = build_grid(4, 4, 3, 1, 1, 1)
MODES = eigenmodes_a2(PhysParams(), GRID, 3)


def model(kind="diagonal_lipschitz", **kw):
    return NoiseModel(MODES, np.array([1.0, 0.5, 0.25]), kind, np.array([1.0, 2.0, 0.5]), **kw)


def test_streams_are_keyed_by_seed_and_path():
    m = model()
    a = NoiseStream(3, 0).increments(m, 0.01, 50)
    np.testing.assert_array_equal(a, NoiseStream(3, 0).increments(m, 0.01, 50))
    assert not np.array_equal(a, NoiseStream(3, 1).increments(m, 0.01, 50))
    assert not np.array_equal(a, NoiseStream(4, 0).increments(m, 0.01, 50))


def test_increment_variance_is_q_dt():
    m = model()
    dW = NoiseStream(0).increments(m, 0.02, 40_000)
    np.testing.assert_allclose(dW.var(axis=0), m.q * 0.02, rtol=0.03)
    assert abs(np.corrcoef(dW.T)[0, 1]) < 0.02


def test_sample_increment_accepts_streams_and_rejects_negative_dt():
    m = model()
    u = sample_increment(m, 0.1, NoiseStream(1))
    assert isinstance(u, U0Vector) and u.coefficients.shape == (3,)
    with pytest.raises(ValueError):
        sample_increment(m, -0.1, np.random.default_rng(0))


def test_u0_norm_weights_by_inverse_variance():
    assert U0Vector(np.array([1.0, 2.0])).norm_u0(np.array([1.0, 4.0])) == pytest.approx(np.sqrt(2.0))


def test_constant_sigma_ignores_the_state():
    m = model("constant")
    u = np.array([0.3, -1.0, 2.0])
    a = m.apply_flat(0.2, np.zeros(GRID.size), u)
    b = m.apply_flat(0.2, np.random.default_rng(0).normal(size=GRID.size), u)
    np.testing.assert_allclose(a, b)


@given(seeds, st.floats(0, 3))
def test_hs_norm_equals_sum_of_basis_images(seed, t):
    m = model(time_amplitude=0.4, time_frequency=2.0, offset=0.3)
    th = ScalarField(GRID, np.random.default_rng(seed).normal(size=GRID.shape))
    assert m.hs_norm_sq(t, th.flat) == pytest.approx(hs_norm_sq_images(m, t, th), rel=1e-10)


def test_clipped_gains_are_bounded():
    m = model("linear_clipped", clip=0.2)
    th = 100 * np.random.default_rng(2).normal(size=GRID.size)
    g = m.gains(0.0, MODES.coefficients(th))
    assert np.all(np.abs(g) <= m.amplitudes * 0.2 + 1e-15)


@given(st.sampled_from(["constant", "diagonal_lipschitz", "linear_clipped"]),
       st.floats(-2, 2), st.floats(0.1, 3), st.floats(0, 0.9), st.floats(0, 6),
       st.floats(0.3, 1.0), seeds)
def test_declared_constants_bound_the_measured_quotients(kind, offset, clip, ta, tf, gamma, seed):
    m = model(kind, offset=offset, clip=clip, time_amplitude=ta, time_frequency=tf, gamma=gamma)
    rep = verify_assumptions(m, 100, seed, T=1.0)
    assert rep.passed, rep


def test_understated_constants_fail_verification():
    m = model("diagonal_lipschitz", offset=1.0, K=1e-6, L=1e-6)
    assert not verify_assumptions(m, 200, 0).passed


def test_apply_sigma_checks_grid():
    m = model()
    other = ScalarField(build_grid(3, 3, 3, 1, 1, 1), np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        apply_sigma(m, 0.0, other, U0Vector(np.zeros(3)))


@pytest.mark.parametrize("kw", [dict(kind="cubic"), dict(gamma=0.0), dict(gamma=1.5), dict(clip=0.0)])
def test_invalid_models_rejected(kw):
    kind = kw.pop("kind", "constant")
    with pytest.raises(ValueError):
        model(kind, **kw)


def test_variances_must_match_modes_and_be_positive():
    with pytest.raises(ValueError):
        NoiseModel(MODES, np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        NoiseModel(MODES, np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        verify_assumptions(model(), 50)
