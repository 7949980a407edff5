import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_stab import (ConfigError, ControlRegion, EigenBasis, TruncationError, apply_feedback,
                       build_feedback, calibrate_spectral_constant, closed_loop_drift, parse_region,
                       uncontrolled_drift)
from spde_stab.feedback import feedback_gain

PI = math.pi


def full_law(lam, M=10):
    b = EigenBasis.on_interval(PI, M)
    region = ControlRegion.full(PI)
    cal = calibrate_spectral_constant(region, b, [lam])
    return build_feedback(lam, region, b, cal), b


def test_gain_formula_examples():
    law, _ = full_law(4.0)
    assert law.calibration.constant_C == 1.0
    assert law.n_low == 2
    assert law.gain == pytest.approx(math.e ** 2 * 4, rel=1e-15)
    law1, _ = full_law(1.0)
    assert law1.gain == pytest.approx(math.e, rel=1e-15)
    assert law1.low_rate_bound() == pytest.approx(1.0, rel=1e-14)


def test_gain_half_domain(half_setup):
    basis, region, cal = half_setup
    law = build_feedback(9.0, region, basis, cal)
    assert law.n_low == 3
    # exact from the returned constant, and within the bisection tolerance of
    # the independently computed value
    assert law.gain == feedback_gain(9.0, cal.constant_C)
    assert law.gain == pytest.approx(21389.92346264988, rel=2e-5)


def test_build_feedback_errors(half_setup):
    basis, region, cal = half_setup
    with pytest.raises(ConfigError):
        build_feedback(10.0, region, basis, cal)  # not calibrated
    with pytest.raises(ConfigError):
        build_feedback(0.5, region, basis, cal, gain=1.0)
    small = EigenBasis.on_interval(PI, 5)
    with pytest.raises(TruncationError):
        build_feedback(9.0, region, small, cal, gain=1.0)
    with pytest.raises(ConfigError):
        build_feedback(9.0, region, basis, cal, gain=-1.0)


def test_gain_override_flagged(half_setup):
    basis, region, cal = half_setup
    law = build_feedback(9.0, region, basis, cal, gain=5.0)
    assert law.gain_override and law.gain == 5.0


def test_hypothesis_check():
    law, _ = full_law(4.0)
    assert law.hypothesis_holds(a=1.0, c=0.0)
    assert not law.hypothesis_holds(a=2.0, c=0.1)  # a^2 + 2c = 4.2
    with pytest.raises(ConfigError, match="lambda"):
        law.require_hypothesis(2.0, 0.1)
    law1, _ = full_law(1.0)
    assert not law1.hypothesis_holds(0.1, 0.0)  # needs lambda > 2 tau_1 = 2


def test_closed_loop_drift_example():
    b = EigenBasis.on_interval(PI, 2)
    region = parse_region("0-pi/2")
    cal = calibrate_spectral_constant(region, b, [1])
    law = build_feedback(1.0, region, b, cal, gain=10.0)
    A = closed_loop_drift(law, 0.0, b)
    expected = [[-1 - 10 * 0.5, 0.0], [-10 * 4 / (3 * PI), -4.0]]
    np.testing.assert_allclose(A.matrix, expected, atol=1e-13)


def test_uncontrolled_drift_diagonal():
    b = EigenBasis.on_interval(PI, 4)
    A = uncontrolled_drift(b, 0.5)
    np.testing.assert_allclose(A.matrix, np.diag([-0.5, -3.5, -8.5, -15.5]))
    assert A.n_low == 0
    assert A.spectral_abscissa() == -0.5


def test_basis_mismatch():
    law, _ = full_law(4.0)
    with pytest.raises(ValueError):
        closed_loop_drift(law, 0.0, EigenBasis.on_interval(PI, 12))


def test_apply_feedback_example():
    law, _ = full_law(4.0, M=4)
    y = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(apply_feedback(law, y), -law.gain * np.array([1, 2, 0, 0]))


@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6),
       st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6),
       st.floats(-10, 10), st.floats(-10, 10))
def test_apply_feedback_linear(u, v, s, t):
    law, _ = full_law(4.0, M=6)
    u, v = np.array(u), np.array(v)
    lhs = apply_feedback(law, s * u + t * v)
    rhs = s * apply_feedback(law, u) + t * apply_feedback(law, v)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-6 * law.gain)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.2 * PI), st.floats(0.75 * PI, PI), st.sampled_from([1, 4, 9, 16, 25]),
       st.floats(-2.0, 2.0))
def test_low_block_rate(a, b, lam, c):
    """Every low-block eigenvalue of the calibrated closed loop is <= -(lam + tau_1 - c)."""
    basis = EigenBasis.on_interval(PI, 12)
    region = ControlRegion(((a, b),))
    cal = calibrate_spectral_constant(region, basis, [lam])
    law = build_feedback(lam, region, basis, cal)
    drift = closed_loop_drift(law, c, basis)
    low = np.linalg.eigvalsh(drift.low_block)
    tol = 1e-9 * law.gain
    assert low.max() <= -(lam + 1.0 - c) + tol


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.2 * PI), st.floats(0.75 * PI, PI), st.sampled_from([4, 9, 16]),
       st.floats(-1.0, 1.0))
def test_full_spectrum_negative_under_hypothesis(a, b, lam, c):
    basis = EigenBasis.on_interval(PI, 12)
    region = ControlRegion(((a, b),))
    cal = calibrate_spectral_constant(region, basis, [lam])
    law = build_feedback(lam, region, basis, cal)
    assert law.hypothesis_holds(0.5, c)
    drift = closed_loop_drift(law, c, basis)
    assert drift.spectral_abscissa() < 0
    # the block structure gives the same spectrum as a dense solve
    dense = np.sort(np.linalg.eigvals(drift.matrix).real)
    np.testing.assert_allclose(np.sort(drift.eigenvalues()), dense, rtol=1e-8, atol=1e-8 * law.gain)
