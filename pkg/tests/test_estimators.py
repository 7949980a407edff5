import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spde_stab import (DegenerateFitError, EigenBasis, SimConfig, UnreliableFitWarning,
                       convergence_order, estimate_as_exponent, fit_mean_square_decay,
                       simulate_ensemble, sup_statistic, uncontrolled_drift)
from spde_stab.estimators import (DECAY_HEADER, decay_row, fit_log_linear, strong_errors,
                                  write_decay_report)
from spde_stab.sde import Ensemble

PI = math.pi


def fake_ensemble(times, norm_sq):
    norm_sq = np.atleast_2d(norm_sq)
    P = norm_sq.shape[0]
    return Ensemble(times, norm_sq, None, 0, np.zeros((P, 1)), np.zeros(P))


@given(st.one_of(st.floats(-20, -0.1), st.floats(0.1, 5)), st.floats(-3, 3))
def test_fit_recovers_exponential(rate, logc):
    t = np.linspace(0, 2, 41)
    f = fit_log_linear(t, np.exp(logc + rate * t)[None, :], (0.4, 2.0))
    assert f.exponent == pytest.approx(rate, abs=1e-9)
    assert f.intercept == pytest.approx(logc, abs=1e-9)


def test_window_rules():
    t = np.linspace(0, 5, 501)
    y = np.exp(-t)[None, :]
    with pytest.raises(ValueError, match="transient"):
        fit_log_linear(t, y, (0.5, 5.0))
    with pytest.raises(ValueError):
        fit_log_linear(t, y, (1.0, 6.0))
    with pytest.raises(ValueError):
        fit_log_linear(t, y, (2.0, 1.0))
    f = fit_mean_square_decay(fake_ensemble(t, np.repeat(y, 100, axis=0)))
    assert f.window == (1.0, 5.0)


def test_min_paths():
    t = np.linspace(0, 1, 11)
    with pytest.raises(ValueError, match="paths"):
        fit_mean_square_decay(fake_ensemble(t, np.exp(-t)))


def test_degenerate_and_unreliable():
    t = np.linspace(0, 1, 11)
    with pytest.raises(DegenerateFitError):
        fit_log_linear(t, np.zeros((3, 11)), (0.2, 1.0))
    noisy = np.exp(np.where(np.arange(11) % 2 == 0, 0.0, 3.0))[None, :]
    with pytest.warns(UnreliableFitWarning):
        f = fit_log_linear(t, noisy, (0.2, 1.0))
    assert f.r_squared < 0.9


def test_stderr_scales_with_paths():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    cfg = SimConfig(0.5, 0.0, 0.01, 1.0, 1, seed=9, n_paths=8000)
    ens = simulate_ensemble(cfg, d, [1.0])
    half = fake_ensemble(ens.times, ens.norm_sq[:4000])
    full = fit_mean_square_decay(ens)
    f_half = fit_mean_square_decay(half)
    assert f_half.stderr / full.stderr == pytest.approx(math.sqrt(2), rel=0.2)
    # true exponent -2 + a^2 = -1.75
    assert abs(full.exponent + 1.75) <= 4 * full.stderr


def test_as_exponent_deterministic():
    t = np.linspace(0, 10, 101)
    ens = fake_ensemble(t, np.stack([np.exp(-3 * t), np.exp(-5 * t)]))
    s = estimate_as_exponent(ens, 10.0)
    np.testing.assert_allclose(s.values, [-3, -5])
    assert s.max == pytest.approx(-3.0)
    with pytest.raises(ValueError, match="t_eval"):
        estimate_as_exponent(ens, 10.0, expected_rate=1.0)  # 2 log 10 / 10 = 0.46
    with pytest.raises(ValueError):
        estimate_as_exponent(ens, 3.33)


def test_as_exponent_excludes_zero_paths():
    t = np.linspace(0, 1, 11)
    n = np.stack([np.exp(-t), np.zeros(11)])
    with pytest.warns(RuntimeWarning):
        s = estimate_as_exponent(fake_ensemble(t, n), 1.0)
    assert s.excluded == 1 and len(s.values) == 1


def test_sup_statistic():
    t = np.linspace(0, 1, 3)
    ens = fake_ensemble(t, np.array([[1.0, 3.0, 2.0], [5.0, 1.0, 1.0]]))
    assert sup_statistic(ens) == 4.0
    assert sup_statistic(ens, 0.5) == 2.0


def test_strong_errors_zero_noise_free_structure():
    """With a deterministic-looking setup the error sequence must decrease with dt."""
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    cfg = SimConfig(1.0, 0.0, 2 ** -4, 1.0, 1, scheme="euler_maruyama", n_paths=50, seed=1)
    dts, errs = strong_errors(cfg, d, [1.0], [2 ** -4, 2 ** -6, 2 ** -8])
    assert np.all(np.diff(errs) < 0)
    with pytest.raises(ValueError):
        strong_errors(cfg, d, [1.0], [0.3, 0.1])
    with pytest.raises(ValueError):
        strong_errors(cfg, d, [1.0], [2 ** -4, 2 ** -3])


def test_convergence_orders_small():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    levels = [2 ** -k for k in range(5, 10)]
    cfg = SimConfig(1.0, 0.0, levels[0], 1.0, 1, n_paths=200, seed=4)
    em = convergence_order(cfg, d, [1.0], levels, "euler_maruyama")
    mil = convergence_order(cfg, d, [1.0], levels, "milstein")
    assert 0.3 < em < 0.7
    assert 0.8 < mil < 1.2


def test_convergence_order_undetermined():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    cfg = SimConfig(0.0, 0.0, 2 ** -4, 1.0, 1, n_paths=2, deterministic=True)
    # y0 = 0 has zero error everywhere
    with pytest.warns(RuntimeWarning):
        assert math.isnan(convergence_order(cfg, d, [0.0], [2 ** -4, 2 ** -5], "milstein"))


def test_decay_report(tmp_path):
    t = np.linspace(0, 1, 11)
    f = fit_log_linear(t, np.exp(-2 * t)[None, :], (0.2, 1.0))
    p = tmp_path / "decay.csv"
    write_decay_report(p, [decay_row("mean_square", f, seed=3), decay_row("sup", exponent=1.5)])
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(DECAY_HEADER)
    assert lines[1].split(",")[0] == "mean_square" and lines[1].endswith(",1,3")
    assert float(lines[1].split(",")[1]) == pytest.approx(-2.0)
    assert lines[2] == "sup,1.5,,,,,,"
