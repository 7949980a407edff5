import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_stab import (BlowUpError, ConfigError, EigenBasis, SimConfig, build_feedback,
                       calibrate_spectral_constant, closed_loop_drift, exact_transform_path,
                       parse_region, simulate_ensemble, simulate_path, step_euler, step_milstein,
                       uncontrolled_drift)
from spde_stab.parallel import path_chunks, path_stream
from spde_stab.propagator import Propagator
from spde_stab.sde import brownian_increments, time_grid

PI = math.pi


def test_step_examples():
    A = np.array([[-1.0]])
    assert step_euler([2.0], A, 2.0, 0.01, 0.05)[0] == pytest.approx(2.18, abs=1e-14)
    # 2 - 0.02 + 0.2 + (4/2) * 2 * (0.0025 - 0.01)
    assert step_milstein([2.0], A, 2.0, 0.01, 0.05)[0] == pytest.approx(2.15, abs=1e-14)


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_euler([1.0], np.array([[-1.0]]), 1.0, 0.0, 0.1)


def test_stacked_steps_match_single():
    A = np.array([[-1.0, 0.2], [0.0, -3.0]])
    Y = np.array([[1.0, 2.0], [0.5, -1.0]])
    dW = np.array([0.1, -0.3])
    out = step_milstein(Y, A, 0.7, 0.01, dW)
    for i in range(2):
        np.testing.assert_allclose(out[i], step_milstein(Y[i], A, 0.7, 0.01, dW[i]), rtol=1e-15)


def test_time_grid():
    np.testing.assert_allclose(time_grid(0.25, 1.0), [0, 0.25, 0.5, 0.75, 1.0])
    g = time_grid(0.3, 1.0)
    np.testing.assert_allclose(g, [0, 0.3, 0.6, 0.9, 1.0])


def test_config_validation():
    with pytest.raises(ConfigError, match="dt"):
        SimConfig(1.0, 0.0, 0.0, 1.0, 4)
    with pytest.raises(ConfigError, match="noise_intensity"):
        SimConfig(0.0, 0.0, 0.01, 1.0, 4)
    SimConfig(0.0, 0.0, 0.01, 1.0, 4, deterministic=True)
    with pytest.raises(ConfigError, match="scheme"):
        SimConfig(1.0, 0.0, 0.01, 1.0, 4, scheme="rk4")
    with pytest.raises(ConfigError, match="truncation"):
        SimConfig(1.0, 0.0, 0.01, 1.0, 0)


def test_explicit_scheme_stability_check():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 20), 0.0)  # rho = 400
    cfg = SimConfig(1.0, 0.0, 0.01, 1.0, 20, scheme="euler_maruyama")
    with pytest.raises(ConfigError, match="exact_transform"):
        simulate_path(cfg, d, np.eye(20)[0], 0)


def test_blow_up_reports_time_and_path():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    cfg = SimConfig(50.0, 0.0, 0.01, 50.0, 1, scheme="euler_maruyama", n_paths=3)
    with pytest.raises(BlowUpError) as info:
        simulate_ensemble(cfg, d, [1.0], workers=1)
    assert info.value.time is not None and info.value.time > 0
    assert info.value.path_index in (0, 1, 2)


def test_philox_streams_independent_of_order():
    a = path_stream(7, 3).standard_normal(5)
    path_stream(7, 0).standard_normal(100)
    np.testing.assert_array_equal(a, path_stream(7, 3).standard_normal(5))
    assert not np.array_equal(a, path_stream(7, 4).standard_normal(5))
    assert not np.array_equal(a, path_stream(8, 3).standard_normal(5))
    with pytest.raises(ValueError):
        path_stream(-1, 0)


def test_chunks_fixed_size():
    ch = path_chunks(300, 128)
    assert [len(c) for c in ch] == [128, 128, 44]
    assert ch[2][0] == 256


@pytest.mark.parametrize("scheme", ["euler_maruyama", "milstein", "exact_transform"])
def test_workers_do_not_change_output(scheme):
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 3), 0.0)
    cfg = SimConfig(1.0, 0.0, 0.01, 0.5, 3, scheme=scheme, seed=11, n_paths=300)
    y0 = np.array([1.0, 0.5, -0.2])
    e1 = simulate_ensemble(cfg, d, y0, workers=1)
    e4 = simulate_ensemble(cfg, d, y0, workers=4)
    np.testing.assert_array_equal(e1.norm_sq, e4.norm_sq)
    np.testing.assert_array_equal(e1.final_states, e4.final_states)


def test_ensemble_matches_single_paths():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 2), 0.2)
    cfg = SimConfig(0.8, 0.2, 0.05, 1.0, 2, seed=5, n_paths=140)
    ens = simulate_ensemble(cfg, d, [1.0, 1.0], workers=3, keep=[0, 139])
    tr = simulate_path(cfg, d, [1.0, 1.0], 139)
    np.testing.assert_array_equal(ens.trajectories[139].states, tr.states)
    np.testing.assert_array_equal(ens.norm_sq[139], tr.norm_sq)


def test_noise_replay_across_schemes():
    """The same path index sees the same Brownian path under every scheme."""
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    ws = []
    for scheme in ("euler_maruyama", "milstein", "exact_transform"):
        cfg = SimConfig(1.0, 0.0, 0.01, 1.0, 1, scheme=scheme, seed=3)
        ws.append(simulate_path(cfg, d, [1.0], 17).brownian)
    np.testing.assert_array_equal(ws[0], ws[1])
    np.testing.assert_array_equal(ws[0], ws[2])
    inc = brownian_increments(3, 17, np.diff(time_grid(0.01, 1.0)))
    np.testing.assert_allclose(ws[0][1:], np.cumsum(inc), rtol=0, atol=1e-15)


def test_replay_given_increments():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), 0.0)
    cfg = SimConfig(1.0, 0.0, 0.5, 1.0, 1)
    tr = simulate_path(cfg, d, [1.0], 0, increments=[0.1, -0.4])
    expected = math.exp(-0.3 - 0.5 - 1.0)  # exp(W - t/2) exp(-tau_1 t) at t = 1
    assert tr.states[-1, 0] == pytest.approx(expected, rel=1e-14)


def test_exact_transform_path_closed_form():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 2), 0.5)
    t = np.array([0.0, 0.5, 1.0])
    W = np.array([0.0, 0.3, -0.2])
    tr = exact_transform_path([1.0, 2.0], d, 1.5, t, W)
    scale = np.exp(1.5 * W - 0.5 * 2.25 * t)
    np.testing.assert_allclose(tr.states[:, 0], scale * np.exp(-0.5 * t), rtol=1e-14)
    np.testing.assert_allclose(tr.states[:, 1], 2 * scale * np.exp(-3.5 * t), rtol=1e-14)


def half_drift(lam=9, M=12, c=0.0):
    b = EigenBasis.on_interval(PI, M)
    region = parse_region("0-pi/2")
    cal = calibrate_spectral_constant(region, b, [1, 4, 9, 16, 25, 36])
    return closed_loop_drift(build_feedback(lam, region, b, cal), c, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 3.0), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_exact_norm_positive(seed, a, y0):
    y0 = np.array(y0)
    if not np.any(y0):
        y0[0] = 1.0
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 4), 0.0)
    cfg = SimConfig(a, 0.0, 0.05, 1.0, 4, seed=seed)
    tr = simulate_path(cfg, d, y0, 0)
    assert np.all(tr.norm_sq > 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 3.0), st.floats(0.01, 2.0))
def test_scalar_noise_commutes(seed, a, t):
    """exp(aW - a^2 t/2) commutes with expm(At): transforming before or after gives one answer."""
    d = half_drift()
    E = Propagator(d).matrix(t)
    y0 = np.linspace(1, -1, 12)
    W = np.random.default_rng(seed).normal(0, math.sqrt(t))
    s = math.exp(a * W - 0.5 * a * a * t)
    np.testing.assert_allclose(s * (E @ y0), E @ (s * y0), rtol=1e-12, atol=1e-300)
    tr = exact_transform_path(y0, d, a, np.array([0.0, t]), np.array([0.0, W]))
    np.testing.assert_allclose(tr.states[-1], s * (E @ y0), rtol=1e-12, atol=1e-14)


def test_deterministic_limit_schemes():
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 8), 0.0)
    y0 = np.ones(8)
    exact = np.exp(-np.arange(1, 9) ** 2 * 1.0) * y0
    out = {}
    for scheme in ("euler_maruyama", "milstein", "exact_transform"):
        cfg = SimConfig(0.0, 0.0, 1e-3, 1.0, 8, scheme=scheme, deterministic=True)
        out[scheme] = simulate_path(cfg, d, y0, 0).states[-1]
    np.testing.assert_allclose(out["exact_transform"], exact, rtol=1e-10, atol=1e-30)
    # explicit schemes are first order in dt in this limit
    np.testing.assert_allclose(out["euler_maruyama"], exact, atol=2e-3)
    np.testing.assert_array_equal(out["euler_maruyama"], out["milstein"])


@pytest.mark.parametrize("c", [-1.0, 0.0, 1.0])
@pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
def test_single_mode_moment_oracle(c, a):
    """E y(t)^2 = exp((2(c - tau_1) + a^2) t) for M = 1, y0 = 1."""
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 1), c)
    T = 0.5 / a ** 2
    cfg = SimConfig(a, c, T / 20, T, 1, seed=2024, n_paths=10_000)
    ens = simulate_ensemble(cfg, d, [1.0])
    x = ens.norm_sq[:, -1]
    se = x.std(ddof=1) / math.sqrt(len(x))
    assert abs(x.mean() - math.exp((2 * (c - 1) + a * a) * T)) <= 3 * se


def test_trajectory_csv(tmp_path):
    d = uncontrolled_drift(EigenBasis.on_interval(PI, 2), 0.0)
    tr = simulate_path(SimConfig(1.0, 0.0, 0.5, 1.0, 2), d, [1.0, 0.0], 0)
    p = tmp_path / "p.csv"
    tr.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,W,y_1,y_2,norm_sq"
    assert len(lines) == 4
    assert float(lines[-1].split(",")[0]) == 1.0
