"""Sample paths of the truncated closed-loop SDE ``dy = A y dt + a y dW``.

One scalar Brownian motion multiplies every mode. Three schemes share the
same Brownian increments:

* ``euler_maruyama``: ``y + A y h + a y dW``
* ``milstein``: adds ``a^2/2 y (dW^2 - h)``
* ``exact_transform``: ``y(t) = exp(a W(t) - a^2 t/2) expm(A t) y0``, exact
  because the noise is a scalar multiple of the identity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, ConfigError
from .feedback import ClosedLoopDrift
from .parallel import DEFAULT_CHUNK, ensemble_runner, path_stream
from .propagator import Propagator

__all__ = [
    "SCHEMES",
    "SimConfig",
    "Trajectory",
    "Ensemble",
    "time_grid",
    "brownian_increments",
    "step_euler",
    "step_milstein",
    "exact_transform_path",
    "simulate_path",
    "simulate_ensemble",
    "check_scheme_stability",
]

SCHEMES = ("euler_maruyama", "milstein", "exact_transform")


@dataclass(frozen=True)
class SimConfig:
    noise_intensity: float
    drift_constant: float
    dt: float
    T_end: float
    truncation: int
    scheme: str = "exact_transform"
    seed: int = 0
    n_paths: int = 1
    deterministic: bool = False  # permits a = 0 (oracle runs)

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt: must be positive, got {self.dt!r}")
        if not self.T_end >= self.dt:
            raise ConfigError(f"T_end: must be >= dt, got T_end={self.T_end!r}, dt={self.dt!r}")
        if self.noise_intensity == 0 and not self.deterministic:
            raise ConfigError("noise_intensity: a = 0 requires deterministic mode")
        if not math.isfinite(self.noise_intensity) or not math.isfinite(self.drift_constant):
            raise ConfigError("noise_intensity/drift_constant must be finite")
        if int(self.truncation) != self.truncation or self.truncation < 1:
            raise ConfigError(f"truncation: must be a positive integer, got {self.truncation!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme: {self.scheme!r} is not one of {', '.join(SCHEMES)}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed: must be a 64-bit unsigned integer, got {self.seed!r}")
        if int(self.n_paths) < 1:
            raise ConfigError(f"n_paths: must be >= 1, got {self.n_paths!r}")

    @property
    def a(self) -> float:
        return self.noise_intensity

    @property
    def c(self) -> float:
        return self.drift_constant


def time_grid(dt: float, T_end: float) -> np.ndarray:
    """Uniform grid from 0 with spacing ``dt``; the last step is shortened to hit ``T_end``."""
    n = T_end / dt
    k = int(round(n)) if abs(n - round(n)) <= 1e-9 * max(1.0, n) else int(math.floor(n))
    t = np.arange(k + 1) * dt
    if abs(t[-1] - T_end) <= 1e-9 * max(1.0, T_end):
        t[-1] = T_end
    else:
        t = np.append(t, T_end)
    return t


def brownian_increments(seed: int, path_index: int, steps) -> np.ndarray:
    """Increments ``sqrt(h_k) Z_k`` for step sizes ``steps`` of one path."""
    steps = np.asarray(steps, dtype=float)
    z = path_stream(seed, path_index).standard_normal(steps.shape[0])
    return z * np.sqrt(steps)


def _check_finite(y, t, path_indices=None):
    if np.all(np.isfinite(y)):
        return
    bad = np.flatnonzero(~np.all(np.isfinite(np.atleast_2d(y)), axis=-1))
    idx = None if path_indices is None else int(path_indices[bad[0]])
    raise BlowUpError(f"non-finite state at t={t:.6g}" + (f" on path {idx}" if idx is not None else ""),
                      time=float(t), path_index=idx)


def step_euler(state, drift, a: float, dt: float, dW):
    """One Euler-Maruyama step; ``state`` may be a stack of paths (rows)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(state, dtype=float)
    A = drift.matrix if isinstance(drift, ClosedLoopDrift) else np.atleast_2d(drift)
    dW = np.asarray(dW, dtype=float)
    noise = dW[..., None] if dW.ndim else dW
    out = y + dt * (y @ A.T) + a * y * noise
    _check_finite(out, float("nan"))
    return out


def step_milstein(state, drift, a: float, dt: float, dW):
    """Euler step plus the Milstein correction ``a^2/2 y (dW^2 - dt)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(state, dtype=float)
    A = drift.matrix if isinstance(drift, ClosedLoopDrift) else np.atleast_2d(drift)
    dW = np.asarray(dW, dtype=float)
    noise = dW[..., None] if dW.ndim else dW
    out = y + dt * (y @ A.T) + a * y * noise + 0.5 * a * a * y * (noise * noise - dt)
    _check_finite(out, float("nan"))
    return out


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray    # (K+1, M)
    brownian: np.ndarray  # W(t_k)

    @property
    def norm_sq(self) -> np.ndarray:
        return np.sum(self.states ** 2, axis=-1)

    def to_csv(self, path) -> None:
        M = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "W"] + [f"y_{k}" for k in range(1, M + 1)] + ["norm_sq"])
            for t, W, y, n2 in zip(self.times, self.brownian, self.states, self.norm_sq):
                w.writerow([repr(float(t)), repr(float(W))] + [repr(float(v)) for v in y]
                           + [repr(float(n2))])


def exact_transform_path(y0, drift: ClosedLoopDrift, a: float, grid, brownian) -> Trajectory:
    """Pathwise exact solution on ``grid`` given Brownian values ``brownian`` (``W(0)=0``)."""
    grid = np.asarray(grid, dtype=float)
    W = np.asarray(brownian, dtype=float)
    if W.shape != grid.shape:
        raise ValueError("brownian values must match the time grid")
    states = _exact_states(Propagator(drift), np.asarray(y0, dtype=float)[None, :], a, grid,
                           W[None, :])[0]
    return Trajectory(grid, states, W)


def _exact_states(prop, y0, a, times, W):
    """Exact states for stacked paths; ``y0`` (P, M), ``W`` (P, K+1) -> (P, K+1, M)."""
    P, K1 = W.shape
    M = y0.shape[1]
    z = np.empty((P, K1, M))
    z[:, 0] = y0
    h = np.diff(times)
    for k in range(K1 - 1):
        z[:, k + 1] = prop.apply(h[k], z[:, k])
    scale = np.exp(a * W - 0.5 * a * a * times[None, :])
    out = scale[:, :, None] * z
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise BlowUpError(f"non-finite exact state at t={times[bad[1]]:.6g}",
                          time=float(times[bad[1]]), path_index=int(bad[0]))
    return out


def _explicit_states(drift, y0, a, times, dW, scheme, path_indices):
    P, K = dW.shape
    A_T = drift.matrix.T
    h = np.diff(times)
    out = np.empty((P, K + 1, y0.shape[1]))
    y = out[:, 0] = y0
    milstein = scheme == "milstein"
    for k in range(K):
        n = dW[:, k][:, None]
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = y + h[k] * (y @ A_T) + a * y * n
            if milstein:
                nxt += 0.5 * a * a * y * (n * n - h[k])
        if not np.all(np.isfinite(nxt)):
            _check_finite(nxt, times[k + 1], path_indices)
        y = out[:, k + 1] = nxt
    return out


def check_scheme_stability(scheme: str, drift: ClosedLoopDrift, dt: float) -> None:
    """Explicit schemes need ``dt <= 0.1 / rho(A)``."""
    if scheme == "exact_transform":
        return
    rho = drift.spectral_radius()
    if dt * rho > 0.1:
        raise ConfigError(
            f"dt: {dt:.3g} too large for {scheme} (spectral radius {rho:.3g} needs "
            f"dt <= {0.1 / rho:.3g}); use scheme=exact_transform"
        )


def _initial_block(y0, idx, M):
    y0 = np.asarray(y0, dtype=float)
    if y0.shape[-1] != M:
        raise ValueError(f"initial state has {y0.shape[-1]} modes, drift has {M}")
    if y0.ndim == 1:
        return np.broadcast_to(y0, (len(idx), M)).copy()
    return y0[idx].copy()


def _simulate_block(config, drift, prop, y0, idx, times, increments=None):
    steps = np.diff(times)
    if increments is None:
        dW = np.stack([brownian_increments(config.seed, int(i), steps) for i in idx])
    else:
        dW = increments
    W = np.zeros((len(idx), len(times)))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    Y0 = _initial_block(y0, idx, drift.M)
    if config.scheme == "exact_transform":
        Y = _exact_states(prop, Y0, config.a, times, W)
    else:
        Y = _explicit_states(drift, Y0, config.a, times, dW, config.scheme, idx)
    return Y, W


def simulate_path(config: SimConfig, drift: ClosedLoopDrift, y0, path_index: int,
                  increments=None, check_stability: bool = True) -> Trajectory:
    """Single reproducible path; ``increments`` replays a given Brownian path."""
    if drift.M != config.truncation:
        raise ValueError(f"drift has M={drift.M}, config truncation={config.truncation}")
    if check_stability:
        check_scheme_stability(config.scheme, drift, config.dt)
    times = time_grid(config.dt, config.T_end)
    inc = None if increments is None else np.asarray(increments, dtype=float)[None, :]
    Y, W = _simulate_block(config, drift, Propagator(drift), y0, np.array([path_index]),
                           times, inc)
    return Trajectory(times, Y[0], W[0])


@dataclass
class Ensemble:
    """Per-path summaries of an ensemble run.

    Full states are kept only for the paths listed in ``trajectories``; the
    per-grid-point squared norms are enough for every estimator.
    """

    times: np.ndarray
    norm_sq: np.ndarray            # (P, K+1)
    low_norm_sq: np.ndarray | None  # (P, K+1), ||P_N y||^2 for N = n_low
    n_low: int
    final_states: np.ndarray       # (P, M)
    final_brownian: np.ndarray     # (P,)
    seed: int = 0
    scheme: str = ""
    trajectories: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.norm_sq.shape[0]

    @property
    def T_end(self) -> float:
        return float(self.times[-1])

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not on the simulation grid")
        return k

    @classmethod
    def from_trajectories(cls, trajectories, n_low: int = 0) -> "Ensemble":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("empty ensemble")
        times = trajectories[0].times
        for tr in trajectories[1:]:
            if tr.times.shape != times.shape or not np.allclose(tr.times, times):
                raise ValueError("trajectories must share one time grid")
        S = np.stack([tr.states for tr in trajectories])
        low = np.sum(S[..., :n_low] ** 2, axis=-1) if n_low else None
        return cls(times, np.sum(S ** 2, axis=-1), low, n_low, S[:, -1],
                   np.array([tr.brownian[-1] for tr in trajectories]),
                   trajectories=dict(enumerate(trajectories)))


def as_ensemble(data, n_low: int = 0) -> Ensemble:
    if isinstance(data, Ensemble):
        return data
    return Ensemble.from_trajectories(data, n_low)


def simulate_ensemble(config: SimConfig, drift: ClosedLoopDrift, y0, workers: int | None = None,
                      keep=(), chunk_size: int = DEFAULT_CHUNK,
                      check_stability: bool = True) -> Ensemble:
    """Simulate ``config.n_paths`` paths concurrently and merge them in index order."""
    if drift.M != config.truncation:
        raise ValueError(f"drift has M={drift.M}, config truncation={config.truncation}")
    if check_stability:
        check_scheme_stability(config.scheme, drift, config.dt)
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim == 2 and y0.shape[0] != config.n_paths:
        raise ValueError("per-path initial states must have one row per path")
    times = time_grid(config.dt, config.T_end)
    prop = Propagator(drift)
    keep = set(int(k) for k in keep)
    n = drift.n_low

    def task(idx):
        Y, W = _simulate_block(config, drift, prop, y0, idx, times)
        kept = {int(i): Trajectory(times, Y[j], W[j]) for j, i in enumerate(idx) if int(i) in keep}
        low = np.sum(Y[..., :n] ** 2, axis=-1) if n else None
        return np.sum(Y ** 2, axis=-1), low, Y[:, -1].copy(), W[:, -1].copy(), kept

    parts = ensemble_runner(config.n_paths, task, workers, chunk_size)
    kept = {}
    for p in parts:
        kept.update(p[4])
    return Ensemble(
        times,
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]) if n else None,
        n,
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        seed=int(config.seed),
        scheme=config.scheme,
        trajectories=dict(sorted(kept.items())),
    )
