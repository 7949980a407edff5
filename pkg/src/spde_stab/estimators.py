"""Monte Carlo estimators: decay exponents, Lyapunov samples, sup statistics,
strong convergence orders."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, UnreliableFitWarning
from .feedback import ClosedLoopDrift, FeedbackLaw
from .parallel import DEFAULT_CHUNK, ensemble_runner
from .propagator import Propagator
from .sde import SimConfig, as_ensemble, brownian_increments, check_scheme_stability

__all__ = [
    "DecayFit",
    "LyapunovSample",
    "fit_log_linear",
    "fit_mean_square_decay",
    "feedback_energy",
    "energy_curve",
    "estimate_as_exponent",
    "sup_statistic",
    "strong_errors",
    "convergence_order",
    "DECAY_HEADER",
    "decay_row",
    "write_decay_report",
]


@dataclass(frozen=True)
class DecayFit:
    exponent: float
    intercept: float
    r_squared: float
    window: tuple
    n_paths: int
    stderr: float = float("nan")

    @property
    def prefactor(self) -> float:
        return math.exp(self.intercept)


def _window_mask(times, window):
    t_lo, t_hi = window
    if not (0 <= t_lo < t_hi):
        raise ValueError(f"invalid fit window {window}")
    if t_hi > times[-1] * (1 + 1e-12):
        raise ValueError(f"fit window ends at {t_hi} beyond T_end={times[-1]}")
    if t_lo < 0.2 * t_hi - 1e-12:
        raise ValueError(f"fit window must exclude the transient: t_lo >= 0.2*t_hi, got {window}")
    tol = 1e-9 * max(1.0, t_hi)
    mask = (times >= t_lo - tol) & (times <= t_hi + tol)
    if mask.sum() < 2:
        raise ValueError(f"fit window {window} contains fewer than two grid points")
    return mask


def fit_log_linear(times, samples, window, check_r2: bool = True) -> DecayFit:
    """OLS of ``log(mean over paths)`` against time over ``window``.

    ``samples`` is (P, K+1). The standard error of the slope is the
    influence-function (delta method) estimate across paths.
    """
    samples = np.atleast_2d(samples)
    mask = _window_mask(times, window)
    x = times[mask]
    S = samples[:, mask]
    m = S.mean(axis=0)
    if not np.any(m > 0):
        raise DegenerateFitError("statistic is identically zero over the fit window")
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise DegenerateFitError("statistic vanishes or is non-finite inside the fit window")
    ly = np.log(m)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (ly - ly.mean()) / sxx)
    intercept = float(ly.mean() - slope * x.mean())
    resid = ly - (intercept + slope * x)
    sst = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    r2 = min(1.0, max(0.0, r2))
    P = S.shape[0]
    if P > 1:
        influence = (S / m) @ (xc / sxx)
        stderr = float(influence.std(ddof=1) / math.sqrt(P))
    else:
        stderr = float("nan")
    if check_r2 and r2 < 0.9:
        warnings.warn(f"log-linear fit over {window} has r^2={r2:.3f} < 0.9",
                      UnreliableFitWarning, stacklevel=3)
    return DecayFit(slope, intercept, r2, (float(window[0]), float(window[1])), P, stderr)


def _default_window(ens, window):
    if window is None:
        return (0.2 * ens.T_end, ens.T_end)
    return (float(window[0]), float(window[1]))


def fit_mean_square_decay(ensemble, window=None, min_paths: int = 100) -> DecayFit:
    """Fitted exponent of ``E||y(t)||^2``; negative for decay.

    The default window ``[0.2 T_end, T_end]`` drops the initial transient.
    """
    ens = as_ensemble(ensemble)
    if ens.n_paths < min_paths:
        raise ValueError(f"need at least {min_paths} paths, got {ens.n_paths}")
    return fit_log_linear(ens.times, ens.norm_sq, _default_window(ens, window))


def energy_curve(ensemble, law: FeedbackLaw) -> np.ndarray:
    """Per-path ``||H y(t)||^2 = gain^2 ||P_N y(t)||^2`` on the grid."""
    ens = as_ensemble(ensemble, law.n_low)
    if ens.n_low != law.n_low or ens.low_norm_sq is None:
        raise ValueError(f"ensemble tracks N={ens.n_low} low modes, law uses N={law.n_low}")
    return law.gain ** 2 * ens.low_norm_sq


def feedback_energy(ensemble, law: FeedbackLaw, window=None, min_paths: int = 100) -> DecayFit:
    ens = as_ensemble(ensemble, law.n_low)
    if ens.n_paths < min_paths:
        raise ValueError(f"need at least {min_paths} paths, got {ens.n_paths}")
    return fit_log_linear(ens.times, energy_curve(ens, law), _default_window(ens, window))


@dataclass(frozen=True)
class LyapunovSample:
    values: np.ndarray  # per-path (1/t) log ||y(t)||^2
    t_eval: float
    excluded: int = 0   # paths with exactly zero norm (underflow)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def p95(self) -> float:
        return float(np.percentile(self.values, 95))

    @property
    def stderr(self) -> float:
        return float(self.values.std(ddof=1) / math.sqrt(len(self.values)))


def estimate_as_exponent(ensemble, t_eval: float, expected_rate: float | None = None) -> LyapunovSample:
    """Per-path ``(1/t) log ||y(t)||^2`` at ``t = t_eval``.

    With ``expected_rate`` given, ``t_eval`` must make the ``2 log t / t``
    correction smaller than 10% of that rate.
    """
    ens = as_ensemble(ensemble)
    if not t_eval > 0:
        raise ValueError("t_eval must be positive")
    if expected_rate is not None and 2 * math.log(t_eval) / t_eval >= 0.1 * abs(expected_rate):
        raise ValueError(
            f"t_eval={t_eval} too small: 2 log t / t = {2 * math.log(t_eval) / t_eval:.3g} "
            f"is not below 10% of |rate|={abs(expected_rate):.3g}"
        )
    n2 = ens.norm_sq[:, ens.time_index(t_eval)]
    if not np.all(np.isfinite(n2)):
        raise DegenerateFitError("non-finite norms at t_eval (blow-up paths)")
    ok = n2 > 0
    excluded = int((~ok).sum())
    if excluded:
        warnings.warn(f"{excluded} paths have zero norm at t={t_eval} and are excluded",
                      RuntimeWarning, stacklevel=2)
    if not ok.any():
        raise DegenerateFitError("all paths have zero norm at t_eval")
    return LyapunovSample(np.log(n2[ok]) / t_eval, float(t_eval), excluded)


def sup_statistic(ensemble, t_from: float = 0.0) -> float:
    """Ensemble mean of the grid supremum of ``||y(t)||^2`` over ``[t_from, T_end]``."""
    ens = as_ensemble(ensemble)
    mask = ens.times >= t_from - 1e-12 * max(1.0, t_from)
    if not mask.any():
        raise ValueError(f"t_from={t_from} beyond T_end={ens.T_end}")
    return float(ens.norm_sq[:, mask].max(axis=1).mean())


def _check_levels(dt_sequence, T_end):
    dts = [float(d) for d in dt_sequence]
    if len(dts) < 2 or any(b >= a for a, b in zip(dts, dts[1:])):
        raise ValueError("dt_sequence must be strictly decreasing with at least two levels")
    fine = dts[-1]
    counts = []
    for d in dts:
        n = T_end / d
        r = d / fine
        if abs(n - round(n)) > 1e-9 * n or abs(r - round(r)) > 1e-9 * r:
            raise ValueError(f"dt={d} must divide T_end={T_end} and be a multiple of {fine}")
        counts.append(int(round(r)))
    return dts, counts, int(round(T_end / fine))


def strong_errors(config: SimConfig, drift: ClosedLoopDrift, y0, dt_sequence, scheme: str | None = None,
                  workers: int | None = None) -> tuple:
    """Mean ``||y_scheme(T) - y_exact(T)||`` per level, coarse increments summed from fine ones."""
    scheme = scheme or config.scheme
    if scheme == "exact_transform":
        raise ValueError("convergence order is measured for explicit schemes")
    dts, ratios, n_fine = _check_levels(dt_sequence, config.T_end)
    check_scheme_stability(scheme, drift, dts[0])
    a, T = config.a, config.T_end
    prop = Propagator(drift)
    E_T = prop.matrix(T)
    A_T = drift.matrix.T
    y0 = np.asarray(y0, dtype=float)
    fine_steps = np.full(n_fine, dts[-1])

    def task(idx):
        dW = np.stack([brownian_increments(config.seed, int(i), fine_steps) for i in idx])
        Y0 = np.broadcast_to(y0, (len(idx), drift.M)) if y0.ndim == 1 else y0[idx]
        WT = dW.sum(axis=1)
        exact = np.exp(a * WT - 0.5 * a * a * T)[:, None] * (Y0 @ E_T.T)
        errs = []
        for h, r in zip(dts, ratios):
            inc = dW.reshape(len(idx), -1, r).sum(axis=2)
            y = Y0.copy()
            for k in range(inc.shape[1]):
                n = inc[:, k][:, None]
                nxt = y + h * (y @ A_T) + a * y * n
                if scheme == "milstein":
                    nxt += 0.5 * a * a * y * (n * n - h)
                y = nxt
            errs.append(np.linalg.norm(y - exact, axis=1))
        return np.stack(errs, axis=1)

    err = np.concatenate(ensemble_runner(config.n_paths, task, workers, DEFAULT_CHUNK))
    return np.array(dts), err.mean(axis=0)


def convergence_order(config: SimConfig, drift: ClosedLoopDrift, y0, dt_sequence,
                      scheme: str | None = None, workers: int | None = None) -> float:
    """Least-squares slope of ``log(strong error)`` against ``log(dt)``.

    Returns NaN (with a warning) when the coarsest error is already below
    1e-12, since no order can be read off round-off.
    """
    dts, errs = strong_errors(config, drift, y0, dt_sequence, scheme, workers)
    if errs[0] < 1e-12:
        warnings.warn("strong error below 1e-12 at the coarsest level; order undetermined",
                      RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


DECAY_HEADER = ["quantity", "exponent", "intercept", "r2", "t_lo", "t_hi", "n_paths", "seed"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def decay_row(quantity: str, fit=None, *, exponent=None, intercept=None, r2=None,
              t_lo=None, t_hi=None, n_paths=None, seed=None) -> list:
    if fit is not None:
        exponent, intercept, r2 = fit.exponent, fit.intercept, fit.r_squared
        t_lo, t_hi = fit.window
        n_paths = fit.n_paths
    return [quantity] + [_fmt(v) for v in (exponent, intercept, r2, t_lo, t_hi, n_paths, seed)]


def write_decay_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECAY_HEADER)
        w.writerows(rows)
