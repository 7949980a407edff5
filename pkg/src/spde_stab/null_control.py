"""Feedback-iterative null control on shrinking intervals.

On ``I_n = [T - 1/n, T - 1/(n+1))`` the closed loop runs with target rate
``lambda_n = Gamma^2 n^4``. The moments collapse super-geometrically, far
below the double-precision range after a few segments, so each path is
carried as a unit vector times ``exp(log_scale)`` and every ensemble moment
is accumulated in log space.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .basis import EigenBasis
from .errors import BlowUpError, ConfigError
from .feedback import FeedbackLaw, apply_feedback, build_feedback, closed_loop_drift, uncontrolled_drift
from .parallel import DEFAULT_CHUNK, ensemble_runner, path_stream
from .propagator import Propagator
from .region import ControlRegion, SpectralCalibration, calibrate_spectral_constant
from .sde import SimConfig, check_scheme_stability

__all__ = [
    "calibrate_gamma",
    "gamma_inequality_holds",
    "Segment",
    "NullControlPlan",
    "ControlledRun",
    "build_plan",
    "run_plan",
    "contraction_log_bound",
    "PLAN_HEADER",
    "format_log",
]


def calibrate_gamma(constant_C: float) -> float:
    """Smallest Gamma with ``C exp(C Gamma n^2) <= exp(Gamma^2 n^2 / 16)`` for all n >= 1.

    n = 1 is the binding case, which reduces to the positive root of
    ``Gamma^2/16 - C Gamma - log C = 0``.
    """
    if not constant_C >= 1:
        raise ValueError(f"constant C must be >= 1, got {constant_C!r}")
    C = float(constant_C)
    return 8 * C + math.sqrt(64 * C * C + 16 * math.log(C))


def gamma_inequality_holds(gamma: float, constant_C: float, n: int, rtol: float = 1e-12) -> bool:
    """Check ``log C + C Gamma n^2 <= Gamma^2 n^2 / 16`` at one n."""
    lhs = math.log(constant_C) + constant_C * gamma * n * n
    rhs = gamma * gamma * n * n / 16.0
    return lhs <= rhs + rtol * max(abs(lhs), abs(rhs))


def contraction_log_bound(constant_C: float, gamma: float, n: int) -> float:
    """Log of the per-segment factor ``C e^{C Gamma n^2} e^{-Gamma^2 n^2 / 4}``."""
    return math.log(constant_C) + constant_C * gamma * n * n - gamma * gamma * n * n / 4.0


@dataclass(frozen=True)
class Segment:
    n: int
    start: float
    end: float
    lam: float
    law: FeedbackLaw

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class NullControlPlan:
    T: float              # requested horizon
    T_effective: float    # 1/n_T, equal to T when 1/T is an integer
    n_T: int
    gamma: float
    gamma_override: bool
    segments: tuple
    n_max: int
    calibration: SpectralCalibration
    region: ControlRegion
    basis: EigenBasis
    a: float
    c: float
    gamma_checks: dict = field(default_factory=dict)  # n -> inequality holds

    @property
    def constant_C(self) -> float:
        return self.calibration.constant_C

    @property
    def gamma_verified(self) -> bool:
        return all(self.gamma_checks.values())

    @property
    def tail(self):
        """Uncontrolled stretch ``(T_effective, T]`` when 1/T is not an integer."""
        return None if self.T_effective >= self.T else (self.T_effective, self.T)

    @property
    def terminal_time(self) -> float:
        return self.segments[-1].end


def _schedule(T):
    if not T > 0:
        raise ConfigError(f"T: horizon must be positive, got {T!r}")
    inv = 1.0 / T
    if abs(inv - round(inv)) <= 1e-9 * inv and round(inv) >= 1:
        n_T = int(round(inv))
    else:
        # Control on [0, 1/n] for the largest 1/n < T, zero control afterwards.
        n_T = int(math.floor(inv)) + 1
    return n_T, 1.0 / n_T


def build_plan(T: float, calibration: SpectralCalibration, region: ControlRegion, basis: EigenBasis,
               a: float, c: float, n_max: int, gamma: float | None = None,
               max_iter: int = 20) -> NullControlPlan:
    """Schedule ``T_n = T - 1/n``, ``lambda_n = Gamma^2 n^4`` for ``n = n_T .. n_max``.

    Without ``gamma`` the plan iterates Gamma <- calibrate_gamma(C) and
    C <- certified constant over the lambda_n grid until C stops growing,
    so the gain inequality holds for every executed n. An explicit
    ``gamma`` keeps the schedule fixed; whether the inequality holds is
    then only recorded in ``gamma_checks``.
    """
    n_T, T_eff = _schedule(T)
    if n_max < n_T + 2:
        raise ConfigError(f"n_max: must be >= n_T + 2 = {n_T + 2}, got {n_max}")
    ns = list(range(n_T, n_max + 1))
    base = set(calibration.lambdas)

    if gamma is None:
        C = calibration.constant_C
        for _ in range(max_iter):
            G = calibrate_gamma(C)
            lams = [G * G * n ** 4 for n in ns]
            cal = calibrate_spectral_constant(region, basis, base | set(lams))
            if cal.constant_C <= C:
                cal = SpectralCalibration(C, cal.samples)
                break
            C = cal.constant_C
        else:
            raise ConfigError("gamma: calibration of C and Gamma did not converge")
    else:
        if not gamma > 0:
            raise ConfigError(f"gamma: must be positive, got {gamma!r}")
        G = float(gamma)
        lams = [G * G * n ** 4 for n in ns]
        cal = calibrate_spectral_constant(region, basis, base | set(lams))

    threshold = max(2 * basis.eigenvalues[0], a * a + 2 * c)
    segments = []
    for n, lam in zip(ns, lams):
        if not lam > threshold:
            raise ConfigError(
                f"gamma: lambda_{n} = {lam:.6g} must exceed max(2 tau_1, a^2 + 2c) = {threshold:.6g}"
            )
        law = build_feedback(lam, region, basis, cal)
        segments.append(Segment(n, T_eff - 1.0 / n, T_eff - 1.0 / (n + 1), lam, law))
    checks = {n: gamma_inequality_holds(G, cal.constant_C, n) for n in ns}
    return NullControlPlan(float(T), T_eff, n_T, G, gamma is not None, tuple(segments), n_max,
                           cal, region, basis, float(a), float(c), checks)


def _log_integral_exp(beta, length):
    """``log int_0^length exp(beta t) dt`` elementwise, without overflow."""
    beta = np.asarray(beta, dtype=float)
    out = np.empty_like(beta)
    pos, neg, zero = beta > 0, beta < 0, beta == 0
    b = beta[pos]
    out[pos] = b * length + np.log(-np.expm1(-b * length)) - np.log(b)
    b = beta[neg]
    out[neg] = np.log(-np.expm1(b * length)) - np.log(-b)
    out[zero] = math.log(length)
    return out


def _log_norm_sq(y):
    with np.errstate(divide="ignore"):
        return 2 * np.log(np.linalg.norm(y, axis=-1))


@dataclass
class ControlledRun:
    """Log-space summary of a null-control run (one entry per executed segment)."""

    plan: NullControlPlan
    n_paths: int
    seed: int
    log_moments: list          # log E||y(T_n)||^2 at each segment start, then at the last end
    log_segment_energy: list   # log of int_{I_n} E||H y||^2 dt
    log_terminal: float        # log E||y||^2 at T (after the uncontrolled tail, if any)
    segment_end_states: list = field(default_factory=list)
    segment_start_states: list = field(default_factory=list)

    @property
    def ns(self):
        return [s.n for s in self.plan.segments]

    @property
    def log_initial(self) -> float:
        return self.log_moments[0]

    @property
    def log_cumulative_energy(self):
        return list(np.logaddexp.accumulate(self.log_segment_energy))

    def moment(self, i: int) -> float:
        return math.exp(self.log_moments[i])

    def log_ratio(self, i: int) -> float:
        """``log(E||y(T_{n_T+i})||^2 / E||y_0||^2)``."""
        return self.log_moments[i] - self.log_moments[0]

    def log_contractions(self):
        return [b - a for a, b in zip(self.log_moments, self.log_moments[1:])]

    def contraction_checks(self):
        """Per segment: (n, measured log factor, log bound, holds)."""
        C, G = self.plan.constant_C, self.plan.gamma
        out = []
        for n, lf in zip(self.ns, self.log_contractions()):
            lb = contraction_log_bound(C, G, n)
            out.append((n, lf, lb, lf <= lb))
        return out

    def log_product_bounds(self):
        """Log of the iterated bound on ``E||y(T_n)||^2`` for every recorded T_n."""
        C, G = self.plan.constant_C, self.plan.gamma
        acc = [self.log_moments[0]]
        for n in self.ns:
            acc.append(acc[-1] + contraction_log_bound(C, G, n))
        return acc

    def energy_converged(self, rtol: float = 0.01) -> bool:
        cum = self.log_cumulative_energy
        if len(cum) < 2 or not np.isfinite(cum[-1]):
            return len(cum) >= 2 and cum[-1] == -np.inf
        return -np.expm1(cum[-2] - cum[-1]) <= rtol

    def super_geometric(self) -> bool:
        """Moments decrease, with log-decrements at least ``3 Gamma^2 n^2 / 16``."""
        G = self.plan.gamma
        return all(-lf >= 3 * G * G * n * n / 16.0
                   for n, lf in zip(self.ns, self.log_contractions()))

    def rows(self):
        cum = self.log_cumulative_energy
        bounds = self.log_product_bounds()
        out = []
        for i, seg in enumerate(self.plan.segments):
            out.append([str(seg.n), repr(seg.start), repr(seg.lam), str(seg.law.n_low),
                        repr(seg.law.gain), format_log(self.log_moments[i]),
                        format_log(self.log_segment_energy[i]), format_log(cum[i]),
                        format_log(bounds[i])])
        last = self.plan.segments[-1]
        out.append([str(last.n + 1), repr(last.end), "", "", "", format_log(self.log_moments[-1]),
                    "", format_log(cum[-1]), format_log(bounds[-1])])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLAN_HEADER)
            w.writerows(self.rows())


PLAN_HEADER = ["n", "T_n", "lambda_n", "N_lambda", "gamma_lambda", "E_norm_sq_at_Tn",
               "segment_energy", "cumulative_energy", "bound_value"]


def format_log(logv: float, digits: int = 12) -> str:
    """Scientific notation for ``exp(logv)``, valid beyond the double range."""
    if logv == -np.inf:
        return "0"
    if not np.isfinite(logv):
        return repr(float(np.exp(logv)))
    l10 = logv / math.log(10)
    e = math.floor(l10)
    mant = 10 ** (l10 - e)
    if mant >= 10 - 0.5 * 10 ** (1 - digits):
        mant, e = 1.0, e + 1
    return f"{mant:.{digits - 1}f}e{e:+d}"


def _segment_steps(seg_len, scheme, lam, dt):
    if scheme == "exact_transform":
        return 1
    h = min(dt, 0.01 / lam)
    return max(1, int(math.ceil(seg_len / h - 1e-9)))


def run_plan(plan: NullControlPlan, config: SimConfig, y0_ensemble, workers: int | None = None,
             keep_switch_states: bool = False, chunk_size: int = DEFAULT_CHUNK) -> ControlledRun:
    """Simulate the piecewise closed loop segment by segment.

    With ``exact_transform`` each segment is one exact step (the drift is
    constant on it) and the segment energy is the conditional expectation
    ``gain^2 int E[||P_N y||^2 | y(T_n)] dt``, integrated in closed form.
    Explicit schemes use ``dt <= 0.01 / lambda_n`` and a left Riemann sum.
    """
    basis = plan.basis
    if config.truncation != basis.truncation:
        raise ValueError(f"config truncation {config.truncation} != plan basis M={basis.truncation}")
    a = config.a
    if not (math.isclose(a, plan.a) and math.isclose(config.c, plan.c)):
        raise ValueError("config noise/drift constants differ from the plan's")
    P = config.n_paths
    y0 = np.asarray(y0_ensemble, dtype=float)
    if y0.ndim == 1:
        y0 = np.broadcast_to(y0, (P, basis.truncation))
    if y0.shape != (P, basis.truncation):
        raise ValueError(f"initial ensemble must have shape ({P}, {basis.truncation})")

    drifts = [closed_loop_drift(s.law, plan.c, basis) for s in plan.segments]
    props = [Propagator(d) for d in drifts]
    steps = [_segment_steps(s.length, config.scheme, s.lam, config.dt) for s in plan.segments]
    for s, d, k in zip(plan.segments, drifts, steps):
        check_scheme_stability(config.scheme, d, s.length / k)
    tail_len = 0.0 if plan.tail is None else plan.T - plan.terminal_time
    tail_prop = Propagator(uncontrolled_drift(basis, plan.c)) if tail_len > 0 else None
    h_all = np.concatenate([np.full(k, s.length / k) for s, k in zip(plan.segments, steps)]
                           + ([np.array([tail_len])] if tail_len > 0 else []))
    offsets = np.concatenate([[0], np.cumsum(steps)])
    S = len(plan.segments)

    def task(idx):
        p = len(idx)
        dW = np.stack([path_stream(config.seed, int(i)).standard_normal(len(h_all)) for i in idx])
        dW *= np.sqrt(h_all)
        y = y0[idx].copy()
        nrm = np.linalg.norm(y, axis=1)
        with np.errstate(divide="ignore"):
            ls = np.log(nrm)
        y = np.divide(y, nrm[:, None], out=np.zeros_like(y), where=nrm[:, None] > 0)
        log_m = np.empty((p, S + 2))
        log_e = np.empty((p, S))
        log_m[:, 0] = 2 * ls
        ends, starts = [], []
        for j, (seg, drift, prop) in enumerate(zip(plan.segments, drifts, props)):
            if keep_switch_states:
                starts.append((y.copy(), ls.copy()))
            n = seg.law.n_low
            g = seg.law.gain
            inc = dW[:, offsets[j]:offsets[j + 1]]
            if config.scheme == "exact_transform":
                # Energy given y(T_n): gain^2 sum_i (Q^T u)_i^2 int_0^len e^{(2 mu_i + a^2) t} dt.
                mu = prop._lam
                coef = (y[:, :n] @ prop._Q) ** 2
                with np.errstate(divide="ignore"):
                    lc = np.log(coef)
                li = _log_integral_exp(2 * mu + a * a, seg.length)
                log_e[:, j] = 2 * math.log(g) + 2 * ls + logsumexp(lc + li, axis=1) if g > 0 else -np.inf
                shift = prop.abscissa
                y = prop.apply(seg.length, y, shift=shift)
                growth = a * inc[:, 0] - 0.5 * a * a * seg.length + shift * seg.length
            else:
                h = seg.length / steps[j]
                A_T = drift.matrix.T
                acc = np.zeros(p)
                for k in range(steps[j]):
                    acc += h * np.sum(y[:, :n] ** 2, axis=1)
                    w = inc[:, k][:, None]
                    nxt = y + h * (y @ A_T) + a * y * w
                    if config.scheme == "milstein":
                        nxt += 0.5 * a * a * y * (w * w - h)
                    y = nxt
                with np.errstate(divide="ignore"):
                    log_e[:, j] = 2 * math.log(g) + 2 * ls + np.log(acc) if g > 0 else -np.inf
                growth = np.zeros(p)
            if not np.all(np.isfinite(y)):
                bad = int(idx[np.flatnonzero(~np.all(np.isfinite(y), axis=1))[0]])
                raise BlowUpError(f"blow-up in segment n={seg.n} on path {bad}",
                                  time=seg.end, path_index=bad, segment=seg.n)
            nrm = np.linalg.norm(y, axis=1)
            with np.errstate(divide="ignore"):
                ls = ls + growth + np.log(nrm)
            y = np.divide(y, nrm[:, None], out=np.zeros_like(y), where=nrm[:, None] > 0)
            log_m[:, j + 1] = 2 * ls
            if keep_switch_states:
                ends.append((y.copy(), ls.copy()))
        if tail_prop is not None:
            shift = tail_prop.abscissa
            y = tail_prop.apply(tail_len, y, shift=shift)
            nrm = np.linalg.norm(y, axis=1)
            with np.errstate(divide="ignore"):
                ls = ls + a * dW[:, -1] - 0.5 * a * a * tail_len + shift * tail_len + np.log(nrm)
        log_m[:, S + 1] = 2 * ls
        return log_m, log_e, starts, ends

    parts = ensemble_runner(P, task, workers, chunk_size)
    log_m = np.concatenate([q[0] for q in parts])
    log_e = np.concatenate([q[1] for q in parts])
    lP = math.log(P)
    moments = list(logsumexp(log_m[:, :S + 1], axis=0) - lP)
    energies = list(logsumexp(log_e, axis=0) - lP)
    terminal = float(logsumexp(log_m[:, S + 1]) - lP)

    def merge(k):
        out = []
        for j in range(S):
            out.append((np.concatenate([q[k][j][0] for q in parts]),
                        np.concatenate([q[k][j][1] for q in parts])))
        return out

    return ControlledRun(plan, P, int(config.seed), [float(v) for v in moments],
                         [float(v) for v in energies], terminal,
                         merge(3) if keep_switch_states else [],
                         merge(2) if keep_switch_states else [])


def control_value(plan: NullControlPlan, t: float, state) -> np.ndarray:
    """The applied control at time ``t``: a fixed linear map of the current state only."""
    for seg in plan.segments:
        if seg.start <= t < seg.end:
            return apply_feedback(seg.law, state)
    return np.zeros_like(np.asarray(state, dtype=float))
