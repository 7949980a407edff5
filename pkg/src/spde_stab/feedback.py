"""Finite-dimensional feedback ``h = -gamma * P_N y`` and the closed-loop drift."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import EigenBasis, count_modes, project_low
from .errors import ConfigError, TruncationError
from .region import (ControlRegion, CouplingMatrix, SpectralCalibration, build_coupling,
                     spectral_bound)

__all__ = [
    "FeedbackLaw",
    "ClosedLoopDrift",
    "feedback_gain",
    "build_feedback",
    "closed_loop_drift",
    "uncontrolled_drift",
    "apply_feedback",
]


def feedback_gain(lam: float, constant_C: float) -> float:
    """``C * exp(C * sqrt(lam)) * lam``."""
    return constant_C * math.exp(constant_C * math.sqrt(lam)) * lam


@dataclass(frozen=True)
class FeedbackLaw:
    lam: float
    n_low: int
    gain: float
    calibration: SpectralCalibration
    coupling: CouplingMatrix
    basis: EigenBasis
    gain_override: bool = False

    def hypothesis_holds(self, a: float, c: float) -> bool:
        """Whether ``lam > max(2 tau_1, a^2 + 2c)`` (needed for the decay guarantees)."""
        return self.lam > max(2 * self.basis.eigenvalues[0], a * a + 2 * c)

    def require_hypothesis(self, a: float, c: float) -> None:
        if not self.hypothesis_holds(a, c):
            raise ConfigError(
                f"lambda: {self.lam} must exceed max(2*tau_1, a^2+2c) = "
                f"{max(2 * self.basis.eigenvalues[0], a * a + 2 * c):.6g}"
            )

    def low_rate_bound(self) -> float:
        """``gain * exp(-C sqrt(lam)) / C``; equals ``lam`` unless the gain was overridden."""
        return self.gain * spectral_bound(self.calibration.constant_C, self.lam)


def build_feedback(lam: float, region: ControlRegion, basis: EigenBasis,
                   calibration: SpectralCalibration, gain: float | None = None) -> FeedbackLaw:
    """Assemble the feedback law for target rate ``lam``.

    ``gain`` overrides the calibrated gain. Overridden laws are outside the
    regime covered by the decay guarantees and are meant for experiments on
    under-gained feedback.
    """
    n = count_modes(lam, basis)
    if n < 1:
        raise ConfigError(f"lambda: {lam} is below tau_1, no mode to control")
    if basis.truncation < 2 * n:
        raise TruncationError(
            f"truncation M={basis.truncation} must be at least 2*N_lambda={2 * n}"
        )
    if gain is None:
        if not calibration.covers(lam):
            raise ConfigError(
                f"lambda: {lam} not in the calibration grid {calibration.lambdas}; recalibrate"
            )
        g = feedback_gain(lam, calibration.constant_C)
    else:
        if not gain >= 0:
            raise ConfigError(f"gain override must be nonnegative, got {gain!r}")
        g = float(gain)
    if not math.isfinite(g):
        raise ConfigError(f"feedback gain overflows for lambda={lam}")
    return FeedbackLaw(float(lam), n, g, calibration, build_coupling(region, basis, n), basis,
                       gain_override=gain is not None)


@dataclass(frozen=True)
class ClosedLoopDrift:
    """Drift matrix ``A`` of the truncated closed loop, with its block structure.

    ``A = diag(c - tau) - gain * [B | 0]``: the first ``n_low`` modes evolve
    autonomously (symmetric block), the remaining ones are diagonal and
    forced by the low modes through ``high_coupling``.
    """

    matrix: np.ndarray
    n_low: int
    low_block: np.ndarray      # n_low x n_low, symmetric
    high_coupling: np.ndarray  # (M - n_low) x n_low
    high_diag: np.ndarray      # M - n_low
    gain: float = 0.0

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues())))

    def eigenvalues(self) -> np.ndarray:
        low = np.linalg.eigvalsh(self.low_block) if self.n_low else np.empty(0)
        return np.concatenate([low, self.high_diag])

    def spectral_abscissa(self) -> float:
        return float(np.max(self.eigenvalues()))


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def uncontrolled_drift(basis: EigenBasis, c: float) -> ClosedLoopDrift:
    d = c - np.asarray(basis.eigenvalues, dtype=float)
    A = np.diag(d)
    empty = np.zeros((basis.truncation, 0))
    _freeze(A, d, empty)
    return ClosedLoopDrift(A, 0, np.zeros((0, 0)), empty, d.copy(), 0.0)


def closed_loop_drift(law: FeedbackLaw, c: float, basis: EigenBasis) -> ClosedLoopDrift:
    """``A[k, j] = (c - tau_k) delta_kj - gain * B[k, j] * [j < N]``."""
    if law.basis.truncation != basis.truncation or law.basis.length != basis.length:
        raise ValueError(
            f"feedback law built on M={law.basis.truncation}, L={law.basis.length}; "
            f"drift requested on M={basis.truncation}, L={basis.length}"
        )
    n = law.n_low
    d = c - np.asarray(basis.eigenvalues, dtype=float)
    A = np.diag(d)
    A[:, :n] -= law.gain * law.coupling.entries
    low = np.diag(d[:n]) - law.gain * law.coupling.low_block
    low = 0.5 * (low + low.T)
    A[:n, :n] = low
    high = A[n:, :n].copy()
    hd = d[n:].copy()
    _freeze(A, low, high, hd)
    return ClosedLoopDrift(A, n, low, high, hd, law.gain)


def apply_feedback(law: FeedbackLaw, state) -> np.ndarray:
    """Control value ``-gain * P_N y`` in mode coordinates (before restriction to the region)."""
    return -law.gain * project_low(state, law.n_low)
