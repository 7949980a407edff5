"""Matrix exponential of the closed-loop drift.

The drift has the block form ``[[S, 0], [H, diag(d)]]`` with ``S``
symmetric, so ``expm(A t)`` is available in closed form from one symmetric
eigendecomposition of ``S``::

    expm(A t) = [[Q e^{Lt} Q^T, 0], [X(t), e^{dt}]]
    X(t)[k] = sum_j (H Q)[k, j] * phi(L_j, d_k, t) * Q[:, j]^T

with ``phi(x, y, t) = (e^{xt} - e^{yt}) / (x - y)``. This stays accurate for
gains far beyond what scaling-and-squaring tolerates (the feedback gains of
the null-control cascade reach 1e60 and more). An optional ``shift`` returns
``expm((A - shift I) t)`` so callers can keep states in range and carry the
scale separately.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .feedback import ClosedLoopDrift

__all__ = ["Propagator", "divided_exp"]


def divided_exp(x, y, t):
    """``(exp(x t) - exp(y t)) / (x - y)``, and ``t exp(x t)`` on the diagonal.

    Evaluated as ``t * exp(max(x, y) t) * (1 - exp(-|x - y| t)) / (|x - y| t)``,
    which never subtracts nearly equal large numbers.
    """
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    hi = np.maximum(x, y)
    u = np.abs(x - y) * t
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(u > 0, -np.expm1(-u) / u, 1.0)
    with np.errstate(under="ignore", over="ignore"):
        return t * np.exp(hi * t) * g


class Propagator:
    """Applies ``expm((A - shift) t)`` to stacks of mode vectors.

    Matrices are cached per distinct ``(t, shift)``, so stepping on a uniform
    grid costs one evaluation.
    """

    def __init__(self, drift: ClosedLoopDrift):
        self.drift = drift
        n = drift.n_low
        if n:
            lam, Q = np.linalg.eigh(drift.low_block)
        else:
            lam, Q = np.empty(0), np.zeros((0, 0))
        self._lam = lam
        self._Q = Q
        self._HQ = drift.high_coupling @ Q if n else drift.high_coupling
        self._cache = {}

    @property
    def abscissa(self) -> float:
        """Largest eigenvalue of the drift (all eigenvalues are real)."""
        return self.drift.spectral_abscissa()

    def matrix(self, t: float, shift: float = 0.0) -> np.ndarray:
        key = (float(t), float(shift))
        E = self._cache.get(key)
        if E is None:
            E = self._build(float(t), float(shift))
            E.setflags(write=False)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = E
        return E

    def _build(self, t, shift):
        d = self.drift
        n, M = d.n_low, d.M
        E = np.zeros((M, M))
        with np.errstate(under="ignore"):
            E[n:, n:] = np.diag(np.exp((d.high_diag - shift) * t))
            if n:
                Q, lam = self._Q, self._lam
                E[:n, :n] = (Q * np.exp((lam - shift) * t)) @ Q.T
                phi = divided_exp(lam[None, :] - shift, d.high_diag[:, None] - shift, t)
                E[n:, :n] = (self._HQ * phi) @ Q.T
        return E

    def apply(self, t: float, states, shift: float = 0.0) -> np.ndarray:
        """``expm((A - shift) t) @ y`` for each row ``y`` of ``states``."""
        return np.asarray(states, dtype=float) @ self.matrix(t, shift).T

    @staticmethod
    def dense_expm(matrix: np.ndarray, t: float) -> np.ndarray:
        """Generic scaling-and-squaring fallback for unstructured matrices."""
        return scipy.linalg.expm(np.asarray(matrix, dtype=float) * t)
