"""Dirichlet eigenbasis of the Laplacian on an interval (0, L).

Eigenpairs are explicit: ``tau_k = (k*pi/L)**2`` and
``e_k(x) = sqrt(2/L) * sin(k*pi*x/L)``. A state is represented by its first
``M`` Fourier sine coefficients (a "mode vector").
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TruncationError

__all__ = [
    "Domain1D",
    "EigenBasis",
    "eigenvalue",
    "count_modes",
    "project_low",
    "project_high",
]


@dataclass(frozen=True)
class Domain1D:
    length: float = math.pi

    def __post_init__(self):
        if not (self.length > 0 and math.isfinite(self.length)):
            raise ConfigError(f"length: domain length must be positive, got {self.length!r}")


def eigenvalue(k: int, domain: Domain1D) -> float:
    """Return the k-th Dirichlet eigenvalue ``(k*pi/L)**2`` (k starts at 1)."""
    if int(k) != k or k < 1:
        raise ValueError(f"mode index must be a positive integer, got {k!r}")
    if not domain.length > 0:
        raise ValueError("domain length must be positive")
    return (k * math.pi / domain.length) ** 2


@dataclass(frozen=True)
class EigenBasis:
    domain: Domain1D
    truncation: int
    eigenvalues: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.truncation) != self.truncation or self.truncation < 1:
            raise ConfigError(f"truncation: must be a positive integer, got {self.truncation!r}")
        k = np.arange(1, self.truncation + 1, dtype=float)
        tau = (k * np.pi / self.domain.length) ** 2
        tau.setflags(write=False)
        object.__setattr__(self, "eigenvalues", tau)

    @classmethod
    def on_interval(cls, length: float, truncation: int) -> "EigenBasis":
        return cls(Domain1D(length), truncation)

    @property
    def M(self) -> int:
        return self.truncation

    @property
    def length(self) -> float:
        return self.domain.length

    def eigenfunction(self, k: int, x):
        """Evaluate ``e_k`` at the points ``x``."""
        if not 1 <= k <= self.truncation:
            raise ValueError(f"mode index {k} outside 1..{self.truncation}")
        L = self.domain.length
        return math.sqrt(2.0 / L) * np.sin(k * np.pi * np.asarray(x, dtype=float) / L)

    def synthesize(self, coefficients, x):
        """Evaluate ``sum_k y_k e_k(x)`` for a mode vector."""
        y = np.asarray(coefficients, dtype=float)
        L = self.domain.length
        x = np.asarray(x, dtype=float)
        k = np.arange(1, y.shape[-1] + 1)
        return math.sqrt(2.0 / L) * np.sin(np.multiply.outer(x, k) * np.pi / L) @ y

    def mode(self, k: int) -> np.ndarray:
        """Unit mode vector for ``e_k``."""
        if not 1 <= k <= self.truncation:
            raise ValueError(f"mode index {k} outside 1..{self.truncation}")
        v = np.zeros(self.truncation)
        v[k - 1] = 1.0
        return v


def count_modes(lam: float, basis: EigenBasis) -> int:
    """Number of eigenvalues ``tau_k <= lam`` (with multiplicity).

    Raises :class:`TruncationError` when ``tau_M <= lam``: modes beyond the
    truncation could also satisfy the bound and would be missed.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    tau = basis.eigenvalues
    if tau[-1] <= lam:
        raise TruncationError(
            f"truncation M={basis.truncation} too small: tau_M={tau[-1]:.6g} <= lambda={lam:.6g}"
        )
    # Counting over the sorted spectrum, so repeated eigenvalues are all included.
    return int(np.searchsorted(tau, lam, side="right"))


def _check_split(v: np.ndarray, n: int) -> None:
    if int(n) != n or n < 0 or n > v.shape[-1]:
        raise ValueError(f"projection size {n!r} outside 0..{v.shape[-1]}")


def project_low(v, n: int) -> np.ndarray:
    """Keep the first ``n`` coefficients, zero the rest (works on stacked vectors)."""
    v = np.asarray(v, dtype=float)
    _check_split(v, n)
    out = np.zeros_like(v)
    out[..., :n] = v[..., :n]
    return out


def project_high(v, n: int) -> np.ndarray:
    """Complement of :func:`project_low`."""
    v = np.asarray(v, dtype=float)
    _check_split(v, n)
    out = np.zeros_like(v)
    out[..., n:] = v[..., n:]
    return out
