"""Control region, Gram/coupling matrices and the spectral-inequality constant.

The control set is a finite union of disjoint intervals. Inner products of
sine eigenfunctions over it are evaluated in closed form, so the only
approximation left is floating-point round-off.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .basis import EigenBasis, count_modes
from .errors import ConfigError, SingularGramError

__all__ = [
    "ControlRegion",
    "CouplingMatrix",
    "SpectralCalibration",
    "parse_region",
    "gram_entry",
    "gram_matrix",
    "build_coupling",
    "spectral_bound",
    "calibrate_spectral_constant",
]

SINGULAR_TOL = 1e-14


@dataclass(frozen=True)
class ControlRegion:
    """Union of disjoint open intervals ``(a_i, b_i)``, sorted by left end."""

    intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(a), float(b)) for a, b in self.intervals)
        if not ivs:
            raise ConfigError("region: at least one interval is required")
        for a, b in ivs:
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ConfigError(f"region: non-finite endpoint in ({a}, {b})")
            if not a < b:
                raise ConfigError(f"region: interval ({a}, {b}) is empty or reversed")
            if a < 0:
                raise ConfigError(f"region: interval ({a}, {b}) starts below 0")
        for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
            if a1 < b0:
                raise ConfigError("region: intervals must be sorted and non-overlapping")
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def full(cls, length: float) -> "ControlRegion":
        return cls(((0.0, length),))

    @property
    def measure(self) -> float:
        return sum(b - a for a, b in self.intervals)

    def check_within(self, length: float) -> None:
        if self.intervals[-1][1] > length * (1 + 1e-12):
            raise ConfigError(
                f"region: interval ends at {self.intervals[-1][1]} beyond domain length {length}"
            )

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for a, b in self.intervals:
            out |= (x > a) & (x < b)
        return out

    def to_string(self) -> str:
        return ",".join(f"{a!r}-{b!r}" for a, b in self.intervals)

    def __str__(self):
        return self.to_string()


_NUM = r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_COORD = rf"(?:{_NUM}|(?:{_NUM}\*?)?pi(?:/{_NUM})?)"
_INTERVAL = re.compile(rf"^\s*({_COORD})\s*-\s*({_COORD})\s*$")


def _coord(tok: str) -> float:
    if "pi" not in tok:
        return float(tok)
    head, _, tail = tok.partition("pi")
    scale = float(head.rstrip("*")) if head else 1.0
    div = float(tail[1:]) if tail else 1.0
    return scale * math.pi / div


def parse_region(text: str) -> ControlRegion:
    """Parse ``"a1-b1,a2-b2"``; endpoints may be written like ``pi/2`` or ``0.25*pi``."""
    if not isinstance(text, str) or not text.strip():
        raise ConfigError("region: empty specification")
    ivs = []
    for part in text.split(","):
        m = _INTERVAL.match(part)
        if m is None:
            raise ConfigError(f"region: cannot parse interval {part.strip()!r} (expected a-b)")
        ivs.append((_coord(m.group(1)), _coord(m.group(2))))
    return ControlRegion(tuple(ivs))


def _cos_integral(freq, a, b, length):
    """``int_a^b cos(freq*pi*x/L) dx`` via the product form, stable for short intervals."""
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    return (b - a) * np.cos(freq * np.pi * mid / length) * np.sinc(freq * half / length)


def _gram_block(region: ControlRegion, basis: EigenBasis, rows, cols) -> np.ndarray:
    L = basis.length
    i = np.asarray(rows, dtype=float)[:, None]
    j = np.asarray(cols, dtype=float)[None, :]
    out = np.zeros((i.shape[0], j.shape[1]))
    for a, b in region.intervals:
        # 2 sin(u) sin(v) = cos(u - v) - cos(u + v)
        out += _cos_integral(i - j, a, b, L) - _cos_integral(i + j, a, b, L)
    return out / L


def gram_entry(i: int, j: int, region: ControlRegion, basis: EigenBasis) -> float:
    """Inner product ``(e_i, e_j)`` over the control region."""
    for k in (i, j):
        if int(k) != k or not 1 <= k <= basis.truncation:
            raise ValueError(f"mode index {k!r} outside 1..{basis.truncation}")
    region.check_within(basis.length)
    return float(_gram_block(region, basis, [i], [j])[0, 0])


def gram_matrix(region: ControlRegion, basis: EigenBasis, n: int) -> np.ndarray:
    """Symmetric ``n x n`` Gram matrix ``J_n`` of the first ``n`` eigenfunctions."""
    if int(n) != n or not 1 <= n <= basis.truncation:
        raise ValueError(f"Gram size {n!r} outside 1..{basis.truncation}")
    region.check_within(basis.length)
    k = np.arange(1, n + 1)
    J = _gram_block(region, basis, k, k)
    return 0.5 * (J + J.T)


@dataclass(frozen=True)
class CouplingMatrix:
    """``entries[k, i] = (e_i, e_k)`` over the region for ``k < M``, ``i < n``."""

    entries: np.ndarray
    low_block: np.ndarray

    @property
    def n_low(self) -> int:
        return self.entries.shape[1]

    @property
    def high_block(self) -> np.ndarray:
        return self.entries[self.n_low:]


def build_coupling(region: ControlRegion, basis: EigenBasis, n: int) -> CouplingMatrix:
    if int(n) != n or not 1 <= n <= basis.truncation:
        raise ValueError(f"coupling width {n!r} outside 1..{basis.truncation}")
    region.check_within(basis.length)
    B = _gram_block(region, basis, np.arange(1, basis.truncation + 1), np.arange(1, n + 1))
    J = 0.5 * (B[:n] + B[:n].T)
    B[:n] = J
    B.setflags(write=False)
    J.setflags(write=False)
    return CouplingMatrix(B, J)


def spectral_bound(constant_C: float, lam: float) -> float:
    """Lower bound ``exp(-C sqrt(lam)) / C`` for the smallest Gram eigenvalue."""
    return math.exp(-constant_C * math.sqrt(lam)) / constant_C


@dataclass(frozen=True)
class SpectralCalibration:
    constant_C: float
    samples: tuple  # (lambda, N_lambda, smallest eigenvalue of J_{N_lambda})

    @property
    def lambdas(self) -> tuple:
        return tuple(s[0] for s in self.samples)

    def covers(self, lam: float) -> bool:
        return any(math.isclose(lam, s, rel_tol=1e-12, abs_tol=0.0) for s in self.lambdas)

    def certifies(self) -> bool:
        return self.constant_C >= 1 and all(
            spectral_bound(self.constant_C, lam) <= lmin for lam, _, lmin in self.samples
        )


def calibrate_spectral_constant(region: ControlRegion, basis: EigenBasis, lambdas,
                                c_max: float = 1e3, tol: float = 1e-6) -> SpectralCalibration:
    """Smallest ``C >= 1`` with ``exp(-C sqrt(lam))/C <= lambda_min(J_{N_lam})`` on the grid.

    The returned constant is an empirical certificate for the supplied
    lambda values only; it is found by bisection and always sits on the
    feasible side of the tolerance.
    """
    lambdas = sorted({float(x) for x in lambdas})
    if not lambdas:
        raise ValueError("calibration needs at least one lambda")
    samples = []
    for lam in lambdas:
        n = count_modes(lam, basis)
        if n < 1:
            raise ConfigError(f"lambda={lam} is below tau_1; N_lambda would be 0")
        lmin = float(np.linalg.eigvalsh(gram_matrix(region, basis, n))[0])
        if lmin <= SINGULAR_TOL:
            raise SingularGramError(
                f"Gram matrix J_{n} is numerically singular (lambda_min={lmin:.3e}) "
                f"for lambda={lam}; region {region} too thin at working precision"
            )
        samples.append((lam, n, lmin))

    def feasible(C):
        return all(spectral_bound(C, lam) <= lmin for lam, _, lmin in samples)

    if feasible(1.0):
        return SpectralCalibration(1.0, tuple(samples))
    if not feasible(c_max):
        raise SingularGramError(f"no constant C <= {c_max} certifies the calibration grid")
    lo, hi = 1.0, c_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return SpectralCalibration(hi, tuple(samples))
