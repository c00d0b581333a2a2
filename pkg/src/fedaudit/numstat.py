"""Deterministic numeric primitives.

Counter-based RNG streams (Philox) keyed by ``(seed, stream_id)`` so that
every client/round/sample draws from its own reproducible stream regardless
of execution order, plus the small set of scalar and vector routines the
rest of the simulator is built on: population summary statistics, the
standard-normal CDF used by the one-tailed test, and inner-product /
cosine helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateDistributionError,
    EmptySampleError,
    ParameterError,
    ShapeMismatchError,
    ZeroVectorError,
)

_MASK64 = (1 << 64) - 1
_SQRT2 = math.sqrt(2.0)


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer (stateless 64-bit mixing)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """A value-typed handle for a reproducible random stream.

    Two streams with the same ``(seed, stream_id)`` replay bit-identical
    sequences; distinct ``stream_id`` values index statistically
    independent Philox counter streams. Streams are plain values and may
    be copied freely across threads.
    """

    seed: int
    stream_id: int = 0

    def derive(self, *ids: int) -> "RngStream":
        """Child stream obtained by folding integer tags into the id."""
        h = self.stream_id & _MASK64
        for v in ids:
            h = _splitmix64(h ^ _splitmix64(v & _MASK64))
        return RngStream(self.seed, h)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the origin of this stream."""
        key = ((self.seed & _MASK64) << 64) | (self.stream_id & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SummaryStats:
    """Mean and population variance (divide-by-n) of a sample."""

    mean: float
    variance: float
    count: int


def summary(values: Sequence[float] | np.ndarray) -> SummaryStats:
    """Population mean/variance of a non-empty sample.

    The variance divides by the sample count, not ``count - 1``; a
    constant sample therefore has variance exactly zero.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptySampleError("summary of an empty sample")
    if not np.all(np.isfinite(v)):
        raise ParameterError("summary requires finite values")
    if np.all(v == v.flat[0]):
        return SummaryStats(float(v.flat[0]), 0.0, int(v.size))
    mean = float(v.mean())
    var = float(np.mean((v - mean) ** 2))
    return SummaryStats(mean, var, int(v.size))


def gaussian_cdf(x: float, mean: float = 0.0, variance: float = 1.0) -> float:
    """P(X <= x) for X ~ Normal(mean, variance).

    Raises ``DegenerateDistributionError`` when ``variance <= 0``; callers
    that can see a collapsed null distribution apply a variance floor
    before calling (see the attack scoring rule).
    """
    if not (math.isfinite(x) and math.isfinite(mean) and math.isfinite(variance)):
        raise ParameterError("gaussian_cdf requires finite inputs")
    if variance <= 0.0:
        raise DegenerateDistributionError(f"variance must be > 0, got {variance}")
    z = (x - mean) / math.sqrt(variance)
    return 0.5 * (1.0 + math.erf(z / _SQRT2))


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def dot(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return float(np.dot(a, b))


def norm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.dot(a, a)))


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``y + alpha * x`` as a new vector."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y)
    return y + alpha * x


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; both operands must have nonzero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    na = norm(a)
    nb = norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine of a zero-norm vector (zero gradient)")
    return float(np.dot(a, b) / (na * nb))


def sample_gaussian(rng: RngStream, mean: float, std: float, dim: int) -> np.ndarray:
    """``dim`` i.i.d. Normal(mean, std^2) draws; std = 0 gives the constant vector."""
    if std < 0.0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if dim < 0:
        raise ParameterError(f"dim must be >= 0, got {dim}")
    if std == 0.0:
        return np.full(dim, float(mean))
    g = rng.generator()
    return mean + std * g.standard_normal(dim)


def sample_beta(rng: RngStream, alpha: float) -> float:
    """One draw from the symmetric Beta(alpha, alpha) distribution."""
    if alpha <= 0.0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    return float(rng.generator().beta(alpha, alpha))


def sample_dirichlet(rng: RngStream, beta: float, dim: int) -> np.ndarray:
    """One probability vector drawn from Dirichlet(beta * 1_dim)."""
    if beta <= 0.0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    if dim == 1:
        return np.ones(1)
    return rng.generator().dirichlet(np.full(dim, float(beta)))
