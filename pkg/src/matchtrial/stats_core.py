"""Normal distribution helpers, random streams and 2x2 table arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

_STD_NORMAL = NormalDist()
_SQRT2 = math.sqrt(2.0)


def norm_cdf(x: float) -> float:
    """Standard normal CDF; saturates to 0/1 in the tails."""
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_sf(x: float) -> float:
    """Upper tail ``1 - norm_cdf(x)`` without cancellation for large ``x``."""
    return 0.5 * math.erfc(x / _SQRT2)


def norm_quantile(p: float) -> float:
    """Inverse of :func:`norm_cdf`.

    Raises
    ------
    ValueError
        If ``p`` is not strictly inside (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"norm_quantile requires 0 < p < 1, got {p!r}")
    return _STD_NORMAL.inv_cdf(p)


def expit(x):
    return 1.0 / (1.0 + np.exp(-x))


class RngStream:
    """Independent random stream for one replication.

    The stream is keyed by ``(base_seed, stream_index)`` through
    :class:`numpy.random.SeedSequence` spawn keys and drives a counter-based
    Philox generator, so replication ``i`` draws the same numbers no matter
    which worker runs it or in which order.
    """

    __slots__ = ("base_seed", "stream_index", "generator")

    def __init__(self, base_seed: int, stream_index: int = 0):
        if base_seed < 0 or stream_index < 0:
            raise ValueError("seeds must be non-negative")
        self.base_seed = int(base_seed)
        self.stream_index = int(stream_index)
        seq = np.random.SeedSequence(self.base_seed, spawn_key=(self.stream_index,))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RngStream(base_seed={self.base_seed}, stream_index={self.stream_index})"

    def normal(self, mean: float, sd: float, size=None):
        if sd < 0:
            raise ValueError("sd must be non-negative")
        z = self.generator.standard_normal(size)
        return mean + sd * z

    def uniform(self, size=None):
        return self.generator.random(size)

    def bernoulli(self, p, size=None):
        return (self.generator.random(size) < p).astype(np.int64)


def draw_normal(s: RngStream, mean: float, sd: float) -> float:
    """One draw from N(mean, sd^2). ``sd == 0`` returns ``mean`` exactly."""
    return float(s.normal(mean, sd))


def draw_bernoulli(s: RngStream, p: float) -> int:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p!r}")
    return int(s.uniform() < p)


class UndefinedEstimateError(ValueError):
    """A 2x2 log odds ratio was requested for a table with an empty cell."""


@dataclass(frozen=True)
class TwoByTwoTable:
    """Responder counts by arm: treatment row first, control row second."""

    responders_T: float
    nonresponders_T: float
    responders_C: float
    nonresponders_C: float

    def __post_init__(self):
        if min(self.cells) < 0:
            raise ValueError("2x2 table cells must be non-negative")

    @property
    def cells(self) -> tuple[float, float, float, float]:
        return (self.responders_T, self.nonresponders_T, self.responders_C, self.nonresponders_C)

    @property
    def total(self) -> float:
        return sum(self.cells)

    def swapped(self) -> "TwoByTwoTable":
        """Same table with the treatment and control rows exchanged."""
        return TwoByTwoTable(self.responders_C, self.nonresponders_C, self.responders_T, self.nonresponders_T)


def log_odds_ratio_2x2(t: TwoByTwoTable) -> tuple[float, float]:
    """Log odds ratio of treatment vs control and its Woolf standard error.

    No continuity correction is applied; any empty cell raises
    :class:`UndefinedEstimateError`.
    """
    a, b, c, d = t.cells
    if min(a, b, c, d) <= 0:
        raise UndefinedEstimateError(f"log odds ratio undefined for table {t.cells}")
    estimate = math.log(a) + math.log(d) - math.log(b) - math.log(c)
    se = math.sqrt(1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
    return estimate, se
