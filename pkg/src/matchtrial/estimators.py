"""Point estimators and the repeated confidence bound for the two-stage design."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .stats_core import norm_quantile


@dataclass
class StagePair:
    theta1: float
    se1: float
    theta2: float | None = None
    se2: float | None = None
    mr1: float = 1.0
    n1: int = 0
    mr2: float = 1.0
    n2: int = 0
    w1: float = math.sqrt(0.5)
    w2: float = math.sqrt(0.5)

    def __post_init__(self):
        if self.se1 <= 0:
            raise ValueError("se1 must be positive")
        if (self.theta2 is None) != (self.se2 is None):
            raise ValueError("theta2 and se2 must be given together")
        if self.se2 is not None and self.se2 <= 0:
            raise ValueError("se2 must be positive")

    @property
    def stopped(self) -> bool:
        return self.theta2 is None


def estimate_ml(s: StagePair, weights: str = "normalized") -> float:
    """Effective-sample-size weighted average of the stage estimates.

    ``weights="as-printed"`` uses ``n2`` instead of ``mr2 * n2`` in the
    stage II numerator, so the weights only sum to one when ``mr2 == 1``.
    """
    if s.stopped:
        return s.theta1
    e1 = s.mr1 * s.n1
    e2 = s.mr2 * s.n2
    denom = e1 + e2
    if weights == "normalized":
        return (e1 * s.theta1 + e2 * s.theta2) / denom
    if weights == "as-printed":
        return (e1 * s.theta1 + s.n2 * s.theta2) / denom
    raise ValueError(f"unknown ML weighting {weights!r}")


def estimate_fwml(s: StagePair, omega: float | None = None) -> float:
    if omega is None:
        omega = s.w1 ** 2
    if not 0.0 < omega < 1.0:
        raise ValueError("omega must lie in (0, 1)")
    if s.stopped:
        return s.theta1
    return omega * s.theta1 + (1.0 - omega) * s.theta2


def awml_weight(s: StagePair) -> float:
    a = s.w1 / s.se1
    b = s.w2 / s.se2
    return a / (a + b)


def estimate_awml(s: StagePair) -> float:
    if s.stopped:
        return s.theta1
    om = awml_weight(s)
    return om * s.theta1 + (1.0 - om) * s.theta2


def repeated_ci_lower(s: StagePair, alpha: float) -> float:
    """Lower bound of the one-sided (1 - alpha) repeated confidence interval."""
    z = norm_quantile(1.0 - alpha)
    if s.stopped:
        return s.theta1 - z * s.se1
    return estimate_awml(s) - z / (s.w1 / s.se1 + s.w2 / s.se2)
