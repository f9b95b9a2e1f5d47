"""Stratified Cochran-Mantel-Haenszel test and the standard phase II comparators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .glm import DegenerateResponseError, DesignMatrix, fit_logistic
from .population import OutcomeModel, generate_cohort
from .stats_core import RngStream, TwoByTwoTable, norm_sf


class DegenerateStrataError(ValueError):
    """Every stratum has a zero margin; the CMH statistic is undefined."""


@dataclass
class CMHResult:
    statistic: float  # chi-square form, no continuity correction
    p_value: float  # one-sided, treatment > control
    common_or: float
    log_or: float
    se_log_or: float  # Robins-Breslow-Greenland

    def __iter__(self):
        # unpacks as (statistic, one-sided p, common odds ratio)
        return iter((self.statistic, self.p_value, self.common_or))


def cmh_arrays(a, b, c, d) -> CMHResult:
    """Vectorised CMH over strata given as arrays of cell counts.

    ``a``/``b`` are treated responders/non-responders, ``c``/``d`` the control
    counterparts, one entry per stratum.
    """
    a, b, c, d = (np.asarray(v, dtype=float) for v in (a, b, c, d))
    n = a + b + c + d
    keep = n > 1
    a, b, c, d, n = a[keep], b[keep], c[keep], d[keep], n[keep]
    n1 = a + b
    n0 = c + d
    m1 = a + c
    m0 = b + d
    var = n1 * n0 * m1 * m0 / (n * n * (n - 1.0))
    vsum = var.sum()
    if a.size == 0 or vsum <= 0.0:
        raise DegenerateStrataError("all strata have a zero margin")
    dev = (a - n1 * m1 / n).sum()
    z = dev / math.sqrt(vsum)
    R = a * d / n
    S = b * c / n
    Rs = R.sum()
    Ss = S.sum()
    if Ss > 0 and Rs > 0:
        common_or = Rs / Ss
        log_or = math.log(common_or)
        P = (a + d) / n
        Q = (b + c) / n
        v = (P * R).sum() / (2 * Rs * Rs) + (P * S + Q * R).sum() / (2 * Rs * Ss) + (Q * S).sum() / (2 * Ss * Ss)
        se = math.sqrt(v)
    else:
        common_or = math.inf if Ss == 0 else 0.0
        log_or = math.log(common_or) if common_or > 0 else -math.inf
        se = math.inf
    return CMHResult(statistic=z * z, p_value=norm_sf(z), common_or=common_or, log_or=log_or, se_log_or=se)


def cmh_test(strata: Sequence[TwoByTwoTable]) -> CMHResult:
    if not strata:
        raise DegenerateStrataError("no strata supplied")
    cells = np.array([t.cells for t in strata], dtype=float)
    return cmh_arrays(cells[:, 0], cells[:, 1], cells[:, 2], cells[:, 3])


@dataclass
class ComparatorOutcome:
    rejected: bool
    pi_t_hat: float
    pi_c_hat: float = float("nan")
    degenerate: bool = False


def run_single_arm(s: RngStream, model: OutcomeModel, n: int, p0: float = 0.3, alpha: float = 0.025) -> ComparatorOutcome:
    """Single-arm trial tested against a fixed rate with the normal approximation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cohort = generate_cohort(s, model, n, treated=True)
    p_hat = float(cohort.response.mean())
    z = (p_hat - p0) / math.sqrt(p0 * (1 - p0) / n)
    return ComparatorOutcome(rejected=norm_sf(z) <= alpha, pi_t_hat=p_hat)


RCT_ANALYSES = ("z-test", "adjusted-logistic", "cmh")


def run_rct(s: RngStream, model: OutcomeModel, n_per_arm: int = 50, alpha: float = 0.1, analysis: str = "z-test") -> ComparatorOutcome:
    """Randomised two-arm trial with exactly ``n_per_arm`` patients per arm.

    ``cmh`` stratifies on cytogenetic risk crossed with age below/above 55.
    """
    if n_per_arm < 2:
        raise ValueError("n_per_arm must be >= 2")
    if analysis not in RCT_ANALYSES:
        raise ValueError(f"analysis must be one of {RCT_ANALYSES}")
    trt = generate_cohort(s, model, n_per_arm, treated=True)
    ctl = generate_cohort(s, model, n_per_arm, treated=False, id_start=n_per_arm)
    pt = float(trt.response.mean())
    pc = float(ctl.response.mean())
    out = ComparatorOutcome(rejected=False, pi_t_hat=pt, pi_c_hat=pc)

    if analysis == "z-test":
        pbar = (pt + pc) / 2
        if pbar <= 0 or pbar >= 1:
            out.degenerate = True
            return out
        z = (pt - pc) / math.sqrt(pbar * (1 - pbar) * 2 / n_per_arm)
        out.rejected = norm_sf(z) <= alpha
    elif analysis == "adjusted-logistic":
        y = np.r_[trt.response, ctl.response]
        dm = DesignMatrix.with_intercept(
            {"treated": np.r_[np.ones(n_per_arm), np.zeros(n_per_arm)],
             "age": np.r_[trt.age, ctl.age],
             "cyto": np.r_[trt.cyto, ctl.cyto]},
            y,
        )
        try:
            fit = fit_logistic(dm)
        except DegenerateResponseError:
            out.degenerate = True
            return out
        if not fit.converged:
            out.degenerate = True
            return out
        out.rejected = norm_sf(fit.coef("treated") / fit.se("treated")) <= alpha
    else:
        tab = np.zeros((4, 4))
        for arm, cohort in ((0, trt), (1, ctl)):
            stratum = 2 * cohort.cyto + (cohort.age >= 55)
            for k in range(4):
                sel = stratum == k
                r = cohort.response[sel].sum()
                tab[k, 2 * arm] += r
                tab[k, 2 * arm + 1] += sel.sum() - r
        try:
            res = cmh_arrays(tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3])
        except DegenerateStrataError:
            out.degenerate = True
            return out
        out.rejected = res.p_value <= alpha
    return out
