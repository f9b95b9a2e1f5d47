"""Propensity scores, greedy caliper 1:M matching and the choice of M."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .glm import DesignMatrix, fit_logistic_limit

DEFAULT_CALIPER = 0.2
# admission tolerance for comparing matching rates (rates are ratios of small ints)
_RATE_EPS = 1e-12


class MatchingInfeasibleError(RuntimeError):
    """The propensity model could not be fitted (treatment status separated)."""


@dataclass
class PropensityScores:
    """Logit-scale propensity scores for one matching problem.

    Positions in ``treated_scores``/``control_scores`` line up with
    ``treated_ids``/``control_ids``.
    """

    treated_scores: np.ndarray
    control_scores: np.ndarray
    treated_ids: np.ndarray = None
    control_ids: np.ndarray = None
    pooled_sd: float = None
    coefficients: np.ndarray = None

    def __post_init__(self):
        self.treated_scores = np.asarray(self.treated_scores, dtype=np.float64)
        self.control_scores = np.asarray(self.control_scores, dtype=np.float64)
        if self.treated_ids is None:
            self.treated_ids = np.arange(len(self.treated_scores))
        if self.control_ids is None:
            self.control_ids = np.arange(len(self.control_scores))
        self.treated_ids = np.asarray(self.treated_ids, dtype=np.int64)
        self.control_ids = np.asarray(self.control_ids, dtype=np.int64)
        if self.pooled_sd is None:
            allv = np.concatenate([self.treated_scores, self.control_scores])
            allv = allv[np.isfinite(allv)]
            self.pooled_sd = float(np.std(allv, ddof=1)) if allv.size > 1 else 0.0
        if np.isnan(self.treated_scores).any() or np.isnan(self.control_scores).any():
            raise ValueError("propensity scores must not be NaN")
        self._orders = None

    @property
    def orders(self):
        """Cached processing and search orders used by the matching kernel."""
        if self._orders is None:
            t_order = np.lexsort((self.treated_ids, -self.treated_scores))
            c_asc = np.lexsort((self.control_ids, self.control_scores))
            c_desc = np.lexsort((self.control_ids, -self.control_scores))
            self._orders = (t_order, c_asc, c_desc)
        return self._orders


@dataclass
class MatchResult:
    M: int
    treated_ids: np.ndarray
    control_sets: np.ndarray  # (n_treated, M) control ids, -1 rows when unmatched
    caliper: float
    matched_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.matched_mask = self.control_sets[:, 0] >= 0 if self.control_sets.size else np.zeros(
            len(self.treated_ids), dtype=bool
        )

    @property
    def n_offered(self) -> int:
        return len(self.treated_ids)

    @property
    def n_matched(self) -> int:
        return int(self.matched_mask.sum())

    @property
    def matching_rate(self) -> float:
        return self.n_matched / self.n_offered if self.n_offered else 0.0

    @property
    def matched_sets(self) -> list[tuple[int, list[int]]]:
        return [
            (int(t), [int(c) for c in cs])
            for t, cs, ok in zip(self.treated_ids, self.control_sets, self.matched_mask)
            if ok
        ]

    @property
    def unmatched_intervention_ids(self) -> np.ndarray:
        return self.treated_ids[~self.matched_mask]

    @property
    def matched_intervention_ids(self) -> np.ndarray:
        return self.treated_ids[self.matched_mask]

    @property
    def matched_control_ids(self) -> np.ndarray:
        return self.control_sets[self.matched_mask].ravel()


def estimate_propensity(
    treated_covariates,
    control_covariates,
    treated_ids=None,
    control_ids=None,
) -> PropensityScores:
    """Logit of P(treated | covariates) for every patient in the problem.

    Covariate matrices are (n, k) without an intercept column; one is added.
    """
    Xt = np.atleast_2d(np.asarray(treated_covariates, dtype=float))
    Xc = np.atleast_2d(np.asarray(control_covariates, dtype=float))
    if Xt.shape[0] == 0 or Xc.shape[0] == 0:
        raise ValueError("both groups must be non-empty")
    X = np.vstack([Xt, Xc])
    X = np.column_stack([np.ones(X.shape[0]), X])
    y = np.r_[np.ones(Xt.shape[0]), np.zeros(Xc.shape[0])]
    try:
        lim = fit_logistic_limit(DesignMatrix(X, y))
    except ValueError as exc:
        raise MatchingInfeasibleError(str(exc)) from exc
    if not lim.fit.converged:
        raise MatchingInfeasibleError("propensity model did not converge (separation or singular design)")
    coefficients = np.zeros(X.shape[1])
    coefficients[lim.first_columns] = lim.first.coefficients
    if lim.first.converged:
        eta = X @ coefficients
    else:
        # quasi-separation: perfectly predicted patients sit at +/-inf and can never be matched
        eta = np.where(y > 0, np.inf, -np.inf)
        eta[lim.rows] = X[np.ix_(lim.rows, lim.columns)] @ lim.fit.coefficients
    finite = eta[np.isfinite(eta)]
    nt = Xt.shape[0]
    return PropensityScores(
        treated_scores=eta[:nt],
        control_scores=eta[nt:],
        treated_ids=treated_ids,
        control_ids=control_ids,
        pooled_sd=float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0,
        coefficients=coefficients,
    )


def caliper_width(scores: PropensityScores, caliper_multiplier: float = DEFAULT_CALIPER) -> float:
    if scores.pooled_sd <= 0.0:
        return np.inf
    return caliper_multiplier * scores.pooled_sd


def match_1_to_M(scores: PropensityScores, M: int, caliper_multiplier: float = DEFAULT_CALIPER) -> MatchResult:
    """Greedy nearest-neighbour 1:M matching without replacement.

    Treated patients are served in descending score order (ties: lower id);
    each takes its M closest still-available controls, ties going to the lower
    control id.  A patient without M controls inside the caliper stays
    unmatched and consumes nothing.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    t_order, c_asc, c_desc = scores.orders
    caliper = caliper_width(scores, caliper_multiplier)
    available = np.ones(len(scores.control_scores), dtype=np.bool_)
    pos = _kernels.greedy_match(
        scores.treated_scores, t_order, scores.control_scores, scores.control_ids,
        c_asc, c_desc, available, int(M), float(caliper),
    )
    sets = np.where(pos >= 0, scores.control_ids[np.maximum(pos, 0)], -1)
    return MatchResult(M=int(M), treated_ids=scores.treated_ids.copy(), control_sets=sets, caliper=caliper)


def determine_M(
    scores: PropensityScores,
    tau: float,
    M_max: int,
    caliper_multiplier: float = DEFAULT_CALIPER,
) -> tuple[int, MatchResult]:
    """Largest M whose matching rate stays within ``tau`` of the 1:1 rate.

    M grows from 2 while ``rate(1:M) >= rate(1:1) - tau`` and ``M <= M_max``;
    the first failure stops the search.
    """
    if M_max < 1:
        raise ValueError("M_max must be >= 1")
    best = match_1_to_M(scores, 1, caliper_multiplier)
    floor = best.matching_rate - tau - _RATE_EPS
    M = 2
    while M <= M_max:
        res = match_1_to_M(scores, M, caliper_multiplier)
        if res.matching_rate < floor:
            break
        best = res
        M += 1
    return best.M, best


def m_max_from_pool(n_controls: int, max_trial_patients: int) -> int:
    if n_controls <= 0 or max_trial_patients <= 0:
        raise ValueError("counts must be positive")
    return max(1, n_controls // max_trial_patients)
