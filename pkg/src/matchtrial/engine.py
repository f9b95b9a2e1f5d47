"""One replication of the matched-control adaptive two-stage trial, end to end."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import design as dz
from . import estimators as est
from .comparators import DegenerateStrataError, cmh_arrays
from .design import AnalysisMode, DesignParams, RecalcMode
from .glm import DesignMatrix, fit_logistic_limit, fit_logistic_r_compat
from .matching import MatchingInfeasibleError, MatchResult, determine_M, estimate_propensity, match_1_to_M
from .population import Cohort, OutcomeModel, generate_cohort
from .stats_core import RngStream, norm_quantile, norm_sf

# fault codes recorded on TrialOutcome.fault
FAULT_PROPENSITY_1 = "stage1-propensity"
FAULT_NO_MATCH_1 = "stage1-no-match"
FAULT_OUTCOME_1 = "stage1-outcome-fit"

NAN = float("nan")


class StageFitError(RuntimeError):
    """A stage-wise treatment effect could not be estimated."""

    def __init__(self, message: str, separated: bool = False, direction: int = 0):
        super().__init__(message)
        self.separated = separated
        # sign of a diverging treatment coefficient, 0 when treatment is not involved
        self.direction = direction


@dataclass
class StageEstimate:
    theta: float
    se: float
    p: float
    n_rows: int
    separated: bool = False  # a nuisance coefficient diverged; theta is the limiting fit


@dataclass
class TrialOutcome:
    rejected: bool
    stopped_at_interim: bool
    total_n: int
    n1: int
    n2: int = 0
    p1: float = NAN
    p2: float = NAN
    p_total: float = NAN
    M: int = 0
    mr1: float = NAN
    mr2: float = NAN
    mr2_hat: float = NAN
    cp: float = NAN
    n2_star: float = NAN
    theta1: float = NAN
    se1: float = NAN
    theta2: float = NAN
    se2: float = NAN
    theta_ml: float = NAN
    theta_fwml: float = NAN
    theta_awml: float = NAN
    ci_lower: float = NAN
    separation_stage1: bool = False
    separation_stage2: bool = False
    stage2_ignored: bool = False
    fault: str = ""
    stage1_match: MatchResult | None = field(default=None, repr=False)
    stage2_match: MatchResult | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        d = asdict(self)
        d.pop("stage1_match")
        d.pop("stage2_match")
        return d


def _matched_rows(treated: Cohort, pool: Cohort, match: MatchResult):
    """Row indices (into ``treated`` and ``pool``) of matched patients and controls.

    ``match`` must have been built from ``treated`` in its stored order, and
    pool ids must equal their positions (true for generated pools).
    """
    if len(match.treated_ids) != len(treated) or not np.array_equal(match.treated_ids, treated.ids):
        raise ValueError("match was not built from this cohort")
    t_idx = np.flatnonzero(match.matched_mask)
    c_idx = match.control_sets[t_idx].ravel()
    return t_idx, c_idx


def analyse_stage(
    treated: Cohort, pool: Cohort, match: MatchResult, params: DesignParams
) -> StageEstimate:
    """Treatment effect from the matched sample of one stage.

    ``logistic`` fits response ~ treated + age + cyto; ``cmh`` stratifies by
    matched set and uses the Mantel-Haenszel common odds ratio.
    """
    t_idx, c_idx = _matched_rows(treated, pool, match)
    if t_idx.size == 0:
        raise StageFitError("no matched patients")
    if params.analysis is AnalysisMode.LOGISTIC:
        nt, nc = t_idx.size, c_idx.size
        y = np.r_[treated.response[t_idx], pool.response[c_idx]]
        X = np.empty((nt + nc, 4))
        X[:, 0] = 1.0
        X[:nt, 1] = 1.0
        X[nt:, 1] = 0.0
        X[:nt, 2] = treated.age[t_idx]
        X[nt:, 2] = pool.age[c_idx]
        X[:nt, 3] = treated.cyto[t_idx]
        X[nt:, 3] = pool.cyto[c_idx]
        try:
            lim = fit_logistic_limit(DesignMatrix(X, y))
        except ValueError as exc:  # includes a constant response
            raise StageFitError(str(exc)) from exc
        first = lim.first
        if first.separated and params.separation_policy == "r-compat" and 1 in lim.first_columns:
            cols = lim.first_columns
            rfit = fit_logistic_r_compat(DesignMatrix(X[:, cols], y))
            k = int(np.flatnonzero(cols == 1)[0])
            theta, se = float(rfit.coefficients[k]), float(rfit.standard_errors[k])
            p = norm_sf((theta - params.theta_cross) / se)
            return StageEstimate(theta, se, p, nt + nc, separated=True)
        if first.separated and np.unique(X[lim.rows, 1]).size < 2:
            # the separable rows take out a whole arm: the treatment coefficient diverges
            diff = y[:nt].mean() - y[nt:].mean()
            direction = 1 if diff > 0 else -1 if diff < 0 else 0
            raise StageFitError("treatment effect separated", separated=True, direction=direction)
        if not lim.fit.converged or not lim.has(1):
            raise StageFitError("outcome model did not converge", separated=first.separated)
        if first.separated and params.separation_policy == "abort":
            raise StageFitError("covariate separated", separated=True)
        theta, se = lim.coef(1), lim.se(1)
        p = norm_sf((theta - params.theta_cross) / se)
        return StageEstimate(theta, se, p, nt + nc, separated=first.separated)

    M = match.M
    a = treated.response[t_idx].astype(float)
    ctl = pool.response[c_idx].reshape(-1, M).sum(axis=1).astype(float)
    try:
        res = cmh_arrays(a, 1.0 - a, ctl, M - ctl)
    except DegenerateStrataError as exc:
        raise StageFitError(str(exc)) from exc
    if not (math.isfinite(res.log_or) and math.isfinite(res.se_log_or)):
        direction = 1 if res.log_or > 0 else -1 if res.log_or < 0 else 0
        raise StageFitError("Mantel-Haenszel odds ratio is 0 or infinite", separated=True, direction=direction)
    if params.theta_cross == 0.0:
        p = res.p_value
    else:
        p = norm_sf((res.log_or - params.theta_cross) / res.se_log_or)
    return StageEstimate(res.log_or, res.se_log_or, p, int(t_idx.size * (M + 1)))


def _separated_estimate(direction: int, match: MatchResult) -> StageEstimate:
    # treated responses fully separated: the effect estimate is +/-inf, its p-value 0 or 1
    return StageEstimate(direction * math.inf, math.inf, 0.0 if direction > 0 else 1.0, match.n_matched * (match.M + 1))


def _stopped_outcome(out: TrialOutcome, params: DesignParams) -> TrialOutcome:
    out.stopped_at_interim = True
    out.rejected = False
    out.total_n = params.n1
    if not math.isnan(out.theta1):
        out.theta_ml = out.theta_fwml = out.theta_awml = out.theta1
        out.ci_lower = out.theta1 - norm_quantile(1 - params.alpha) * out.se1
    return out


def run_adaptive_trial(
    s: RngStream,
    model: OutcomeModel,
    params: DesignParams,
    pool: Cohort | None = None,
    n_C: int | None = None,
    cp_lookup: dict[int, float] | None = None,
    keep_matches: bool = False,
) -> TrialOutcome:
    """Simulate one trial: stage I, interim decision, recalculation, stage II.

    Without ``pool`` a fresh historical pool of ``n_C`` controls is drawn from
    the stream first. Stage I matched controls are never offered again in
    stage II.
    """
    if pool is None:
        if n_C is None:
            raise ValueError("either pool or n_C is required")
        pool = generate_cohort(s, model, n_C, treated=False, id_start=0)
    if cp_lookup is None:
        cp_lookup = dz.cp_table(params)
    n1 = params.n1
    out = TrialOutcome(rejected=False, stopped_at_interim=False, total_n=n1, n1=n1)

    stage1 = generate_cohort(s, model, n1, treated=True, id_start=len(pool))
    try:
        scores = estimate_propensity(stage1.covariates, pool.covariates, stage1.ids, pool.ids)
    except MatchingInfeasibleError:
        out.fault = FAULT_PROPENSITY_1
        return _stopped_outcome(out, params)
    M, m1 = determine_M(scores, params.tau, params.M_max, params.caliper)
    out.M = M
    out.mr1 = m1.matching_rate
    if keep_matches:
        out.stage1_match = m1
    if m1.n_matched == 0:
        out.fault = FAULT_NO_MATCH_1
        return _stopped_outcome(out, params)
    try:
        st1 = analyse_stage(stage1, pool, m1, params)
    except StageFitError as exc:
        out.separation_stage1 = exc.separated
        if exc.direction == 0 or params.separation_policy == "abort":
            out.fault = FAULT_OUTCOME_1
            return _stopped_outcome(out, params)
        st1 = _separated_estimate(exc.direction, m1)
    else:
        out.separation_stage1 = st1.separated
    out.theta1, out.se1, out.p1 = st1.theta, st1.se, st1.p

    if dz.futility_decision(st1.theta, params.theta_stop):
        return _stopped_outcome(out, params)

    theta_recalc = params.theta_plan if params.recalc_mode is RecalcMode.PLANNED else st1.theta
    out.cp = cp_lookup[M]
    out.mr2_hat = dz.estimate_stage2_mr(out.mr1, n1, params.mr2_mode)
    out.n2_star, n2 = dz.recalc_stage2_n(st1.p, st1.se, out.mr1, params, theta_recalc, out.cp, out.mr2_hat)
    out.n2 = n2
    out.total_n = n1 + n2

    stage2_new = generate_cohort(s, model, n2, treated=True, id_start=len(pool) + n1)
    leftovers = stage1.take(~m1.matched_mask)
    candidates = Cohort.concat([stage2_new, leftovers]) if len(leftovers) else stage2_new
    free = np.ones(len(pool), dtype=bool)
    free[m1.matched_control_ids] = False
    remaining = pool.take(free)

    st2 = None
    try:
        scores2 = estimate_propensity(candidates.covariates, remaining.covariates, candidates.ids, remaining.ids)
        m2 = match_1_to_M(scores2, M, params.caliper)
        out.mr2 = m2.matching_rate
        if keep_matches:
            out.stage2_match = m2
        st2 = analyse_stage(candidates, pool, m2, params)
        out.separation_stage2 = st2.separated
    except MatchingInfeasibleError:
        pass
    except StageFitError as exc:
        out.separation_stage2 = exc.separated

    alpha_z = norm_quantile(1 - params.alpha)
    if st2 is None:
        out.stage2_ignored = True
        out.p_total = st1.p
        out.rejected = st1.p <= params.alpha
        out.theta_ml = out.theta_fwml = out.theta_awml = st1.theta
        out.ci_lower = st1.theta - alpha_z * st1.se
        return out

    out.theta2, out.se2, out.p2 = st2.theta, st2.se, st2.p
    out.p_total, out.rejected = dz.final_test(st1.p, st2.p, params)
    pair = est.StagePair(
        theta1=st1.theta, se1=st1.se, theta2=st2.theta, se2=st2.se,
        mr1=out.mr1, n1=n1, mr2=out.mr2, n2=n2, w1=params.w1, w2=params.w2,
    )
    if not math.isfinite(st1.theta):
        out.theta_ml = out.theta_fwml = out.theta_awml = out.ci_lower = st1.theta
        return out
    out.theta_ml = est.estimate_ml(pair, params.ml_weights)
    out.theta_fwml = est.estimate_fwml(pair)
    out.theta_awml = est.estimate_awml(pair)
    out.ci_lower = est.repeated_ci_lower(pair, params.alpha)
    return out


def run_fixed_trial(
    s: RngStream,
    model: OutcomeModel,
    params: DesignParams,
    n: int,
    n_C: int,
    n_ceiling: int | None = None,
) -> bool:
    """One-stage trial with ``n`` patients, same matching and analysis; returns rejection.

    Patients are the first ``n`` of ``n_ceiling`` drawn after the pool, so runs
    with different ``n`` on the same stream share their patients.
    """
    n_ceiling = max(n, n_ceiling or n)
    pool = generate_cohort(s, model, n_C, treated=False, id_start=0)
    cohort = generate_cohort(s, model, n_ceiling, treated=True, id_start=n_C).head(n)
    try:
        scores = estimate_propensity(cohort.covariates, pool.covariates, cohort.ids, pool.ids)
    except MatchingInfeasibleError:
        return False
    _, m = determine_M(scores, params.tau, params.M_max, params.caliper)
    try:
        st = analyse_stage(cohort, pool, m, params)
    except StageFitError as exc:
        return exc.direction > 0
    return st.p <= params.alpha
