"""Two-stage adaptive design calculus.

Inverse normal combination of stage-wise p-values, conditional error,
futility rule, the approximate interim standard error and stop probability,
conditional power selection and stage II sample-size recalculation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum

from .stats_core import norm_cdf, norm_quantile, norm_sf

P_CLAMP = 1e-15


class RecalcMode(str, Enum):
    PLANNED = "planned-effect"
    INTERIM = "interim-estimate"


class StageTwoRateMode(str, Enum):
    NAIVE = "naive"
    WALD = "wald-lower-99"


class AnalysisMode(str, Enum):
    LOGISTIC = "logistic"
    CMH = "cmh"


SEPARATION_POLICIES = ("limit", "abort", "r-compat")


class DesignValidationError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass(frozen=True)
class DesignParams:
    alpha: float = 0.025
    beta: float = 0.2
    theta_plan: float = math.log(0.7 / 0.3)
    theta_stop: float = math.log(1.3)
    theta_cross: float = 0.0
    w1: float = math.sqrt(0.5)
    w2: float = math.sqrt(0.5)
    n1: int = 20
    n2_min: int = 10
    n2_max: int = 80
    tau: float = 0.05
    M_max: int = 5
    recalc_mode: RecalcMode = RecalcMode.PLANNED
    cp_cap: float = 0.99
    mr2_mode: StageTwoRateMode = StageTwoRateMode.WALD
    # response rates used only for the planning-stage cp lookup
    pi_t_plan: float = 0.5
    pi_c_plan: float = 0.3
    caliper: float = 0.2
    analysis: AnalysisMode = AnalysisMode.LOGISTIC
    ml_weights: str = "normalized"
    # "limit": fit on the non-separated part when only nuisance terms diverge;
    # "abort": any separation ends stage I on the futility path (stage II is ignored);
    # "r-compat": keep the finite iterate R's glm.fit would report
    separation_policy: str = "limit"

    def __post_init__(self):
        for name, enum in (("recalc_mode", RecalcMode), ("mr2_mode", StageTwoRateMode), ("analysis", AnalysisMode)):
            value = getattr(self, name)
            if not isinstance(value, enum):
                try:
                    object.__setattr__(self, name, enum(value))
                except ValueError:
                    allowed = ", ".join(e.value for e in enum)
                    raise DesignValidationError(name, f"must be one of {allowed}, got {value!r}") from None
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 0.5:
            raise DesignValidationError("alpha", "must lie in (0, 0.5]")
        if not 0.0 < self.beta < 1.0:
            raise DesignValidationError("beta", "must lie in (0, 1)")
        if self.w1 <= 0 or self.w2 <= 0:
            raise DesignValidationError("w1", "combination weights must be positive")
        if abs(self.w1 ** 2 + self.w2 ** 2 - 1.0) > 1e-12:
            raise DesignValidationError("w1", f"w1^2 + w2^2 must equal 1 (got {self.w1 ** 2 + self.w2 ** 2!r})")
        if self.n1 < 1:
            raise DesignValidationError("n1", "must be >= 1")
        if self.n2_min < 1:
            raise DesignValidationError("n2_min", "must be >= 1")
        if self.n2_max < self.n2_min:
            raise DesignValidationError("n2_max", "must be >= n2_min")
        if self.tau < 0:
            raise DesignValidationError("tau", "must be >= 0")
        if self.M_max < 1:
            raise DesignValidationError("M_max", "must be >= 1")
        if not 0.0 < self.cp_cap < 1.0:
            raise DesignValidationError("cp_cap", "must lie in (0, 1)")
        for name in ("pi_t_plan", "pi_c_plan"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise DesignValidationError(name, "must lie in (0, 1)")
        if self.caliper <= 0:
            raise DesignValidationError("caliper", "must be positive")
        if self.ml_weights not in ("normalized", "as-printed"):
            raise DesignValidationError("ml_weights", "must be 'normalized' or 'as-printed'")
        if self.separation_policy not in SEPARATION_POLICIES:
            raise DesignValidationError("separation_policy", f"must be one of {', '.join(SEPARATION_POLICIES)}")

    @classmethod
    def equal_weights(cls, **kw) -> "DesignParams":
        return cls(w1=math.sqrt(0.5), w2=math.sqrt(0.5), **kw)

    def with_(self, **kw) -> "DesignParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else v
        return out


@dataclass
class InterimResult:
    theta1_hat: float
    se1: float
    p1: float
    stop_for_futility: bool
    M: int
    mr1: float
    cp_used: float = float("nan")
    mr2_hat: float = float("nan")
    n2_star: float = float("nan")
    n2_final: int = 0
    notes: list = field(default_factory=list)


def _clamp_p(p: float) -> float:
    return min(max(p, P_CLAMP), 1.0 - P_CLAMP)


def _z(p: float) -> float:
    """``Phi^-1(1 - p)`` after clamping p away from 0 and 1."""
    return -norm_quantile(_clamp_p(p))


def combine_p_values(p1: float, p2: float, w1: float, w2: float) -> float:
    """Inverse normal combination ``1 - Phi(w1 z1 + w2 z2)``."""
    return norm_sf(w1 * _z(p1) + w2 * _z(p2))


def conditional_error(p1: float, params: DesignParams) -> float:
    """Stage II significance level that keeps the overall test at alpha."""
    z_alpha = norm_quantile(1.0 - params.alpha)
    return norm_sf((z_alpha - params.w1 * _z(p1)) / params.w2)


def futility_decision(theta1_hat: float, theta_stop: float) -> bool:
    """True means stop: the interim estimate falls strictly below the threshold."""
    return theta1_hat < theta_stop


def approx_se_stage1(n1_eff: float, M: float, pi_T: float, pi_C: float) -> float:
    """Asymptotic SE of the interim log odds ratio with M controls per patient."""
    n = n1_eff
    return math.sqrt(1 / (n * pi_T) + 1 / (n * (1 - pi_T)) + 1 / (n * M * pi_C) + 1 / (n * M * (1 - pi_C)))


def futility_probability(theta: float, theta_stop: float, se: float) -> tuple[float, float]:
    """Approximate (p_stop, p_continue) for a true effect ``theta``."""
    if se <= 0:
        raise ValueError("se must be positive")
    z = (theta - theta_stop) / se
    p_stop = norm_sf(z)
    return p_stop, 1.0 - p_stop


def conditional_power_target(beta: float, p_continue_plan: float, cp_cap: float = 0.99) -> float:
    if p_continue_plan < 1.0 - beta:
        return cp_cap
    return min((1.0 - beta) / p_continue_plan, cp_cap)


def cp_table(params: DesignParams, n1_eff: float | None = None) -> dict[int, float]:
    """Conditional power to use for every feasible M, fixed before the trial.

    The stage I effective size defaults to ``n1`` (matching rate unknown at
    planning time); control/treatment response rates are the planning values.
    """
    n_eff = params.n1 if n1_eff is None else n1_eff
    table = {}
    for M in range(1, params.M_max + 1):
        se = approx_se_stage1(n_eff, M, params.pi_t_plan, params.pi_c_plan)
        _, p_cont = futility_probability(params.theta_plan, params.theta_stop, se)
        table[M] = conditional_power_target(params.beta, p_cont, params.cp_cap)
    return table


def estimate_stage2_mr(mr1: float, n1: int, mode: StageTwoRateMode | str = StageTwoRateMode.WALD) -> float:
    """Projected stage II matching rate.

    ``wald-lower-99`` uses the lower one-sided 99% Wald limit computed from the
    stage I rate; the result is floored at 1e-6 so the recalculated sample
    size stays finite.
    """
    mode = StageTwoRateMode(mode)
    if not 0.0 < mr1 <= 1.0:
        raise ValueError("mr1 must lie in (0, 1]")
    if mode is StageTwoRateMode.NAIVE or mr1 >= 1.0:
        return mr1
    half = norm_quantile(0.99) * math.sqrt(mr1 * (1.0 - mr1) / (mr1 * n1))
    return min(max(mr1 - half, 1e-6), 1.0)


def recalc_stage2_n(
    p1: float,
    se1: float,
    mr1: float,
    params: DesignParams,
    theta_recalc: float,
    cp: float,
    mr2_hat: float | None = None,
) -> tuple[float, int]:
    """Stage II sample size from the conditional power argument.

    Returns the raw requirement ``n2_star`` (matched patients) and the number
    to enrol, ``ceil(n2_star / mr2_hat)`` clamped to ``[n2_min, n2_max]``.
    A non-positive effect for recalculation gives ``n2_star = inf``; when the
    conditional error already exceeds ``cp`` no further information is
    needed and ``n2_star = 0``.
    """
    if mr2_hat is None:
        mr2_hat = estimate_stage2_mr(mr1, params.n1, params.mr2_mode)
    effect = max(theta_recalc - params.theta_cross, 0.0)
    z_alpha = norm_quantile(1.0 - params.alpha)
    drift = norm_quantile(cp) + (z_alpha - params.w1 * _z(p1)) / params.w2
    if effect == 0.0:
        n2_star = math.inf
    elif drift <= 0.0:
        n2_star = 0.0
    else:
        n2_star = params.n1 * mr1 * se1 ** 2 * drift ** 2 / effect ** 2
    if math.isinf(n2_star):
        return n2_star, params.n2_max
    n2 = math.ceil(n2_star / mr2_hat - 1e-9)
    return n2_star, int(min(max(n2, params.n2_min), params.n2_max))


# absorbs last-ulp noise when p_total sits exactly on alpha
_BOUNDARY_TOL = 1e-13


def final_test(p1: float, p2: float, params: DesignParams) -> tuple[float, bool]:
    p_total = combine_p_values(p1, p2, params.w1, params.w2)
    return p_total, p_total <= params.alpha + _BOUNDARY_TOL
