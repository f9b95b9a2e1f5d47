"""Monte Carlo orchestration: scenarios, parallel replications and their summaries.

Replication ``i`` of a scenario always runs on ``RngStream(base_seed, i)``.
Workers return per-replication records in index order and every summary is
computed from the full, ordered record array, so results do not depend on
how many processes were used.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import design as dz
from .comparators import RCT_ANALYSES, run_rct, run_single_arm
from .design import DesignParams
from .engine import run_adaptive_trial, run_fixed_trial
from .population import Cohort, OutcomeModel, generate_cohort
from .stats_core import RngStream, expit

# stream index reserved for the shared pool in fixed-pool mode
POOL_STREAM = 2**62

COMPARATORS = ("none", "single-arm", "rct")

# per-replication record layout (float64 columns)
RECORD_FIELDS = (
    "rejected", "stopped", "total_n", "n2", "M", "mr1", "mr2", "mr2_hat",
    "theta_ml", "theta_fwml", "theta_awml", "ci_lower",
    "separation_stage1", "separation_stage2", "stage2_ignored", "fault",
    "pi_t_hat", "pi_c_hat", "degenerate",
)


class ScenarioError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass(frozen=True)
class ComparatorSpec:
    """Standard-design comparator run instead of the adaptive trial."""

    kind: str = "none"
    n: int = 44  # single-arm sample size
    p0: float = 0.3
    n_per_arm: int = 50
    alpha: float = 0.025
    analysis: str = "z-test"

    def validate(self) -> None:
        if self.kind not in COMPARATORS:
            raise ScenarioError("comparator.kind", f"must be one of {', '.join(COMPARATORS)}")
        if self.kind == "rct" and self.analysis not in RCT_ANALYSES:
            raise ScenarioError("comparator.analysis", f"must be one of {', '.join(RCT_ANALYSES)}")
        if self.n < 1 or self.n_per_arm < 2:
            raise ScenarioError("comparator.n", "sample sizes too small")
        if not 0.0 < self.alpha < 1.0:
            raise ScenarioError("comparator.alpha", "must lie in (0, 1)")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    model: OutcomeModel = field(default_factory=OutcomeModel)
    design: DesignParams = field(default_factory=DesignParams)
    n_C: int = 500
    replications: int = 10_000
    base_seed: int = 20240101
    fixed_pool: bool = False
    comparator: ComparatorSpec = field(default_factory=ComparatorSpec)
    theta_grid: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.theta_grid is not None:
            object.__setattr__(self, "theta_grid", tuple(float(t) for t in self.theta_grid))
        self.validate()

    def validate(self) -> None:
        if self.replications < 1:
            raise ScenarioError("replications", "must be >= 1")
        if self.n_C < 1:
            raise ScenarioError("n_C", "must be >= 1")
        if self.base_seed < 0:
            raise ScenarioError("base_seed", "must be non-negative")
        if self.theta_grid is not None and len(self.theta_grid) == 0:
            raise ScenarioError("theta_grid", "must be non-empty when given")
        self.comparator.validate()

    def with_(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "design": self.design.to_dict(),
            "n_C": self.n_C,
            "replications": self.replications,
            "base_seed": self.base_seed,
            "fixed_pool": self.fixed_pool,
            "comparator": asdict(self.comparator),
            "theta_grid": list(self.theta_grid) if self.theta_grid is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(sorted(unknown)[0], "unknown field")
        try:
            model = OutcomeModel(**(d.pop("model", None) or {}))
        except (TypeError, ValueError) as exc:
            raise ScenarioError("model", str(exc)) from None
        try:
            params = DesignParams(**(d.pop("design", None) or {}))
        except dz.DesignValidationError as exc:
            raise ScenarioError(f"design.{exc.field}", exc.message) from None
        except TypeError as exc:
            raise ScenarioError("design", str(exc)) from None
        try:
            comparator = ComparatorSpec(**(d.pop("comparator", None) or {}))
        except TypeError as exc:
            raise ScenarioError("comparator", str(exc)) from None
        grid = d.pop("theta_grid", None)
        return cls(model=model, design=params, comparator=comparator,
                   theta_grid=tuple(grid) if grid is not None else None, **d)


@dataclass
class AggregateStats:
    """Scenario summary. Rates carry binomial MC standard errors ``sqrt(r(1-r)/reps)``."""

    name: str
    theta: float
    replications: int
    reject_rate: float
    reject_se: float
    stop_rate: float
    stop_se: float
    expected_total_n: float
    expected_total_n_se: float
    expected_M: float
    expected_mr1: float
    expected_mr2: float
    expected_mr2_hat: float
    mr2_hat_at_mean_mr1: float
    p_stop_approx: float
    bias_ml: float
    bias_fwml: float
    bias_awml: float
    rmse_ml: float
    rmse_fwml: float
    rmse_awml: float
    ci_coverage: float
    ci_coverage_se: float
    nonfinite_estimates: int
    separation_stage1_count: int
    separation_stage2_count: int
    stage2_ignored_count: int
    fault_count: int
    expected_pi_t_hat: float
    expected_pi_c_hat: float
    degenerate_count: int

    def to_row(self) -> dict:
        return asdict(self)


COLUMNS = tuple(f.name for f in fields(AggregateStats))


def _binom_se(r: float, n: int) -> float:
    return math.sqrt(max(r * (1.0 - r), 0.0) / n)


def _record_adaptive(o) -> list[float]:
    return [
        float(o.rejected), float(o.stopped_at_interim), float(o.total_n), float(o.n2), float(o.M),
        o.mr1, o.mr2, o.mr2_hat, o.theta_ml, o.theta_fwml, o.theta_awml, o.ci_lower,
        float(o.separation_stage1), float(o.separation_stage2), float(o.stage2_ignored),
        float(bool(o.fault)), math.nan, math.nan, 0.0,
    ]


def _record_comparator(o, n_total: int) -> list[float]:
    nan = math.nan
    return [
        float(o.rejected), 0.0, float(n_total), 0.0, nan, nan, nan, nan, nan, nan, nan, nan,
        0.0, 0.0, 0.0, 0.0, o.pi_t_hat, o.pi_c_hat, float(o.degenerate),
    ]


def fixed_pool(cfg: ScenarioConfig) -> Cohort:
    return generate_cohort(RngStream(cfg.base_seed, POOL_STREAM), cfg.model, cfg.n_C, treated=False)


def _run_chunk(cfg: ScenarioConfig, start: int, stop: int) -> np.ndarray:
    out = np.empty((stop - start, len(RECORD_FIELDS)))
    comp = cfg.comparator
    pool = fixed_pool(cfg) if cfg.fixed_pool and comp.kind == "none" else None
    cp_lookup = dz.cp_table(cfg.design) if comp.kind == "none" else None
    for row, i in enumerate(range(start, stop)):
        s = RngStream(cfg.base_seed, i)
        if comp.kind == "single-arm":
            rec = _record_comparator(run_single_arm(s, cfg.model, comp.n, comp.p0, comp.alpha), comp.n)
        elif comp.kind == "rct":
            o = run_rct(s, cfg.model, comp.n_per_arm, comp.alpha, comp.analysis)
            rec = _record_comparator(o, 2 * comp.n_per_arm)
        else:
            o = run_adaptive_trial(s, cfg.model, cfg.design, pool=pool, n_C=cfg.n_C, cp_lookup=cp_lookup)
            rec = _record_adaptive(o)
        out[row] = rec
    return out


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    size = max(1, math.ceil(n / (workers * 4)))
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def default_threads() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def simulate_records(cfg: ScenarioConfig, threads: int = 1) -> np.ndarray:
    """Per-replication records, shape (replications, len(RECORD_FIELDS)), in index order."""
    threads = max(1, int(threads))
    if threads == 1 or cfg.replications < 2:
        return _run_chunk(cfg, 0, cfg.replications)
    parts = _chunks(cfg.replications, threads)
    with ProcessPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(_run_chunk, cfg, a, b) for a, b in parts]
        return np.vstack([f.result() for f in futures])


def _mean(x: np.ndarray) -> float:
    return float(x.mean()) if x.size else math.nan


def _approx_p_stop(cfg: ScenarioConfig, e_mr1: float, e_M: float) -> float:
    """Plug-in futility probability at the simulated mean matching rate and M."""
    d = cfg.design
    if not (math.isfinite(e_mr1) and math.isfinite(e_M)) or e_mr1 <= 0 or e_M <= 0:
        return math.nan
    if math.isinf(d.theta_stop):
        return 0.0 if d.theta_stop < 0 else 1.0
    pi_c = d.pi_c_plan
    se = dz.approx_se_stage1(d.n1 * e_mr1, e_M, shifted_rate(pi_c, cfg.model.theta), pi_c)
    return dz.futility_probability(cfg.model.theta, d.theta_stop, se)[0]


def aggregate(cfg: ScenarioConfig, rec: np.ndarray) -> AggregateStats:
    col = {name: rec[:, k] for k, name in enumerate(RECORD_FIELDS)}
    n = rec.shape[0]
    theta = cfg.model.theta
    adaptive = cfg.comparator.kind == "none"
    reject = _mean(col["rejected"])
    stop = _mean(col["stopped"])
    tn = col["total_n"]
    cont = col["stopped"] == 0

    M = col["M"][col["M"] > 0]
    mr1 = col["mr1"][np.isfinite(col["mr1"])]
    mr2 = col["mr2"][cont & np.isfinite(col["mr2"])]
    mr2_hat = col["mr2_hat"][cont & np.isfinite(col["mr2_hat"])]
    e_mr1 = _mean(mr1)
    e_M = _mean(M)

    def est_stats(name):
        v = col[name]
        ok = np.isfinite(v)
        if not ok.any():
            return math.nan, math.nan, int((~ok).sum())
        d = v[ok] - theta
        return float(d.mean()), float(np.sqrt((d * d).mean())), int((~ok & ~np.isnan(v)).sum())

    b_ml, r_ml, nf_ml = est_stats("theta_ml")
    b_fw, r_fw, _ = est_stats("theta_fwml")
    b_aw, r_aw, _ = est_stats("theta_awml")
    ci = col["ci_lower"]
    has_ci = ~np.isnan(ci)
    cover = _mean((ci[has_ci] <= theta).astype(float))
    n_ci = int(has_ci.sum())

    if adaptive and math.isfinite(e_mr1):
        mr2_plug = dz.estimate_stage2_mr(e_mr1, cfg.design.n1, cfg.design.mr2_mode)
    else:
        mr2_plug = math.nan
    return AggregateStats(
        name=cfg.name,
        theta=theta,
        replications=n,
        reject_rate=reject,
        reject_se=_binom_se(reject, n),
        stop_rate=stop,
        stop_se=_binom_se(stop, n),
        expected_total_n=_mean(tn),
        expected_total_n_se=float(tn.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        expected_M=e_M,
        expected_mr1=e_mr1,
        expected_mr2=_mean(mr2),
        expected_mr2_hat=_mean(mr2_hat),
        mr2_hat_at_mean_mr1=mr2_plug,
        p_stop_approx=_approx_p_stop(cfg, e_mr1, e_M) if adaptive else math.nan,
        bias_ml=b_ml,
        bias_fwml=b_fw,
        bias_awml=b_aw,
        rmse_ml=r_ml,
        rmse_fwml=r_fw,
        rmse_awml=r_aw,
        ci_coverage=cover,
        ci_coverage_se=_binom_se(cover, n_ci) if n_ci else math.nan,
        nonfinite_estimates=nf_ml,
        separation_stage1_count=int(col["separation_stage1"].sum()),
        separation_stage2_count=int(col["separation_stage2"].sum()),
        stage2_ignored_count=int(col["stage2_ignored"].sum()),
        fault_count=int(col["fault"].sum()),
        expected_pi_t_hat=_mean(col["pi_t_hat"][np.isfinite(col["pi_t_hat"])]),
        expected_pi_c_hat=_mean(col["pi_c_hat"][np.isfinite(col["pi_c_hat"])]),
        degenerate_count=int(col["degenerate"].sum()),
    )


def run_scenario(cfg: ScenarioConfig, threads: int = 1) -> AggregateStats:
    """Run ``cfg.replications`` trials on streams ``(base_seed, 0..reps-1)`` and summarise."""
    return aggregate(cfg, simulate_records(cfg, threads))


# --- estimator study -------------------------------------------------------

ESTIMATOR_GRID = tuple(round(-0.1 + 0.1 * k, 10) for k in range(22))


def estimator_study_config(**kw) -> ScenarioConfig:
    """Defaults of the estimator study: no futility stop, n1 = 25, n2 in [10, 75], 1000 controls."""
    d = DesignParams(n1=25, n2_min=10, n2_max=75, M_max=10, theta_stop=-math.inf)
    base = dict(name="estimators", design=d, n_C=1000, theta_grid=ESTIMATOR_GRID)
    base.update(kw)
    return ScenarioConfig(**base)


ESTIMATOR_COLUMNS = (
    "theta", "replications", "bias_ml", "bias_fwml", "bias_awml", "rmse_ml", "rmse_fwml", "rmse_awml",
    "ci_coverage", "ci_coverage_se", "nonfinite_estimates", "stage2_ignored_count",
)


def estimator_study(cfg: ScenarioConfig, threads: int = 1) -> list[dict]:
    """Bias, RMSE and repeated-CI coverage of the three estimators for every theta in the grid.

    Each grid point reuses streams ``0..reps-1`` of ``base_seed``.
    """
    if not cfg.theta_grid:
        raise ScenarioError("theta_grid", "must be non-empty")
    if math.isfinite(cfg.design.theta_stop):
        raise ScenarioError("design.theta_stop", "futility stopping must be disabled (-inf)")
    rows = []
    for theta in cfg.theta_grid:
        sub = cfg.with_(model=replace(cfg.model, theta=theta), theta_grid=None, name=f"{cfg.name}@{theta:g}")
        agg = run_scenario(sub, threads)
        row = agg.to_row()
        rows.append({k: row[k] for k in ESTIMATOR_COLUMNS})
    return rows


# --- analytical futility table ----------------------------------------------

FUTILITY_COLUMNS = ("n1_eff", "M", "theta_stop", "theta", "pi_t", "pi_c", "se", "p_stop", "p_continue")


def shifted_rate(pi_c: float, theta: float) -> float:
    """Response rate whose log odds ratio against ``pi_c`` is ``theta``."""
    return float(expit(math.log(pi_c / (1.0 - pi_c)) + theta))


def futility_table(n1_eff, M_values, theta_stop, thetas, pi_t, pi_c) -> list[dict]:
    """Approximate stop/continue probabilities over a grid; uses no random numbers.

    ``pi_t=None`` sets the treatment rate from each theta and ``pi_c``.
    """
    grids = [np.atleast_1d(np.asarray(g, dtype=float)) for g in (n1_eff, M_values, thetas)]
    if any(g.size == 0 for g in grids):
        raise ValueError("grid must be non-empty")
    rows = []
    for th in grids[2]:
        pt = shifted_rate(pi_c, th) if pi_t is None else pi_t
        for n in grids[0]:
            for M in grids[1]:
                se = dz.approx_se_stage1(n, M, pt, pi_c)
                p_stop, p_cont = dz.futility_probability(th, theta_stop, se)
                rows.append(dict(n1_eff=n, M=M, theta_stop=theta_stop, theta=th, pi_t=pt, pi_c=pi_c,
                                 se=se, p_stop=p_stop, p_continue=p_cont))
    return rows


# --- fixed-design sample size ------------------------------------------------

class FixedNNotFoundError(RuntimeError):
    pass


@dataclass
class FixedNResult:
    n: int
    power: float
    power_se: float
    evaluations: dict[int, float]


def _fixed_chunk(model, params, n, n_C, n_ceiling, base_seed, start, stop) -> int:
    return sum(
        run_fixed_trial(RngStream(base_seed, i), model, params, n, n_C, n_ceiling) for i in range(start, stop)
    )


def fixed_power(model: OutcomeModel, params: DesignParams, n: int, n_C: int, reps: int,
                base_seed: int, n_ceiling: int, threads: int = 1) -> float:
    if threads <= 1:
        hits = _fixed_chunk(model, params, n, n_C, n_ceiling, base_seed, 0, reps)
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_fixed_chunk, model, params, n, n_C, n_ceiling, base_seed, a, b)
                    for a, b in _chunks(reps, threads)]
            hits = sum(f.result() for f in futs)
    return hits / reps


def find_fixed_n(
    model: OutcomeModel,
    params: DesignParams,
    target_power: float,
    reps: int,
    n_C: int = 500,
    base_seed: int = 20240101,
    n_min: int = 2,
    n_ceiling: int = 200,
    threads: int = 1,
) -> FixedNResult:
    """Smallest one-stage ``n`` whose simulated power reaches ``target_power``.

    All candidates share streams ``0..reps-1`` and draw ``n_ceiling`` patients
    each, so candidate ``n`` analyses the first ``n`` of the same patients.
    The search doubles an upper bracket from ``n_min`` and then bisects.
    """
    if not 0.0 <= target_power < 1.0:
        raise ValueError("target_power must lie in [0, 1)")
    if n_min < 1 or n_ceiling < n_min:
        raise ValueError("need 1 <= n_min <= n_ceiling")
    seen: dict[int, float] = {}

    def power(n):
        if n not in seen:
            seen[n] = fixed_power(model, params, n, n_C, reps, base_seed, n_ceiling, threads)
        return seen[n]

    def result(n):
        return FixedNResult(n, seen.get(n, math.nan), _binom_se(seen.get(n, 0.0), reps), dict(sorted(seen.items())))

    if target_power == 0.0:
        return result(n_min)
    lo, hi = n_min, n_min
    while power(hi) < target_power:
        if hi >= n_ceiling:
            raise FixedNNotFoundError(f"power {seen[hi]:.4f} < {target_power} at the ceiling n = {n_ceiling}")
        lo, hi = hi, min(2 * hi, n_ceiling)
    if hi == n_min:
        return result(n_min)
    # invariant: power(lo) < target <= power(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if power(mid) >= target_power:
            hi = mid
        else:
            lo = mid
    return result(hi)
