import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from matchtrial import design as dz
from matchtrial.design import DesignParams, DesignValidationError, StageTwoRateMode
from matchtrial.stats_core import norm_quantile, norm_sf

W = 1 / math.sqrt(2)
P = DesignParams()


@pytest.mark.parametrize(
    "p1, p2, expected", [(0.5, 0.5, 0.5), (0.025, 0.025, 0.00279), (0.1, 0.9, 0.5)],
)
def test_combine_examples(p1, p2, expected):
    assert dz.combine_p_values(p1, p2, W, W) == pytest.approx(expected, abs=5e-6)


def test_combine_saturates_at_the_clamp():
    assert dz.combine_p_values(0.0, 0.5, W, W) == pytest.approx(dz.combine_p_values(1e-15, 0.5, W, W))
    assert 0.0 < dz.combine_p_values(1.0, 1.0, W, W) <= 1.0


def test_combined_p_uniform_under_null():
    rng = np.random.default_rng(42)
    u = rng.random((100_000, 2))
    p = np.array([dz.combine_p_values(a, b, W, W) for a, b in u])
    assert stats.kstest(p, "uniform").pvalue > 0.01


def test_conditional_error_examples():
    p1_edge = norm_sf(norm_quantile(0.975) / W)
    assert p1_edge == pytest.approx(0.00279, abs=5e-6)
    assert dz.conditional_error(p1_edge, P) == pytest.approx(0.5, abs=1e-12)
    assert dz.conditional_error(0.5, P) == pytest.approx(0.00279, abs=5e-6)
    assert dz.conditional_error(1 - 1e-15, P) < 1e-20


def test_final_test_agrees_with_conditional_error_on_grid():
    grid = (np.arange(100) + 0.5) / 100
    for p1 in grid:
        A = dz.conditional_error(p1, P)
        for p2 in grid:
            _, rej = dz.final_test(p1, p2, P)
            assert rej == (p2 <= A)


@settings(max_examples=300)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_final_test_agrees_with_conditional_error_anywhere(p1, p2):
    A = dz.conditional_error(p1, P)
    if abs(p2 - A) > 1e-9 * max(A, 1e-300):
        assert dz.final_test(p1, p2, P)[1] == (p2 <= A)


def test_final_test_examples():
    assert dz.final_test(0.025, 0.025, P) == (pytest.approx(0.00279, abs=5e-6), True)
    assert dz.final_test(0.5, 0.5, P) == (pytest.approx(0.5), False)
    p1 = norm_sf(norm_quantile(0.975) / W)
    p_total, rej = dz.final_test(p1, 0.5, P)
    assert p_total == pytest.approx(0.025, abs=1e-12) and rej


@pytest.mark.parametrize("theta, stop", [(0.20, True), (math.log(1.3), False), (0.85, False)])
def test_futility_decision(theta, stop):
    assert dz.futility_decision(theta, math.log(1.3)) is stop


def test_approx_se_examples():
    n = 19.724
    for pt, quoted in ((0.3, 0.53893), (0.5, 0.50182)):
        exact = math.sqrt(1 / (n * pt) + 1 / (n * (1 - pt)) + (1 / (n * 0.3) + 1 / (n * 0.7)) / 4.93)
        assert dz.approx_se_stage1(n, 4.93, pt, 0.3) == pytest.approx(exact, rel=1e-14)
        # the quoted values (0.53893, 0.50182) were rounded by hand; exact ones are 0.538886, 0.501766
        assert dz.approx_se_stage1(n, 4.93, pt, 0.3) == pytest.approx(quoted, abs=1e-4)
    limit = math.sqrt(1 / (n * 0.5) + 1 / (n * 0.5))
    assert dz.approx_se_stage1(n, 1e12, 0.5, 0.3) == pytest.approx(limit, rel=1e-9)


def test_futility_probability_examples():
    p_stop, p_cont = dz.futility_probability(0.0, math.log(1.3), 0.53893)
    assert p_stop == pytest.approx(0.6868, abs=5e-4)
    p_stop, p_cont = dz.futility_probability(P.theta_plan, math.log(1.3), 0.50182)
    assert p_stop == pytest.approx(0.1219, abs=5e-4)
    assert p_cont == pytest.approx(0.8781, abs=5e-4)
    assert dz.futility_probability(0.3, 0.3, 0.4) == (0.5, 0.5)
    with pytest.raises(ValueError):
        dz.futility_probability(0.3, 0.3, 0.0)


@pytest.mark.parametrize("p_cont, expected", [(0.87810, 0.91106), (0.75, 0.99), (1.0, 0.8)])
def test_conditional_power_target(p_cont, expected):
    assert dz.conditional_power_target(0.2, p_cont, 0.99) == pytest.approx(expected, abs=5e-6)


def test_cp_table_uses_planning_values():
    tab = dz.cp_table(DesignParams(M_max=10))
    assert sorted(tab) == list(range(1, 11))
    for M, cp in tab.items():
        se = dz.approx_se_stage1(20, M, 0.5, 0.3)
        p_cont = dz.futility_probability(P.theta_plan, P.theta_stop, se)[1]
        assert cp == pytest.approx(dz.conditional_power_target(0.2, p_cont))
    # more controls per patient, better interim precision, lower cp needed
    assert all(a >= b for a, b in zip(list(tab.values()), list(tab.values())[1:]))


def test_recalc_example():
    # n1 * mr1 = 19.724 with n1 = 20
    n2_star, _ = dz.recalc_stage2_n(0.1, 0.53893, 19.724 / 20, P, 0.84730, 0.9, mr2_hat=1.0)
    z = stats.norm.ppf
    drift = z(0.9) + (z(0.975) - W * z(0.9)) / W
    assert n2_star == pytest.approx(19.724 * 0.53893 ** 2 * drift ** 2 / 0.84730 ** 2, rel=1e-10)
    # the worked figure 61.29 squares se = 0.53889 instead of 0.53893
    assert n2_star == pytest.approx(61.29, abs=0.02)


def test_recalc_clamps():
    n2_star, n2 = dz.recalc_stage2_n(0.1, 0.5, 1.0, P, 0.0, 0.9)
    assert math.isinf(n2_star) and n2 == P.n2_max
    _, n2 = dz.recalc_stage2_n(1e-6, 0.5, 1.0, P, 0.8473, 0.8)
    assert n2 == P.n2_min


@settings(max_examples=200)
@given(st.floats(1e-4, 0.5), st.floats(0.1, 1.5), st.floats(0.3, 1.0), st.floats(0.55, 0.99))
def test_recalc_monotone(p1, se1, mr1, cp):
    base = dz.recalc_stage2_n(p1, se1, mr1, P, 0.8473, cp)[0]
    # a weaker interim result or a higher cp never asks for fewer patients
    assert dz.recalc_stage2_n(min(p1 * 1.5, 0.9), se1, mr1, P, 0.8473, cp)[0] >= base - 1e-9
    assert dz.recalc_stage2_n(p1, se1, mr1, P, 0.8473, min(cp + 0.005, 0.995))[0] >= base - 1e-9
    # a larger assumed effect never asks for more
    assert dz.recalc_stage2_n(p1, se1, mr1, P, 1.2, cp)[0] <= base + 1e-9


def test_stage2_rate_examples():
    assert dz.estimate_stage2_mr(0.9862, 20, "wald-lower-99") == pytest.approx(0.92509, abs=5e-5)
    assert dz.estimate_stage2_mr(1.0, 20) == 1.0
    assert dz.estimate_stage2_mr(0.95, 20, StageTwoRateMode.NAIVE) == 0.95
    assert dz.estimate_stage2_mr(0.05, 20) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        dz.estimate_stage2_mr(0.0, 20)


def test_validation_names_the_field():
    with pytest.raises(DesignValidationError) as exc:
        DesignParams(w1=0.6, w2=0.6)
    assert exc.value.field == "w1"
    for bad in (dict(alpha=0.0), dict(n2_max=5), dict(M_max=0), dict(recalc_mode="sometimes"),
                dict(separation_policy="ignore"), dict(caliper=0.0)):
        with pytest.raises(DesignValidationError):
            DesignParams(**bad)
    assert DesignParams(w1=0.6, w2=0.8).w2 == 0.8


def test_to_dict_round_trip():
    d = DesignParams(recalc_mode="interim-estimate", n1=30).to_dict()
    assert d["recalc_mode"] == "interim-estimate"
    assert DesignParams(**d) == DesignParams(recalc_mode="interim-estimate", n1=30)
