import math

import numpy as np
import pytest
from scipy import stats

from matchtrial.comparators import DegenerateStrataError, cmh_arrays, cmh_test, run_rct, run_single_arm
from matchtrial.population import OutcomeModel, generate_cohort, generate_patient, response_probability
from matchtrial.stats_core import RngStream, TwoByTwoTable

THETA_PLAN = math.log(0.7 / 0.3)


def test_linear_predictor_example():
    assert response_probability(OutcomeModel(), False, 55.0, 0) == pytest.approx(0.32082, abs=5e-6)


def _mean_rate(theta, n=1_000_000):
    c = generate_cohort(RngStream(8), OutcomeModel(theta=theta), n, treated=True)
    return c.response.mean()


def test_population_response_rates():
    assert _mean_rate(0.0) == pytest.approx(0.307, abs=0.002)
    assert _mean_rate(THETA_PLAN) == pytest.approx(0.484, abs=0.002)


def test_cohort_shapes_and_ids():
    c = generate_cohort(RngStream(1), OutcomeModel(sigma=1.0), 10, treated=False, id_start=100)
    assert len(c) == 10 and c.ids[0] == 100 and c.covariates.shape == (10, 2)
    assert set(np.unique(c.cyto)) <= {0, 1}
    p = generate_patient(RngStream(1), OutcomeModel(), True, 5)
    assert p.treated and p.id == 5


def test_model_validation():
    with pytest.raises(ValueError):
        OutcomeModel(sigma=-1)


def test_cmh_identical_strata_equal_pooled():
    t = TwoByTwoTable(15, 15, 9, 21)
    res = cmh_test([t, t])
    assert res.common_or == pytest.approx(2.3333, abs=5e-5)
    assert res.log_or == pytest.approx(math.log(7 / 3))


def test_cmh_equal_proportions():
    stat, p, _ = cmh_test([TwoByTwoTable(5, 5, 10, 10)])
    assert stat == pytest.approx(0.0, abs=1e-15) and p == pytest.approx(0.5)


def test_cmh_matches_textbook_formula():
    rng = np.random.default_rng(3)
    cells = rng.integers(1, 30, size=(6, 4)).astype(float)
    a, b, c, d = cells.T
    n = a + b + c + d
    e = (a + b) * (a + c) / n
    v = (a + b) * (c + d) * (a + c) * (b + d) / (n * n * (n - 1))
    res = cmh_arrays(a, b, c, d)
    assert res.statistic == pytest.approx((a - e).sum() ** 2 / v.sum(), rel=1e-12)
    assert res.common_or == pytest.approx((a * d / n).sum() / (b * c / n).sum(), rel=1e-12)


def test_cmh_null_p_values_uniform():
    rng = np.random.default_rng(9)
    ps = []
    for _ in range(4000):
        pi = rng.uniform(0.2, 0.8, 5)
        nt = rng.integers(20, 40, 5)
        nc = rng.integers(20, 40, 5)
        a = rng.binomial(nt, pi)
        c = rng.binomial(nc, pi)
        ps.append(cmh_arrays(a, nt - a, c, nc - c).p_value)
    # a discrete statistic: allow the KS test its usual slack
    assert stats.kstest(ps, "uniform").pvalue > 0.001


def test_cmh_degenerate():
    with pytest.raises(DegenerateStrataError):
        cmh_test([TwoByTwoTable(5, 0, 5, 0)])
    with pytest.raises(DegenerateStrataError):
        cmh_test([])


def test_single_arm_at_null_rate_accepts():
    # z = 0 whenever the observed rate equals p0
    out = run_single_arm(RngStream(4), OutcomeModel(beta0=50, beta_age=0, beta_cyto=0), 10, p0=1 - 1e-9)
    assert not out.rejected


def test_single_arm_power():
    rej = np.mean([run_single_arm(RngStream(0, i), OutcomeModel(theta=THETA_PLAN), 44).rejected for i in range(4000)])
    assert rej == pytest.approx(0.7053, abs=0.03)


def test_rct_degenerate_arm_flags():
    m = OutcomeModel(beta0=-60, beta_age=0, beta_cyto=0)
    for analysis in ("z-test", "adjusted-logistic", "cmh"):
        out = run_rct(RngStream(1), m, 10, analysis=analysis)
        assert out.degenerate and not out.rejected
    with pytest.raises(ValueError):
        run_rct(RngStream(1), m, 10, analysis="anova")


def test_rct_z_test_power_and_null():
    power = np.mean([run_rct(RngStream(3, i), OutcomeModel(theta=THETA_PLAN)).rejected for i in range(3000)])
    assert power == pytest.approx(0.6963, abs=0.03)
    null = np.mean([run_rct(RngStream(4, i), OutcomeModel(sigma=0.5)).rejected for i in range(3000)])
    assert null == pytest.approx(0.1045, abs=0.02)
