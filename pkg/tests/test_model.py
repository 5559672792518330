import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odr.model import (
    Bernoulli,
    Direction,
    FiniteDiscrete,
    GaussianShift,
    Hypothesis,
    ModelError,
    chernoff_info,
    kl,
    llr,
    log_mgf,
    model_from_config,
    sample,
)

from oracles import KL_BERN_03_07, LLR_BERN_ONE, chernoff_grid_scan

BERN = Bernoulli(0.3, 0.7)
GAUSS = GaussianShift(1.0)
UNIFORM = FiniteDiscrete((0.25, 0.25, 0.25, 0.25), (0.25, 0.25, 0.25, 0.25))


def pmf_pairs(min_size=2, max_size=6):
    """Pairs of strictly positive pmfs on a common alphabet."""

    def build(raw):
        a = np.array([r[0] for r in raw]) + 0.05
        b = np.array([r[1] for r in raw]) + 0.05
        a, b = a / a.sum(), b / b.sum()
        # renormalize to a sum that is exact to rounding
        a[-1] = 1.0 - math.fsum(a[:-1])
        b[-1] = 1.0 - math.fsum(b[:-1])
        return FiniteDiscrete(tuple(a), tuple(b))

    cell = st.tuples(st.floats(0, 1), st.floats(0, 1))
    return st.lists(cell, min_size=min_size, max_size=max_size).map(build)


class TestLlr:
    def test_bernoulli_one(self):
        assert llr(BERN, 1) == pytest.approx(LLR_BERN_ONE, abs=1e-15)
        assert LLR_BERN_ONE == pytest.approx(0.847298, abs=1e-6)

    def test_gaussian_symmetry_point(self):
        assert llr(GAUSS, 0.5) == 0.0

    def test_identical_pmfs(self):
        assert all(llr(UNIFORM, x) == 0.0 for x in range(4))

    def test_outside_support(self):
        with pytest.raises(ModelError):
            llr(BERN, 2)
        with pytest.raises(ModelError):
            llr(FiniteDiscrete((0.5, 0.5, 0.0), (0.4, 0.6, 0.0)), 2)
        with pytest.raises(ModelError):
            llr(GAUSS, math.inf)


class TestSample:
    def test_bernoulli_mean(self):
        x = sample(BERN, Hypothesis.H0, np.random.default_rng(1), size=10**6)
        assert abs(x.mean() - 0.3) < 0.002

    def test_gaussian_mean(self):
        x = sample(GAUSS, "H1", np.random.default_rng(2), size=10**6)
        assert abs(x.mean() - 1.0) < 0.004

    def test_degenerate_symbol(self):
        m = FiniteDiscrete((1.0, 0.0, 0.0), (1.0, 0.0, 0.0))
        x = sample(m, 0, np.random.default_rng(3), size=1000)
        assert np.all(x == 0)


class TestKl:
    def test_gaussian(self):
        assert kl(GAUSS, "d0") == pytest.approx(0.5, abs=1e-15)
        assert kl(GAUSS, Direction.D1) == pytest.approx(0.5, abs=1e-15)

    def test_bernoulli(self):
        assert BERN.d0 == pytest.approx(KL_BERN_03_07, abs=1e-14)
        assert BERN.d0 == pytest.approx(0.338919, abs=1e-6)

    def test_identical(self):
        assert UNIFORM.d0 == 0.0 and UNIFORM.d1 == 0.0


class TestLogMgf:
    def test_gaussian_unit_alpha(self):
        assert log_mgf(GAUSS, Hypothesis.H0, 1.0) == 0.0

    def test_gaussian_half(self):
        assert log_mgf(GAUSS, Hypothesis.H0, 0.5) == pytest.approx(-0.125, abs=1e-15)

    def test_bernoulli_unit_alpha(self):
        assert log_mgf(BERN, Hypothesis.H0, 1.0) == pytest.approx(0.0, abs=1e-15)


class TestChernoff:
    def test_gaussian(self):
        assert chernoff_info(GAUSS) == pytest.approx(0.125, abs=1e-10)

    def test_identical(self):
        assert chernoff_info(UNIFORM) == pytest.approx(0.0, abs=1e-15)

    def test_bernoulli_against_grid_scan(self):
        scan = chernoff_grid_scan(lambda s: BERN.log_mgf(0, s), n=4001)
        assert chernoff_info(BERN) == pytest.approx(scan, abs=1e-8)


class TestValidation:
    @pytest.mark.parametrize(
        "args",
        [((0.5, 0.6), (0.5, 0.5)), ((0.5, 0.5), (1.0, 0.0)), ((-0.1, 1.1), (0.5, 0.5)), ((0.5,), (0.5, 0.5))],
    )
    def test_bad_pmfs(self, args):
        with pytest.raises(ModelError):
            FiniteDiscrete(*args)

    def test_bad_params(self):
        with pytest.raises(ModelError):
            GaussianShift(0.0)
        with pytest.raises(ModelError):
            Bernoulli(0.3, 0.3)
        with pytest.raises(ModelError):
            Bernoulli(0.0, 0.7)

    def test_config_roundtrip(self):
        for m in (BERN, GAUSS, FiniteDiscrete((0.2, 0.8), (0.6, 0.4))):
            again = model_from_config(m.to_config())
            assert again.to_config() == m.to_config()
        with pytest.raises(ModelError):
            model_from_config({"kind": "poisson"})
        with pytest.raises(ModelError):
            model_from_config({"kind": "gaussian"})


@settings(max_examples=60, deadline=None)
@given(pmf_pairs())
def test_unit_mean_of_ratio(m):
    assert math.fsum(m.support_probs(0) * np.exp(m.support_llr)) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(pmf_pairs())
def test_log_mgf_convex(m):
    a = np.linspace(-3, 3, 121)
    v = np.array([m.log_mgf(0, x) for x in a])
    assert np.all(np.diff(v, 2) >= -1e-9)


@settings(max_examples=40, deadline=None)
@given(pmf_pairs())
def test_slope_at_one_is_d1(m):
    h = 1e-6
    slope = (m.log_mgf(0, 1 + h) - m.log_mgf(0, 1 - h)) / (2 * h)
    assert slope == pytest.approx(m.d1, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(pmf_pairs())
def test_chernoff_below_both_divergences(m):
    assert chernoff_info(m) <= min(m.d0, m.d1) + 1e-12


def test_gaussian_slope_at_one():
    for A in (0.3, 1.0, 2.5):
        g = GaussianShift(A)
        h = 1e-6
        slope = (g.log_mgf(0, 1 + h) - g.log_mgf(0, 1 - h)) / (2 * h)
        assert slope == pytest.approx(g.d1, rel=1e-8)
