import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odr.evaluate import mc_eval
from odr.fixed_horizon import CostSpec
from odr.geometric_horizon import (
    ConvergenceError,
    GeoPolicy,
    GeoSpec,
    TruncationError,
    g_curve,
    geo_bayes_cost,
    run_policy_geo,
    running_threshold,
    solve_geo,
    value_iteration,
)
from odr.model import Bernoulli, FiniteDiscrete, GaussianShift, Hypothesis

from oracles import G_EXAMPLE

BERN = Bernoulli(0.3, 0.7)
GAUSS = GaussianShift(1.0)
COSTS = CostSpec(0.5, 5, 5, 0.2)
EPS = 0.1


@pytest.fixture(scope="module")
def bern_policy():
    return solve_geo(BERN, COSTS, EPS)


class TestG:
    def test_origin(self):
        g = g_curve(CostSpec(0.5, 10, 10, 1), 0.05)
        assert g.left_limit == 5.0
        assert g(1e-9) == pytest.approx(5.0, abs=1e-9)

    def test_plateau(self):
        g = g_curve(CostSpec(0.5, 10, 10, 1), 0.05)
        assert g(1.0) == pytest.approx(5 / 0.95, rel=1e-15)
        assert g(1e9) == pytest.approx(5 / 0.95, rel=1e-15)

    def test_hand_value(self):
        assert g_curve(CostSpec(0.5, 10, 10, 1), 0.05)(0.5) == pytest.approx(G_EXAMPLE, rel=1e-14)

    def test_kink_on_grid(self):
        g = g_curve(CostSpec(0.5, 10, 20, 1), 0.05)
        assert 0.5 in g.grid

    def test_eps_range(self):
        for eps in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                g_curve(COSTS, eps)
        with pytest.raises(ValueError):
            GeoSpec(1.0)
        assert GeoSpec(0.25).mean_horizon == 4.0


class TestValueIteration:
    def test_two_starts(self):
        a = value_iteration(BERN, COSTS, EPS)
        b = value_iteration(BERN, COSTS, EPS, start="zero")
        assert np.max(np.abs(a.values - b.values)) <= 1e-8

    @pytest.mark.parametrize("model", [BERN, GAUSS], ids=["bernoulli", "gaussian"])
    def test_fixed_point_residual(self, model):
        from odr.curve import GridExpectation
        from odr.geometric_horizon import g_values

        V = value_iteration(model, COSTS, EPS, tol=1e-10)
        op = GridExpectation(model, V.grid, None if model.is_discrete else _base())
        again = np.minimum(g_values(COSTS, EPS, V.grid), (1 - EPS) * op(V.values, 0.0, V.values[-1]) + COSTS.c * V.grid)
        assert np.max(np.abs(again - V.values)) <= 1e-9

    @pytest.mark.parametrize("model", [BERN, GAUSS], ids=["bernoulli", "gaussian"])
    def test_shape_and_bound(self, model):
        V = value_iteration(model, COSTS, EPS)
        assert V.left_limit == 0.0
        assert V.is_monotone(1e-9) and V.is_concave(1e-9)
        assert np.all(V.values <= COSTS.c * V.grid / EPS + 1e-12)

    def test_iterates_non_increasing(self):
        hist = []
        value_iteration(BERN, COSTS, EPS, history=hist)
        assert len(hist) > 5
        steps = np.diff(np.array(hist), axis=0)
        assert np.all(steps <= 1e-12)

    def test_near_certain_interrupt(self):
        eps = 0.999
        V = value_iteration(BERN, COSTS, eps)
        from odr.geometric_horizon import g_values

        target = np.minimum(g_values(COSTS, eps, V.grid), COSTS.c * V.grid)
        assert np.max(np.abs(V.values - target)) <= 1e-3 * V.sup

    def test_no_convergence(self):
        with pytest.raises(ConvergenceError) as err:
            value_iteration(BERN, COSTS, 0.01, max_iter=3)
        assert err.value.iterations == 3 and err.value.residual > 0

    def test_bad_start(self):
        with pytest.raises(ValueError):
            value_iteration(BERN, COSTS, EPS, start="middle")


def _base():
    from odr.curve import standard_grid

    return standard_grid()


class TestThresholds:
    def test_running_above_terminal(self):
        p = solve_geo(GAUSS, CostSpec(0.5, 10, 20, 1), 0.05)
        assert p.tau_t == 0.5
        assert p.tau_r >= p.tau_t

    def test_running_below_terminal(self):
        p = solve_geo(GAUSS, CostSpec(0.5, 20, 4, 1), 0.05)
        assert p.tau_t == 5.0
        assert p.tau_r < p.tau_t

    def test_sweep_nondecreasing(self):
        vals = np.linspace(0.2, 16, 10)
        taus = [solve_geo(GAUSS, CostSpec(0.5, v, v, 1), 0.05).tau_r for v in vals]
        assert np.all(np.diff(taus) >= -1e-9 * np.max(taus))
        assert taus[0] < 1.0 < taus[-1]

    def test_grid_doubling(self):
        a = solve_geo(GAUSS, CostSpec(0.5, 10, 10, 1), 0.05)
        b = solve_geo(GAUSS, CostSpec(0.5, 10, 10, 1), 0.05, grid_points=4001)
        assert a.tau_r == pytest.approx(b.tau_r, rel=1e-6)

    def test_crossing_is_the_root(self, bern_policy):
        from odr.geometric_horizon import _gap

        d = _gap(BERN, COSTS, EPS, bern_policy.V)
        assert d(bern_policy.tau_r) >= -1e-9
        assert d(bern_policy.tau_r * (1 - 1e-6)) < 1e-9

    def test_running_threshold_reuses_curve(self, bern_policy):
        assert running_threshold(BERN, COSTS, EPS, bern_policy.V) == pytest.approx(bern_policy.tau_r, rel=1e-9)

    def test_policy_dict(self, bern_policy):
        d = bern_policy.to_dict()
        assert set(d) == {"tau_r", "tau_t", "iterations", "residual"}
        assert d["residual"] <= 1e-10


def _case1_draws(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        if rng.random() < 0.5:
            q0 = rng.uniform(0.05, 0.45)
            model = Bernoulli(q0, rng.uniform(q0 + 0.1, 0.95))
        else:
            a = rng.dirichlet(np.ones(3)) * 0.85 + 0.05
            b = rng.dirichlet(np.ones(3)) * 0.85 + 0.05
            a[-1] = 1 - math.fsum(a[:-1])
            b[-1] = 1 - math.fsum(b[:-1])
            model = FiniteDiscrete(tuple(a), tuple(b))
        pi = rng.uniform(0.1, 0.9)
        c0, c1 = rng.uniform(0.5, 20, 2)
        c = rng.uniform(0.01, 2)
        lo = c / (c + pi * c1)
        eps = rng.uniform(lo, 1.0)
        eps = min(max(eps, lo + 1e-6), 0.995)
        yield model, CostSpec(pi, c0, c1, c), eps


def test_case1_implication():
    for model, costs, eps in _case1_draws(30, 1):
        if eps <= costs.c / (costs.c + costs.pi * costs.c1):
            continue
        p = solve_geo(model, costs, eps)
        assert p.tau_r >= p.tau_t * (1 - 1e-9)


class TestExecution:
    def test_immediate_running_stop(self):
        p = GeoPolicy(1e-300, 1e-300)
        rng = np.random.default_rng(0)
        for _ in range(50):
            out = run_policy_geo(p, BERN, Hypothesis.H0, 0.3, rng)
            assert (out.stop_time, out.decision) == (1, Hypothesis.H1)

    def test_certain_interrupt_uses_terminal_threshold(self):
        p = GeoPolicy(1e-300, 1.0)
        rng = np.random.default_rng(1)
        for _ in range(50):
            out = run_policy_geo(p, BERN, Hypothesis.H1, 1.0, rng)
            assert out.stop_time == 1
            want = Hypothesis.H1 if out.llr_path[0] >= 0 else Hypothesis.H0
            assert out.decision is want

    def test_mc_matches_exact(self, bern_policy):
        exact = geo_bayes_cost(bern_policy, BERN, COSTS, EPS)
        mc = mc_eval(bern_policy, BERN, COSTS, 10**6, seed=3, eps=EPS)
        assert abs(mc.estimates.cost - exact.direct) <= 3 * mc.std_errors.cost

    def test_single_runs_match_vectorized(self, bern_policy):
        rng = np.random.default_rng(9)
        runs = [run_policy_geo(bern_policy, BERN, Hypothesis.H1, EPS, rng) for _ in range(4000)]
        t_mean = np.mean([r.stop_time for r in runs])
        exact = geo_bayes_cost(bern_policy, BERN, COSTS, EPS)
        assert t_mean == pytest.approx(exact.t1, rel=0.05)


class TestGeoCost:
    def test_always_h0(self):
        costs = CostSpec(0.5, 5, 5, 0.2)
        r = geo_bayes_cost(GeoPolicy(math.inf, math.inf), BERN, costs, 0.5)
        assert r.direct == pytest.approx(0.5 * 5 + 2 * 0.2, abs=1e-10)
        assert r.reduced == pytest.approx(r.direct, abs=r.direct_bound + r.reduced_bound)

    def test_never_stop_early(self):
        r = geo_bayes_cost(GeoPolicy(math.inf, COSTS.terminal_threshold), BERN, COSTS, 0.2)
        assert abs(r.direct - r.reduced) <= r.direct_bound + r.reduced_bound
        assert r.t1 == pytest.approx(5.0, rel=1e-9)

    def test_local_optimality(self, bern_policy):
        J = geo_bayes_cost(bern_policy, BERN, COSTS, EPS).direct
        for f in (0.9, 1.1):
            q = GeoPolicy(bern_policy.tau_r * f, bern_policy.tau_t)
            assert J <= geo_bayes_cost(q, BERN, COSTS, EPS).direct + 1e-12

    def test_global_scan(self, bern_policy):
        J = geo_bayes_cost(bern_policy, BERN, COSTS, EPS).direct
        for t in np.geomspace(0.05, 50, 25):
            assert J <= geo_bayes_cost(GeoPolicy(t, bern_policy.tau_t), BERN, COSTS, EPS).direct + 1e-12

    def test_truncation_error(self, bern_policy):
        with pytest.raises(TruncationError) as err:
            geo_bayes_cost(bern_policy, BERN, COSTS, EPS, n_max=10)
        assert err.value.required > 10
        r = geo_bayes_cost(bern_policy, BERN, COSTS, EPS, n_max=err.value.required + 50)
        assert max(r.direct_bound, r.reduced_bound) <= 1e-10

    def test_needs_discrete(self, bern_policy):
        with pytest.raises(TypeError):
            geo_bayes_cost(bern_policy, GAUSS, COSTS, EPS)


@settings(max_examples=20, deadline=None)
@given(
    st.floats(0.1, 0.45), st.floats(0.55, 0.9), st.floats(0.05, 30), st.floats(0.05, 30),
    st.floats(0.05, 0.6),
)
def test_dual_forms_agree(q0, q1, tau_r, tau_t, eps):
    r = geo_bayes_cost(GeoPolicy(tau_r, tau_t), Bernoulli(q0, q1), COSTS, eps, tol=1e-9)
    assert abs(r.direct - r.reduced) <= r.direct_bound + r.reduced_bound + 1e-12
    assert r.direct_bound + r.reduced_bound <= 1e-8
