"""Bayes-optimal opportunistic detection when the horizon is geometric.

The maximum sample size is ``Pr[Nmax = n] = (1 - eps)^(n-1) eps`` and is
revealed only when it is reached.  The rule uses a running threshold
``tau_r`` while samples keep coming and the terminal threshold
``tau_t = (1 - pi) c0 / (pi c1)`` at the interruption.  ``tau_r`` comes from
the fixed point ``V = min{g, (1 - eps) E0[V(lam l)] + c lam}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .curve import (
    DEFAULT_HI,
    DEFAULT_LO,
    DEFAULT_POINTS,
    GridExpectation,
    NoCrossingError,
    ValueCurve,
    expect_h0,
    find_crossing,
    merge_points,
    standard_grid,
)
from .fixed_horizon import CostSpec, PolicyOutcome, crosses
from .model import Hypothesis, HypothesisPair, _as_hypothesis


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"value iteration did not converge: residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


class UniquenessError(RuntimeError):
    pass


class TruncationError(ValueError):
    def __init__(self, n_max: int, required: int, bound: float, tol: float):
        super().__init__(
            f"n_max = {n_max} leaves a tail bound of {bound:.3e} > {tol:.3e}; need n_max >= {required}"
        )
        self.required = required


@dataclass(frozen=True)
class GeoSpec:
    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    @property
    def mean_horizon(self) -> float:
        return 1.0 / self.epsilon


@dataclass(frozen=True, eq=False)
class IteratedCurve(ValueCurve):
    """Value-iteration output: the curve plus convergence bookkeeping.

    ``continuation`` holds ``(1 - eps) E0[V(lam l)] + c lam`` on the grid.
    """

    iterations: int = 0
    residual: float = math.nan
    continuation: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class GeoPolicy:
    tau_r: float
    tau_t: float
    V: ValueCurve | None = None
    iterations: int = 0
    residual: float = math.nan

    def to_dict(self) -> dict:
        return {
            "tau_r": self.tau_r,
            "tau_t": self.tau_t,
            "iterations": self.iterations,
            "residual": self.residual,
        }


def _check_eps(eps: float):
    if not (0.0 < eps < 1.0):
        raise ValueError(f"epsilon must lie in (0, 1), got {eps}")


def g_values(costs: CostSpec, eps: float, lam):
    lam = np.asarray(lam, dtype=float)
    lvl = costs.level
    return lvl + eps / (1.0 - eps) * np.minimum(lvl, costs.pi * costs.c1 * lam)


def g_curve(costs: CostSpec, eps: float, grid: np.ndarray | None = None) -> ValueCurve:
    """``g(lam) = (1-pi)c0 + eps/(1-eps) min{(1-pi)c0, pi c1 lam}``, kink at ``tau_t``."""
    _check_eps(eps)
    costs.require_nondegenerate()
    if grid is None:
        grid = standard_grid()
    grid = merge_points(grid, [costs.terminal_threshold])
    return ValueCurve(
        grid, g_values(costs, eps, grid), costs.level, costs.level / (1.0 - eps),
        kinks=(costs.terminal_threshold,),
    )


def value_iteration(
    model: HypothesisPair,
    costs: CostSpec,
    eps: float,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    *,
    start: str = "g",
    grid_points: int = DEFAULT_POINTS,
    grid_lo: float = DEFAULT_LO,
    grid_hi: float = DEFAULT_HI,
    extra_points=(),
    history: list | None = None,
) -> IteratedCurve:
    """Fixed point ``V`` of ``f -> min{g, (1 - eps) E0[f(lam l)] + c lam}`` on the grid.

    Starting from ``f0 = g`` the iterates equal ``Q^n g`` with
    ``Q f = min{f, (1 - eps) E0[f(lam l)] + c lam}``; ``start="zero"`` begins
    from the zero function instead and converges to the same fixed point from
    below.  Stops when the sup-norm change is at most ``tol``.
    """
    _check_eps(eps)
    if tol <= 0:
        raise ValueError("tol must be positive")
    base = standard_grid(grid_points, grid_lo, grid_hi)
    grid = merge_points(base, [costs.terminal_threshold, *extra_points])
    g = g_values(costs, eps, grid)
    op = GridExpectation(model, grid, base)
    c_lam = costs.c * grid
    if start == "g":
        f = g.copy()
    elif start == "zero":
        f = np.zeros_like(g)
    else:
        raise ValueError(f"unknown start {start!r}")

    residual = math.inf
    cont = None
    for it in range(1, max_iter + 1):
        cont = (1.0 - eps) * op(f, 0.0, f[-1]) + c_lam
        new = np.minimum(g, cont)
        residual = float(np.max(np.abs(new - f)))
        f = new
        if history is not None:
            history.append(f.copy())
        if residual <= tol:
            break
    else:
        raise ConvergenceError(residual, max_iter)
    return IteratedCurve(
        grid, f, 0.0, float(f[-1]), kinks=(costs.terminal_threshold, *extra_points), iterations=it, residual=residual, continuation=cont
    )


def _gap(model, costs, eps, V):
    def d(lam):
        return (1.0 - eps) * expect_h0(model, V, lam) + costs.c * lam - g_values(costs, eps, lam)

    return d


def running_threshold(model: HypothesisPair, costs: CostSpec, eps: float, V: ValueCurve) -> float:
    """Where ``(1 - eps) E0[V(lam l)] + c lam`` meets ``g``.

    The gap is checked for a single sign change on the grid before the
    crossing is refined by bisection.
    """
    d = _gap(model, costs, eps, V)
    grid = V.grid
    cont = getattr(V, "continuation", None)
    if cont is not None and len(cont) == grid.size:
        gaps = cont - g_values(costs, eps, grid)
    else:
        gaps = d(grid)
    scale = costs.level / (1.0 - eps)
    sig = gaps[np.abs(gaps) > 1e-11 * scale] > 0
    changes = int(np.count_nonzero(sig[1:] != sig[:-1]))
    if changes > 1:
        raise UniquenessError(f"gap changes sign {changes} times on the grid")
    idx = np.flatnonzero(gaps >= 0)
    if idx.size == 0:
        hi = grid[-1]
        while d(hi) < 0:
            hi *= 4.0
        lo = grid[-1]
    elif idx[0] == 0:
        lo, hi = grid[0] * 1e-6, grid[0]
    else:
        lo, hi = grid[idx[0] - 1], grid[idx[0]]
    try:
        return find_crossing(d, 0.0, (lo, hi))
    except NoCrossingError:
        # grid-level rounding put the sign change one cell off; widen once
        return find_crossing(d, 0.0, (lo / 4.0, hi * 4.0))


def solve_geo(
    model: HypothesisPair,
    costs: CostSpec,
    eps: float,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    *,
    refine: bool = True,
    grid_points: int = DEFAULT_POINTS,
    grid_lo: float = DEFAULT_LO,
    grid_hi: float = DEFAULT_HI,
) -> GeoPolicy:
    """Value iteration plus thresholds.

    With ``refine`` the iteration is rerun once with ``tau_r`` inserted into
    the grid, so the kink of ``V`` there is represented exactly.
    """
    kw = dict(grid_points=grid_points, grid_lo=grid_lo, grid_hi=grid_hi)
    V = value_iteration(model, costs, eps, tol, max_iter, **kw)
    tau_r = running_threshold(model, costs, eps, V)
    if refine:
        V = value_iteration(model, costs, eps, tol, max_iter, extra_points=[tau_r], **kw)
        tau_r = running_threshold(model, costs, eps, V)
    return GeoPolicy(tau_r, costs.terminal_threshold, V, V.iterations, V.residual)


def run_policy_geo(
    policy: GeoPolicy,
    model: HypothesisPair,
    hypothesis,
    eps: float,
    rng: np.random.Generator,
    max_steps: int = 10_000_000,
) -> PolicyOutcome:
    """One run; the interruption is a Bernoulli(eps) trial after each sample."""
    if not (0.0 < eps <= 1.0):
        raise ValueError("eps must lie in (0, 1]")
    hyp = _as_hypothesis(hypothesis)
    log_r = math.log(policy.tau_r) if policy.tau_r > 0 else -math.inf
    log_t = math.log(policy.tau_t) if policy.tau_t > 0 else -math.inf
    s = 0.0
    path = []
    for n in range(1, max_steps + 1):
        s += model.llr(model.sample(hyp, rng))
        path.append(s)
        if rng.random() < eps:
            dec = Hypothesis.H1 if crosses(s, log_t, n) else Hypothesis.H0
            return PolicyOutcome(n, dec, np.array(path))
        if crosses(s, log_r, n):
            return PolicyOutcome(n, Hypothesis.H1, np.array(path))
    raise RuntimeError("no interruption within max_steps")


class GeoCost(NamedTuple):
    direct: float
    reduced: float
    direct_bound: float
    reduced_bound: float
    n_max: int
    p_fa: float
    p_m: float
    t1: float


def default_n_max(costs: CostSpec, eps: float, tol: float) -> int:
    """Smallest horizon at which ``(1-eps)^n ((1-pi)c0/(1-eps) + c/eps) <= tol * eps``."""
    C = costs.level / (1.0 - eps) + costs.c / eps
    return max(1, math.ceil(math.log(tol * eps / C) / math.log(1.0 - eps)))


def _states(model):
    """Per-symbol (llr, p0, p1) and a key stride for count-vector states."""
    return model.support_llr, model.support_probs(0), model.support_probs(1)


def geo_bayes_cost(
    policy: GeoPolicy,
    model: HypothesisPair,
    costs: CostSpec,
    eps: float,
    n_max: int | None = None,
    tol: float = 1e-10,
) -> GeoCost:
    """Exact Bayesian cost of a two-threshold policy, evaluated two ways.

    ``direct`` sums ``Pr[Nmax = n] J_n`` with ``J_n`` computed from P0 and P1
    path masses.  ``reduced`` is the change-of-measure form under P0 alone::

        E0[ sum_{n<T'} (1-eps)^n c Lambda_n + (1-eps)^T' (1-pi) c0
            + sum_{n<=T'} (1-eps)^(n-1) eps m(Lambda_n) ]

    where ``T'`` is the running-threshold stopping time and ``m`` the cost of
    the terminal decision (``(1-pi)c0`` if ``Lambda >= tau_t`` else
    ``pi c1 Lambda``).  Paths are merged by symbol counts, so the work per
    step is polynomial.  Both values are centred in rigorous tail intervals
    whose half widths are returned as ``*_bound``.
    """
    if not model.is_discrete:
        raise TypeError("exact geometric evaluation needs a discrete model")
    _check_eps(eps)
    if n_max is None:
        n_max = default_n_max(costs, eps, tol)
        auto = True
    else:
        auto = False

    while True:
        res = _propagate(policy, model, costs, eps, n_max)
        worst = max(res.direct_bound, res.reduced_bound)
        if worst <= tol:
            return res
        # bound decays like (1-eps)^n times a slowly varying factor
        need = n_max + max(1, math.ceil(math.log(tol / worst) / math.log(1.0 - eps)))
        if not auto:
            raise TruncationError(n_max, need, worst, tol)
        n_max = need


def _propagate(policy, model, costs, eps, m) -> GeoCost:
    llr_x, w0, w1 = _states(model)
    a = llr_x.size
    stride = m + 1
    key_step = stride ** np.arange(a, dtype=np.int64) if a > 1 else np.array([1], dtype=np.int64)
    if a > 1 and float(stride) ** a > 2**62:
        raise ValueError("n_max too large for count-vector keys")
    log_r = math.log(policy.tau_r) if policy.tau_r > 0 else -math.inf
    log_t = math.log(policy.tau_t) if policy.tau_t > 0 else -math.inf
    lvl = costs.level
    pc1 = costs.pi * costs.c1
    c = costs.c
    q = 1.0 - eps

    keys = np.zeros(1, dtype=np.int64)
    S = np.zeros(1)
    m0 = np.ones(1)
    m1 = np.ones(1)

    fa_stopped = 0.0  # P0[T' < n]
    e1_min = 0.0  # E1[min(T', n)]
    # direct form accumulators
    Ja, Pfa, Pm, T1 = [], [], [], []
    # reduced form, n = 0 sampling term
    Jb = [c]
    for n in range(1, m + 1):
        keys = (keys[:, None] + key_step[None, :]).ravel()
        S = (S[:, None] + llr_x[None, :]).ravel()
        m0 = (m0[:, None] * w0[None, :]).ravel()
        m1 = (m1[:, None] * w1[None, :]).ravel()
        keys, inv = np.unique(keys, return_inverse=True)
        first = np.zeros(keys.size, dtype=np.int64)
        first[inv[::-1]] = np.arange(inv.size)[::-1]
        S = S[first]
        m0 = np.bincount(inv, weights=m0, minlength=keys.size)
        m1 = np.bincount(inv, weights=m1, minlength=keys.size)

        pn = q ** (n - 1) * eps
        e1_min += math.fsum(m1)  # P1[T' >= n]
        term_h1 = crosses(S, log_t, n)
        pfa_n = fa_stopped + math.fsum(m0[term_h1])
        pm_n = math.fsum(m1[~term_h1])
        Pfa.append(pn * pfa_n)
        Pm.append(pn * pm_n)
        T1.append(pn * e1_min)
        Ja.append(pn * (lvl * pfa_n + pc1 * pm_n + c * e1_min))

        lam = np.exp(np.minimum(S, 700.0))
        mt = np.where(term_h1, lvl, pc1 * lam)
        Jb.append(pn * math.fsum(m0 * mt))

        stop = crosses(S, log_r, n)
        p_stop = math.fsum(m0[stop])
        fa_stopped += p_stop
        Jb.append(q**n * lvl * p_stop)
        keep = ~stop
        keys, S, m0, m1 = keys[keep], S[keep], m0[keep], m1[keep]
        Jb.append(q**n * c * math.fsum(m0 * np.exp(np.minimum(S, 700.0))))

    S0 = math.fsum(m0)
    S1 = math.fsum(m1)
    L0 = math.fsum(m0 * np.exp(np.minimum(S, 700.0)))
    qm = q**m
    lower_a = qm * (lvl * fa_stopped + c * (e1_min + S1))
    upper_a = qm * (lvl * (fa_stopped + S0) + pc1 * S1 + c * e1_min + c * S1 / eps)
    direct = math.fsum(Ja) + 0.5 * (lower_a + upper_a)
    bound_a = 0.5 * (upper_a - lower_a)

    upper_b = S0 * lvl * qm + c * q ** (m + 1) * L0 / eps
    reduced = math.fsum(Jb) + 0.5 * upper_b
    bound_b = 0.5 * upper_b

    p_fa = math.fsum(Pfa) + qm * (fa_stopped + 0.5 * S0)
    p_m = math.fsum(Pm) + qm * 0.5 * S1
    t1 = math.fsum(T1) + qm * (e1_min + 0.5 * S1 * (1 + 1 / eps))
    return GeoCost(direct, reduced, bound_a, bound_b, m, p_fa, p_m, t1)
