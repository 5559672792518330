"""Bayes-optimal opportunistic detection with a fixed maximum sample size N.

The optimal rule stops and declares H1 at the first ``n`` with
``Lambda_n >= tau_n``; at ``n = N`` it declares H1 iff
``Lambda_N >= (1 - pi) c0 / (pi c1)``.  The thresholds ``tau_1..tau_{N-1}``
come from a backward recursion on the continuation values ``h_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curve import (
    DEFAULT_HI,
    DEFAULT_LO,
    DEFAULT_POINTS,
    GridExpectation,
    _dedupe,
    ValueCurve,
    expect_h0,
    find_crossing,
    merge_points,
    standard_grid,
)
from .model import Hypothesis, HypothesisPair, _as_hypothesis


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Prior ``pi`` of H1 and cost weights of the Bayesian objective.

    ``J = (1 - pi) c0 P_FA + pi c1 P_M + c E1[T]``.
    """

    pi: float
    c0: float
    c1: float
    c: float

    def __post_init__(self):
        if not (0.0 <= self.pi <= 1.0):
            raise CostError(f"pi must lie in [0, 1], got {self.pi}")
        for name in ("c0", "c1", "c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise CostError(f"{name} must be > 0, got {v}")

    @property
    def level(self) -> float:
        """Cost of stopping early, ``(1 - pi) c0``."""
        return (1.0 - self.pi) * self.c0

    @property
    def terminal_threshold(self) -> float:
        return (1.0 - self.pi) * self.c0 / (self.pi * self.c1)

    def require_nondegenerate(self):
        if not (0.0 < self.pi < 1.0):
            raise CostError("thresholds are undefined for pi in {0, 1}")

    @classmethod
    def from_config(cls, cfg) -> "CostSpec":
        try:
            return cls(float(cfg["pi"]), float(cfg["c0"]), float(cfg["c1"]), float(cfg["c"]))
        except KeyError as exc:
            raise CostError(f"costs block missing field {exc.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class ThresholdSchedule:
    """Thresholds ``tau_1..tau_N`` kept as natural logs.

    ``log_taus[n-1] = -inf`` forces a stop at ``n``; ``+inf`` disables it.
    """

    N: int
    log_taus: np.ndarray
    curves: tuple | None = None
    costs: CostSpec | None = None
    optimal_cost: float | None = None
    # thresholds as given, so exp(log(tau)) round-off never leaks out
    exact_taus: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        lt = np.asarray(self.log_taus, dtype=float)
        if self.N < 1 or lt.shape != (self.N,):
            raise ValueError(f"need exactly N = {self.N} thresholds, got shape {lt.shape}")
        if np.any(np.isnan(lt)):
            raise ValueError("thresholds must not be NaN")
        object.__setattr__(self, "log_taus", lt)

    @classmethod
    def from_taus(cls, taus: Sequence[float], **kw) -> "ThresholdSchedule":
        taus = np.asarray(taus, dtype=float)
        if np.any(taus < 0):
            raise ValueError("thresholds must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(len(taus), np.log(taus), exact_taus=taus, **kw)

    @property
    def taus(self) -> np.ndarray:
        if self.exact_taus is not None:
            return np.array(self.exact_taus, dtype=float)
        return np.exp(self.log_taus)


@dataclass(frozen=True)
class PolicyOutcome:
    stop_time: int
    decision: Hypothesis
    llr_path: np.ndarray = field(repr=False)


# llr sums are compared to log thresholds with this slack so that exact ties
# of the discrete lattice (lost to rounding) count as ">=".
TIE_TOL = 1e-12


def crosses(llr_sum, log_tau, n: int = 1):
    return np.asarray(llr_sum) >= np.asarray(log_tau) - TIE_TOL * max(n, 1)


def terminal_curve(costs: CostSpec, grid: np.ndarray | None = None) -> ValueCurve:
    """``h_N(lam) = min{(1 - pi) c0, pi c1 lam}`` with its kink on the grid."""
    if grid is None:
        grid = standard_grid()
    lvl = costs.level
    grid = merge_points(grid, [costs.terminal_threshold]) if costs.pi > 0 else grid
    return ValueCurve(
        grid, np.minimum(lvl, costs.pi * costs.c1 * grid), 0.0, lvl, kinks=(costs.terminal_threshold,)
    )


def _bracket(f, level, c):
    hi = max(level / c, 1e-300) * 2.0
    lo = min(level / c, 1.0) * 1e-12
    while f(lo) >= level and lo > 1e-300:
        lo *= 1e-6
    while f(hi) < level:
        hi *= 4.0
    return lo, hi


def backward_recursion(
    model: HypothesisPair,
    costs: CostSpec,
    N: int,
    *,
    grid_points: int = DEFAULT_POINTS,
    grid_lo: float = DEFAULT_LO,
    grid_hi: float = DEFAULT_HI,
    keep_curves: bool = False,
) -> ThresholdSchedule:
    """Thresholds of the Bayes-optimal ODR for maximum sample size ``N``.

    Runs ``h_{k-1}(lam) = min{(1-pi)c0, c lam + E0[h_k(lam l)]}`` from
    ``h_N`` down to ``h_1`` and solves ``c lam + E0[h_{k+1}(lam l)] = (1-pi)c0``
    for each ``tau_k``.  Kinks of ``h_k`` are inserted into its grid: the
    thresholds themselves, and for discrete models also every image of an
    earlier kink under ``lam -> lam / l(x)``, which keeps those curves exact
    on ``[grid_lo, inf)``.

    The returned schedule also carries the optimal cost
    ``c + E0[h_1(l)]`` (the first sample is always taken).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    costs.require_nondegenerate()
    base = standard_grid(grid_points, grid_lo, grid_hi)
    level = costs.level
    c = costs.c

    h = terminal_curve(costs, base)
    kinks = np.array([costs.terminal_threshold])
    log_taus = np.empty(N)
    taus = np.empty(N)
    taus[N - 1] = costs.terminal_threshold
    log_taus[N - 1] = math.log(taus[N - 1])
    curves = [h]
    inv_l = np.exp(-model.support_llr) if model.is_discrete else None

    for k in range(N - 1, 0, -1):
        def f(lam, h=h):
            return c * lam + expect_h0(model, h, lam)

        tau = find_crossing(f, level, _bracket(f, level, c))
        taus[k - 1] = tau
        log_taus[k - 1] = math.log(tau)
        if model.is_discrete:
            imgs = (kinks[:, None] * inv_l[None, :]).ravel()
            imgs = imgs[(imgs >= grid_lo) & (imgs < tau)]
            kinks = _dedupe(np.unique(np.append(imgs, tau)), 1e-12)
            grid = merge_points(base, kinks)
            vals = np.full(grid.size, level)
            inside = grid < tau
            vals[inside] = np.minimum(level, f(grid[inside]))
        else:
            grid = merge_points(base, [tau])
            vals = np.full(grid.size, level)
            inside = grid < tau
            E = GridExpectation(model, h.grid, base)(h.values, h.left_limit, h.right_value)
            on_base = np.minimum(level, c * base + E[np.searchsorted(h.grid, base)])
            vals[np.searchsorted(grid, base)] = np.where(base < tau, on_base, level)
        h = ValueCurve(grid, vals, 0.0, level, kinks=() if model.is_discrete else (tau,))
        if keep_curves:
            curves.append(h)

    optimal = c + expect_h0(model, h, 1.0)
    return ThresholdSchedule(
        N,
        log_taus,
        curves=tuple(reversed(curves)) if keep_curves else None,
        costs=costs,
        optimal_cost=float(optimal),
        exact_taus=taus,
    )


def decide(schedule: ThresholdSchedule, llr_increments: Sequence[float]) -> PolicyOutcome:
    """Run the schedule on a given sequence of per-sample llr values."""
    path = np.cumsum(np.asarray(llr_increments, dtype=float)[: schedule.N])
    for n in range(1, path.size + 1):
        if crosses(path[n - 1], schedule.log_taus[n - 1], n):
            return PolicyOutcome(n, Hypothesis.H1, path[:n])
    if path.size < schedule.N:
        raise ValueError("path ended before the rule reached a decision")
    return PolicyOutcome(schedule.N, Hypothesis.H0, path)


def run_policy(
    schedule: ThresholdSchedule,
    model: HypothesisPair,
    hypothesis,
    rng: np.random.Generator,
) -> PolicyOutcome:
    """Draw samples one at a time under ``hypothesis`` until the rule decides."""
    hyp = _as_hypothesis(hypothesis)
    s = 0.0
    path = []
    for n in range(1, schedule.N + 1):
        s += model.llr(model.sample(hyp, rng))
        path.append(s)
        if crosses(s, schedule.log_taus[n - 1], n):
            return PolicyOutcome(n, Hypothesis.H1, np.array(path))
    return PolicyOutcome(schedule.N, Hypothesis.H0, np.array(path))


def bayes_cost(
    schedule: ThresholdSchedule,
    model: HypothesisPair,
    costs: CostSpec,
    *,
    mode: str = "exact",
    n_trials: int = 100_000,
    seed: int = 0,
) -> float:
    """Bayesian cost of ``schedule``: exact path enumeration or Monte Carlo."""
    from . import evaluate

    if mode == "exact":
        return evaluate.exact_eval(schedule, model, costs).cost
    if mode == "mc":
        return evaluate.mc_eval(schedule, model, costs, n_trials, seed=seed).estimates.cost
    raise ValueError(f"unknown mode {mode!r}")
