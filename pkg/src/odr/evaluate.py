"""Ground-truth engines.

* ``exact_eval``: path enumeration for discrete models, with every error
  probability computed twice (directly and through a change of measure).
* ``brute_force_optimum``: minimum Bayesian cost over every adapted
  stop/continue map on short horizons.
* ``mc_eval`` and ``slope_check``: Monte Carlo with direct or
  likelihood-ratio-weighted estimators.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .fixed_horizon import TIE_TOL, CostSpec, ThresholdSchedule
from .geometric_horizon import GeoPolicy, geo_bayes_cost
from .model import Hypothesis, HypothesisPair

MAX_PATHS = 10**7
MAX_PREFIXES = 20
_CHUNK = 1 << 20

DIRECT = "direct"
CHANGE_OF_MEASURE = "change_of_measure"
_ALIASES = {"direct": DIRECT, "cm": CHANGE_OF_MEASURE, "change_of_measure": CHANGE_OF_MEASURE}


class SizeLimitError(ValueError):
    pass


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    p_fa: float
    p_m: float
    t1: float
    cost: float

    def as_dict(self) -> dict:
        return {"p_fa": self.p_fa, "p_m": self.p_m, "t1": self.t1, "cost": self.cost}


@dataclass(frozen=True)
class ExactReport(Metrics):
    """Exact metrics; ``*_cm`` are the same quantities via change of measure.

    ``t1_cm = E0[sum_{k<T} Lambda_k]``, ``p_m_cm = E0[Lambda_N; miss]`` and
    ``p_fa_cm = E1[1/Lambda_T; H1 declared]``.
    """

    truncation_bound: float = 0.0
    t1_cm: float = math.nan
    p_m_cm: float = math.nan
    p_fa_cm: float = math.nan

    def as_dict(self) -> dict:
        d = super().as_dict()
        d.update(truncation_bound=self.truncation_bound, t1_cm=self.t1_cm, p_m_cm=self.p_m_cm, p_fa_cm=self.p_fa_cm)
        return d


@dataclass(frozen=True)
class McReport:
    estimates: Metrics
    std_errors: Metrics
    n_trials: int
    estimator: str

    def as_dict(self) -> dict:
        return {
            "estimates": self.estimates.as_dict(),
            "std_errors": self.std_errors.as_dict(),
            "n_trials": self.n_trials,
            "estimator": self.estimator,
        }


def _cost(costs: CostSpec | None, p_fa, p_m, t1):
    if costs is None:
        return math.nan
    return costs.level * p_fa + costs.pi * costs.c1 * p_m + costs.c * t1


def _require_discrete(model):
    if not model.is_discrete:
        raise TypeError("exact evaluation needs a discrete model; use mc_eval")


# --------------------------------------------------------------------- exact


def exact_eval(policy, model: HypothesisPair, costs: CostSpec | None = None, *, eps: float | None = None,
               n_max: int | None = None, tol: float = 1e-10) -> ExactReport:
    """Exact P_FA, P_M, E1[T] and cost of a policy on a discrete model.

    Fixed-horizon schedules enumerate all ``alphabet^N`` paths (at most
    ``MAX_PATHS``).  Geometric policies need ``eps`` and use the merged-state
    evaluation of ``geo_bayes_cost``.
    """
    _require_discrete(model)
    if isinstance(policy, GeoPolicy):
        if eps is None:
            raise ValueError("geometric policies need eps")
        if costs is None:
            raise ValueError("geometric evaluation needs costs")
        r = geo_bayes_cost(policy, model, costs, eps, n_max=n_max, tol=tol)
        return ExactReport(r.p_fa, r.p_m, r.t1, r.direct, truncation_bound=r.direct_bound)
    return _exact_fixed(policy, model, costs)


def _exact_fixed(schedule: ThresholdSchedule, model, costs) -> ExactReport:
    N = schedule.N
    a = model.support.size
    if float(a) ** N > MAX_PATHS:
        raise SizeLimitError(f"{a}^{N} paths exceed the limit of {MAX_PATHS}; use Monte Carlo")
    lx = model.support_llr
    lw0 = np.log(model.support_probs(0))
    lw1 = np.log(model.support_probs(1))
    lt = schedule.log_taus
    acc = {k: [] for k in ("fa", "fa_cm", "pm", "pm_cm", "t1", "t1_cm")}

    def add(key, arr):
        acc[key].append(math.fsum(arr))

    def walk(n, S, l0, l1, L):
        if S.size * a > _CHUNK and S.size > 1:
            h = S.size // 2
            walk(n, S[:h], l0[:h], l1[:h], L[:h])
            walk(n, S[h:], l0[h:], l1[h:], L[h:])
            return
        L = np.repeat(L + np.exp(S), a)
        S = (S[:, None] + lx[None, :]).ravel()
        l0 = (l0[:, None] + lw0[None, :]).ravel()
        l1 = (l1[:, None] + lw1[None, :]).ravel()
        n += 1
        h1 = S >= lt[n - 1] - TIE_TOL * n
        p0 = np.exp(l0)
        p1 = np.exp(l1)
        add("fa", p0[h1])
        add("fa_cm", np.exp(l1[h1] - S[h1]))
        if n == N:
            add("pm", p1[~h1])
            add("pm_cm", np.exp(l0[~h1] + S[~h1]))
            add("t1", N * p1)
            add("t1_cm", p0 * L)
            return
        add("t1", n * p1[h1])
        add("t1_cm", p0[h1] * L[h1])
        keep = ~h1
        if np.any(keep):
            walk(n, S[keep], l0[keep], l1[keep], L[keep])

    z = np.zeros(1)
    walk(0, z, z.copy(), z.copy(), z.copy())
    tot = {k: math.fsum(v) for k, v in acc.items()}
    return ExactReport(
        tot["fa"],
        tot["pm"],
        tot["t1"],
        _cost(costs, tot["fa"], tot["pm"], tot["t1"]),
        0.0,
        t1_cm=tot["t1_cm"],
        p_m_cm=tot["pm_cm"],
        p_fa_cm=tot["fa_cm"],
    )


@dataclass(frozen=True)
class BruteForceRule:
    """Argmin of the enumeration: the set of prefixes at which the rule stops."""

    N: int
    stop_prefixes: tuple
    cost: float

    def schedule_free_decide(self, symbols) -> tuple[int, bool]:
        """Stop time of a symbol sequence and whether it stopped early."""
        stops = set(self.stop_prefixes)
        for n in range(1, self.N):
            if tuple(symbols[:n]) in stops:
                return n, True
        return self.N, False


def brute_force_optimum(model: HypothesisPair, costs: CostSpec, N: int) -> tuple[float, BruteForceRule]:
    """Minimum of the Bayesian cost over all adapted stopping rules.

    Every stop/continue map on the prefixes of length ``1..N-1`` is tried;
    at ``N`` the terminal decision is the cheaper of the two per path.  All
    probabilities are plain products under P0 and P1, independent of the
    threshold machinery.
    """
    _require_discrete(model)
    if N < 1:
        raise ValueError("N must be >= 1")
    syms = [int(s) for s in model.support]
    w0 = dict(zip(syms, model.support_probs(0)))
    w1 = dict(zip(syms, model.support_probs(1)))
    prefixes = [p for n in range(1, N) for p in itertools.product(syms, repeat=n)]
    if len(prefixes) > MAX_PREFIXES:
        raise SizeLimitError(f"{len(prefixes)} prefixes exceed the limit of {MAX_PREFIXES}")
    index = {p: i for i, p in enumerate(prefixes)}
    paths = list(itertools.product(syms, repeat=N))
    lvl, pc1, c = costs.level, costs.pi * costs.c1, costs.c

    P0 = np.array([math.prod(w0[s] for s in p) for p in paths])
    P1 = np.array([math.prod(w1[s] for s in p) for p in paths])
    terminal = np.minimum(lvl * P0, pc1 * P1) + c * N * P1
    n_maps = 1 << len(prefixes)
    best = (math.inf, 0)
    step = 1 << 16
    shifts = np.arange(len(prefixes), dtype=np.int64)
    for start in range(0, n_maps, step):
        maps = np.arange(start, min(start + step, n_maps), dtype=np.int64)
        bits = ((maps[:, None] >> shifts[None, :]) & 1).astype(bool)
        J = np.zeros(maps.size)
        for j, p in enumerate(paths):
            T = np.full(maps.size, N)
            for n in range(N - 1, 0, -1):
                T = np.where(bits[:, index[p[:n]]], n, T)
            early = T < N
            J += np.where(early, lvl * P0[j] + c * T * P1[j], terminal[j])
        k = int(np.argmin(J))
        if J[k] < best[0]:
            best = (float(J[k]), int(maps[k]))
    chosen = tuple(p for i, p in enumerate(prefixes) if (best[1] >> i) & 1)
    return best[0], BruteForceRule(N, chosen, best[0])


# --------------------------------------------------------------- Monte Carlo


def _increments(model, hyp, rng, size):
    if model.is_discrete:
        cdf = np.cumsum(model.support_probs(hyp))
        idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
        return model.support_llr[np.minimum(idx, cdf.size - 1)]
    a = model.A
    mean = 0.5 * a * a if hyp is Hypothesis.H1 else -0.5 * a * a
    return mean + a * rng.standard_normal(size)


def _simulate_fixed(schedule, model, hyp, rng, size):
    """Stop times, H1 flags and llr sums at the stop, for ``size`` runs."""
    N = schedule.N
    S = np.cumsum(_increments(model, hyp, rng, (size, N)), axis=1)
    slack = TIE_TOL * np.arange(1, N + 1)
    hit = S >= schedule.log_taus[None, :] - slack[None, :]
    any_hit = hit.any(axis=1)
    first = np.where(any_hit, hit.argmax(axis=1), N - 1)
    T = first + 1
    S_T = S[np.arange(size), first]
    return T, any_hit, S_T


def _simulate_geo(policy, model, eps, hyp, rng, size):
    log_r = math.log(policy.tau_r) if policy.tau_r > 0 else -math.inf
    log_t = math.log(policy.tau_t) if policy.tau_t > 0 else -math.inf
    T = np.zeros(size, dtype=np.int64)
    h1 = np.zeros(size, dtype=bool)
    S = np.zeros(size)
    active = np.ones(size, dtype=bool)
    n = 0
    while active.any():
        n += 1
        inc = _increments(model, hyp, rng, size)
        interrupt = rng.random(size) < eps
        S = np.where(active, S + inc, S)
        slack = TIE_TOL * n
        at_int = active & interrupt
        h1 |= at_int & (S >= log_t - slack)
        run_stop = active & ~interrupt & (S >= log_r - slack)
        h1 |= run_stop
        done = at_int | run_stop
        T[done] = n
        active &= ~done
    return T, h1, S


def _block_stats(policy, model, costs, eps, hyp, estimator, seed, item):
    idx, size = item
    gen = rngmod.stream(seed, int(hyp), idx)
    if isinstance(policy, GeoPolicy):
        T, h1, S = _simulate_geo(policy, model, eps, hyp, gen, size)
    else:
        T, h1, S = _simulate_fixed(policy, model, hyp, gen, size)
    cols = {}
    if hyp is Hypothesis.H0:
        if estimator == DIRECT:
            cols["p_fa"] = h1.astype(float)
        else:
            # E0[Lambda; miss]; the miss event bounds the weight by tau_t
            cols["p_m"] = np.where(h1, 0.0, np.exp(np.minimum(S, 700.0)))
    else:
        t = T.astype(float)
        cols["t1"] = t
        if estimator == DIRECT:
            miss = (~h1).astype(float)
            cols["p_m"] = miss
            if costs is not None:
                cols["y"] = costs.pi * costs.c1 * miss + costs.c * t
        else:
            fa = np.where(h1, np.exp(-np.maximum(S, -700.0)), 0.0)
            cols["p_fa"] = fa
            if costs is not None:
                cols["y"] = costs.level * fa + costs.c * t
    return {k: (math.fsum(v), math.fsum(v * v)) for k, v in cols.items()}


def _reduce(parts, n):
    keys = parts[0].keys()
    out = {}
    for k in keys:
        s = math.fsum(p[k][0] for p in parts)
        s2 = math.fsum(p[k][1] for p in parts)
        mean = s / n
        var = max(s2 / n - mean * mean, 0.0) * n / (n - 1) if n > 1 else 0.0
        out[k] = (mean, math.sqrt(var / n))
    return out


def _run(policy, model, costs, eps, hyp, estimator, n_trials, seed):
    items = rngmod.blocks(n_trials)
    parts = rngmod.map_blocks(
        lambda it: _block_stats(policy, model, costs, eps, hyp, estimator, seed, it), items
    )
    return _reduce(parts, n_trials)


def mc_eval(policy, model: HypothesisPair, costs: CostSpec | None, n_trials: int,
            estimator: str = DIRECT, *, seed: int = 0, eps: float | None = None) -> McReport:
    """Monte Carlo metrics of a fixed-horizon schedule or a geometric policy.

    ``direct`` counts false alarms under H0 and misses under H1.  The
    change-of-measure estimator reweights instead: P_M = E0[Lambda_T; miss]
    from H0 runs and P_FA = E1[1/Lambda_T; H1 declared] from H1 runs.  E1[T]
    always comes from H1 runs.  The cost error combines the two independent
    samples.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    try:
        est = _ALIASES[estimator]
    except KeyError:
        raise EstimatorError(f"unknown estimator {estimator!r}") from None
    if isinstance(policy, GeoPolicy) and eps is None:
        raise ValueError("geometric policies need eps")
    r0 = _run(policy, model, costs, eps, Hypothesis.H0, est, n_trials, seed)
    r1 = _run(policy, model, costs, eps, Hypothesis.H1, est, n_trials, seed)
    both = {**r0, **r1}
    p_fa, se_fa = both["p_fa"]
    p_m, se_m = both["p_m"]
    t1, se_t = both["t1"]
    cost = _cost(costs, p_fa, p_m, t1)
    if costs is None:
        se_cost = math.nan
    elif est == DIRECT:
        se_cost = math.hypot(costs.level * se_fa, r1["y"][1])
    else:
        se_cost = math.hypot(costs.pi * costs.c1 * se_m, r1["y"][1])
    return McReport(
        Metrics(p_fa, p_m, t1, cost),
        Metrics(se_fa, se_m, se_t, se_cost),
        n_trials,
        est,
    )


def estimate_pm(policy, model, n_trials, estimator=CHANGE_OF_MEASURE, *, seed=0, eps=None):
    """Miss probability and its standard error alone."""
    est = _ALIASES[estimator]
    hyp = Hypothesis.H0 if est == CHANGE_OF_MEASURE else Hypothesis.H1
    return _run(policy, model, None, eps, hyp, est, n_trials, seed)["p_m"]


def calibrate_ospr(model, N: int, target_fa: float, n_trials: int = 200_000, *, seed: int = 0) -> float:
    """Threshold B of the truncated one-sided SPRT with P_FA close to ``target_fa``.

    P_FA is the H0 probability that the running llr maximum over ``N``
    samples reaches ``log B``, so ``log B`` is its ``1 - target_fa``
    quantile, estimated here by simulation.
    """
    if not (0 < target_fa < 1):
        raise ValueError("target_fa must lie in (0, 1)")
    peaks = []
    for idx, size in rngmod.blocks(n_trials):
        gen = rngmod.stream(seed, 7, idx)
        S = np.cumsum(_increments(model, Hypothesis.H0, gen, (size, N)), axis=1)
        peaks.append(S.max(axis=1))
    q = float(np.quantile(np.concatenate(peaks), 1.0 - target_fa))
    return math.exp(q)


@dataclass(frozen=True)
class SlopeReport:
    slope: float
    intercept: float
    slope_se: float
    Ns: tuple
    p_m: tuple
    p_m_se: tuple
    target: float | None = None
    estimator: str = CHANGE_OF_MEASURE
    residuals: tuple = field(default=())

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_se": self.slope_se,
            "N": list(self.Ns),
            "p_m": list(self.p_m),
            "p_m_se": list(self.p_m_se),
            "target": self.target,
            "estimator": self.estimator,
        }


def slope_check(policy_family, model, N_list, target_slope=None, estimator=CHANGE_OF_MEASURE, *,
                n_trials: int = 10**6, seed: int = 0, eps=None) -> SlopeReport:
    """Least squares fit of ``-log P_M(N)`` against ``N``.

    The fit is unweighted; the Monte Carlo error of each point enters the
    slope error through the delta method (``se(-log p) = se(p) / p``).  An
    estimate whose standard error reaches its own size carries no usable
    exponent information and raises.
    """
    Ns = [int(n) for n in N_list]
    if len(Ns) < 3 or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("N_list must be ascending with at least 3 values")
    est = _ALIASES[estimator]
    pm, se = [], []
    for n in Ns:
        p, s = estimate_pm(policy_family(n), model, n_trials, est, seed=seed * 100_003 + n, eps=eps)
        if p <= 0 or s >= p:
            raise EstimatorError(
                f"P_M estimate at N={n} ({p:.3g} +- {s:.3g}) is consistent with 0; "
                "use the change-of-measure estimator or more trials"
            )
        pm.append(p)
        se.append(s)
    x = np.array(Ns, dtype=float)
    y = -np.log(pm)
    sig = np.array(se) / np.array(pm)
    xc = x - x.mean()
    weights = xc / float(xc @ xc)
    slope = float(weights @ y)
    intercept = float(y.mean() - slope * x.mean())
    return SlopeReport(
        slope,
        intercept,
        float(math.sqrt(weights**2 @ sig**2)),
        tuple(Ns),
        tuple(pm),
        tuple(se),
        target_slope,
        est,
        tuple(y - (intercept + slope * x)),
    )
