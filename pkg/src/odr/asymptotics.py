"""Error-exponent calculus for ODRs as the horizon grows.

A tuple (Delta_FA, Delta_M, eta) collects the false-alarm and miss
exponents and the normalized expected stopping time under H1.  The
boundary is parameterized by ``nu`` in [0, 1]::

    Delta_M(nu) = sup_{a<0} a[d1 - nu(d0+d1)] - log E1[exp(a llr)]
    Delta_FA(nu, eta) = min{eta d1, sup_{a>0} a[d1 - nu(d0+d1)] - log E0[exp(a llr)]}

All exponents are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .fixed_horizon import ThresholdSchedule
from .model import Hypothesis, HypothesisPair, chernoff_info

ALPHA_WINDOW = 50.0
_XATOL = 1e-10


class WindowError(RuntimeError):
    """The exponent optimizer ran into the edge of its alpha window."""


@dataclass(frozen=True)
class ExponentTuple:
    """A point (Delta_FA, Delta_M, eta).

    ``fa_sup`` is the unclipped large-deviation term of Delta_FA and
    ``active`` names the clause that attains the min (``"eta"`` or ``"sup"``).
    """

    delta_fa: float
    delta_m: float
    eta: float
    fa_sup: float = math.nan
    active: str = ""

    def __post_init__(self):
        for name in ("delta_fa", "delta_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    def normalized(self, scale: float) -> tuple[float, float, float]:
        return self.delta_fa / scale, self.delta_m / scale, self.eta


def _sup(objective, lo, hi):
    res = optimize.minimize_scalar(
        lambda a: -objective(a), bounds=(lo, hi), method="bounded", options={"xatol": _XATOL}
    )
    a = float(res.x)
    edge = lo if abs(a - lo) < abs(a - hi) else hi
    if edge != 0.0 and abs(a - edge) < 1e-6:
        raise WindowError(f"optimum at alpha = {a:.6g} touches the search window; widen it")
    # the alpha -> 0 limit always gives 0
    return max(-float(res.fun), 0.0), a


def _target(model, nu):
    d0, d1 = model.d0, model.d1
    return d1 - nu * (d0 + d1)


def miss_exponent(model: HypothesisPair, nu: float, window: float = ALPHA_WINDOW) -> float:
    t = _target(model, nu)
    return _sup(lambda a: a * t - model.log_mgf(Hypothesis.H1, a), -window, 0.0)[0]


def fa_sup(model: HypothesisPair, nu: float, window: float = ALPHA_WINDOW) -> float:
    t = _target(model, nu)
    return _sup(lambda a: a * t - model.log_mgf(Hypothesis.H0, a), 0.0, window)[0]


def _check_unit(name, v):
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def boundary_point(model: HypothesisPair, nu: float, eta: float, window: float = ALPHA_WINDOW) -> ExponentTuple:
    _check_unit("nu", nu)
    _check_unit("eta", eta)
    dm = miss_exponent(model, nu, window)
    fs = fa_sup(model, nu, window)
    cap = eta * model.d1
    active = "eta" if cap <= fs else "sup"
    return ExponentTuple(min(cap, fs), dm, eta, fa_sup=fs, active=active)


def gaussian_region_check(A: float, x: float, y: float, z: float) -> bool:
    """Membership of normalized coordinates in the Gaussian region.

    ``x`` and ``y`` are the exponents divided by ``A^2/2`` and ``z`` is eta;
    after that scaling the region no longer depends on ``A``.
    """
    if not (A > 0):
        raise ValueError("A must be > 0")
    if x < 0 or y < 0 or z < 0:
        return False
    return x <= z and math.sqrt(x) + math.sqrt(y) <= 1.0 + 1e-12


def chernoff_operating_eta(model: HypothesisPair) -> float:
    """Smallest eta at which both exponents can equal the Chernoff information."""
    d1 = model.d1
    if d1 < 1e-12:
        raise ValueError(f"d1 = {d1:.3g} is too small; the hypotheses are nearly identical")
    return chernoff_info(model) / d1


def _bisect(pred, lo, hi, tol=1e-12, max_iter=200):
    """Largest x in [lo, hi] with pred(x) true, given pred(lo) and monotone pred."""
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def nu_star(model: HypothesisPair, eta: float) -> float:
    """The ``nu`` at which the large-deviation term of Delta_FA equals eta d1."""
    _check_unit("eta", eta)
    level = eta * model.d1
    if fa_sup(model, 0.0) <= level:
        return 0.0
    return _bisect(lambda v: fa_sup(model, v) >= level, 0.0, 1.0)


def in_region(model: HypothesisPair, delta_fa: float, delta_m: float, eta: float, tol: float = 1e-9) -> bool:
    """Whether the tuple lies under the boundary for some ``nu``.

    The Delta_FA term falls and Delta_M rises with ``nu``, so the best
    choice is the largest ``nu`` whose Delta_FA term still covers
    ``delta_fa``.
    """
    if delta_fa < 0 or delta_m < 0 or not (0 <= eta <= 1):
        return False
    if delta_fa > eta * model.d1 + tol:
        return False
    if fa_sup(model, 0.0) < delta_fa - tol:
        return False
    nu = _bisect(lambda v: fa_sup(model, v) >= delta_fa - tol, 0.0, 1.0)
    return delta_m <= miss_exponent(model, nu) + tol


def chernoff_from_region(model: HypothesisPair) -> float:
    """Common value of the two exponent terms where they meet."""
    nu = _bisect(lambda v: fa_sup(model, v) >= miss_exponent(model, v), 0.0, 1.0)
    return 0.5 * (fa_sup(model, nu) + miss_exponent(model, nu))


def min_eta_by_bisection(model: HypothesisPair, delta_fa: float, delta_m: float, tol: float = 1e-10) -> float:
    """Smallest eta with the tuple in the region, by bisection on eta."""
    if not in_region(model, delta_fa, delta_m, 1.0):
        raise ValueError("tuple is outside the region even at eta = 1")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if in_region(model, delta_fa, delta_m, mid):
            hi = mid
        else:
            lo = mid
    return hi


def region_table(model: HypothesisPair, nu_grid, eta: float) -> list[ExponentTuple]:
    return [boundary_point(model, float(v), eta) for v in nu_grid]


@dataclass(frozen=True)
class TwoStageDesign:
    """Single early look at ``M``, final decision at ``N``; thresholds are logs."""

    M: int
    tau_M: float
    tau_N: float
    N: int

    def __post_init__(self):
        if not (1 <= self.M < self.N):
            raise ValueError(f"need 1 <= M < N, got M={self.M}, N={self.N}")

    def schedule(self) -> ThresholdSchedule:
        lt = np.full(self.N, np.inf)
        lt[self.M - 1] = self.tau_M
        lt[self.N - 1] = self.tau_N
        return ThresholdSchedule(self.N, lt)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def design_two_stage(model: HypothesisPair, N: int, eta: float, mu: float, nu: float) -> TwoStageDesign:
    """Two-stage rule with ``M = round(eta N)``.

    ``tau_M / M = d1 - mu (d0 + d1)`` and ``tau_N / N = d1 - nu (d0 + d1)``.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    if not (0 < eta <= 1):
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    for name, v in (("mu", mu), ("nu", nu)):
        if not (0 < v < 1):
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    M = _round_half_up(eta * N)
    if not (1 <= M <= N - 1):
        raise ValueError(f"M = round(eta N) = {M} must lie in [1, {N - 1}]")
    return TwoStageDesign(M, M * _target(model, mu), N * _target(model, nu), N)


def stein_design(model: HypothesisPair, N: int, eps: float, delta: float) -> TwoStageDesign:
    """Two-stage rule aiming at the miss exponent ``d0 - delta``.

    Both looks use ``tau / n = -(d0 - delta)`` with the early look at
    ``M = round(eps N)``.
    """
    if not (0 < eps < 1):
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    M = _round_half_up(eps * N)
    if not (1 <= M <= N - 1):
        raise ValueError(f"M = round(eps N) = {M} must lie in [1, {N - 1}]")
    rate = -(model.d0 - delta)
    return TwoStageDesign(M, M * rate, N * rate, N)


def truncated_ospr_policy(B: float, N: int) -> ThresholdSchedule:
    """Truncated one-sided SPRT: H1 as soon as ``Lambda_n >= B``, else H0 at ``N``."""
    if not (B > 1):
        raise ValueError(f"B must be > 1, got {B}")
    if N < 1:
        raise ValueError("N must be >= 1")
    return ThresholdSchedule(N, np.full(N, math.log(B)))
