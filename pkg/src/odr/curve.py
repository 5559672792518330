"""Monotone concave functions of the likelihood-ratio statistic.

A :class:`ValueCurve` is piecewise linear in lambda between its grid points,
runs linearly from ``left_limit`` at lambda = 0 up to the first grid point
and is constant (``right_value``) past the last one.  Piecewise-linear
interpolation in lambda keeps concavity and monotonicity intact and is exact
for the curves produced by discrete models, whose value functions are
themselves piecewise linear.

The expectation ``E0[curve(lam * l)]`` with ``l = p1(x)/p0(x)``, ``x ~ p0``
is an exact finite sum for discrete models.  For the Gaussian pair ``lam * l``
is lognormal, and the expectation of a piecewise-linear function reduces to
normal CDF differences on each segment, so it is computed in closed form too.
What remains is the interpolation error of a smooth curve, O(h^2) in the log
spacing h; it is removed by Richardson extrapolation against the same
expectation taken on every other grid point (kinks always kept).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy import sparse
from scipy.special import ndtr

from .model import GaussianShift, HypothesisPair

DEFAULT_POINTS = 2001
DEFAULT_LO = 1e-8
DEFAULT_HI = 1e8

# rows * columns per dense block when assembling Gaussian weights
_BLOCK = 2_000_000


class NoCrossingError(ValueError):
    def __init__(self, lo, hi, f_lo, f_hi, level):
        super().__init__(
            f"no crossing in bracket: f({lo:.6g}) = {f_lo:.6g}, "
            f"f({hi:.6g}) = {f_hi:.6g}, level = {level:.6g}"
        )
        self.lo, self.hi, self.f_lo, self.f_hi, self.level = lo, hi, f_lo, f_hi, level


def standard_grid(points: int = DEFAULT_POINTS, lo: float = DEFAULT_LO, hi: float = DEFAULT_HI) -> np.ndarray:
    if points < 2 or not (0 < lo < hi):
        raise ValueError("grid needs at least two points and 0 < lo < hi")
    return np.geomspace(lo, hi, points)


def merge_points(grid: np.ndarray, extra: Iterable[float], rtol: float = 1e-12) -> np.ndarray:
    """Sorted union of ``grid`` and ``extra``.

    Every grid point is kept; an extra point within ``rtol`` (relative) of a
    grid point or of another extra point is dropped.
    """
    grid = np.asarray(grid, dtype=float)
    extra = np.unique(np.asarray(extra, dtype=float).ravel())
    extra = _dedupe(extra[np.isfinite(extra) & (extra > 0)], rtol)
    if extra.size == 0:
        return grid
    pos = np.searchsorted(grid, extra)
    near = np.zeros(extra.size, dtype=bool)
    for off in (-1, 0):
        j = np.clip(pos + off, 0, grid.size - 1)
        near |= np.abs(extra - grid[j]) <= rtol * extra
    return np.union1d(grid, extra[~near])


def _dedupe(x: np.ndarray, rtol: float) -> np.ndarray:
    if x.size < 2:
        return x
    keep = np.ones(x.size, dtype=bool)
    keep[1:] = np.diff(x) > rtol * x[1:]
    return x[keep]


@dataclass(frozen=True, eq=False)
class ValueCurve:
    grid: np.ndarray
    values: np.ndarray
    left_limit: float = 0.0
    right_value: float | None = None
    # points where the curve has a corner; kept on the coarse grid of the
    # extrapolated Gaussian expectation
    kinks: tuple = ()

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 1:
            raise ValueError("grid and values must be 1-D arrays of equal length")
        if grid[0] <= 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be positive and strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if self.right_value is None:
            object.__setattr__(self, "right_value", float(values[-1]))
        object.__setattr__(self, "kinks", tuple(float(k) for k in np.atleast_1d(self.kinks)))

    @classmethod
    def from_function(cls, f: Callable[[np.ndarray], np.ndarray], grid, left_limit=0.0, right_value=None):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.asarray(f(grid), dtype=float), left_limit, right_value)

    def __call__(self, lam):
        return self.eval(lam)

    def eval(self, lam):
        lam = np.asarray(lam, dtype=float)
        if np.any(lam <= 0) or np.any(np.isnan(lam)):
            raise ValueError("curve is defined for lambda > 0 only")
        g, v = self.grid, self.values
        out = np.interp(lam, g, v, right=self.right_value)
        below = lam < g[0]
        if np.any(below):
            out = np.where(below, self.left_limit + (v[0] - self.left_limit) * (lam / g[0]), out)
        return float(out) if out.ndim == 0 else out

    @property
    def sup(self) -> float:
        return float(max(np.max(self.values), self.right_value, self.left_limit))

    def is_monotone(self, tol: float = 1e-9) -> bool:
        v = np.concatenate(([self.left_limit], self.values, [self.right_value]))
        return bool(np.all(np.diff(v) >= -tol))

    def is_concave(self, tol: float = 1e-9) -> bool:
        """Chord test on consecutive grid triples (the origin counts as a point)."""
        g = np.concatenate(([0.0], self.grid))
        v = np.concatenate(([self.left_limit], self.values))
        if g.size >= 3:
            w = (g[1:-1] - g[:-2]) / (g[2:] - g[:-2])
            chord = (1 - w) * v[:-2] + w * v[2:]
            if np.any(v[1:-1] < chord - tol):
                return False
        # the flat right tail must not rise above the last segment's slope
        return bool(self.right_value <= v[-1] + tol)

    def rows(self):
        """(lambda, value) pairs, e.g. for CSV export."""
        return list(zip(self.grid.tolist(), self.values.tolist()))


def _phi_interval(a, b):
    """P[a < Z < b] for standard normal Z, without cancellation in the upper tail."""
    return np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def _gaussian_weights(A: float, grid: np.ndarray, lam: np.ndarray):
    """Dense weights so that E0[c(lam*l)] = W @ values + wl*left + wr*right.

    On segment [g_i, g_{i+1}] the curve is v_i + (v_{i+1}-v_i)(y-g_i)/dg; with
    Y = lam*l lognormal, P0[Y in seg] and E0[Y; seg] are normal CDF
    differences at z = (log(g/lam) + A^2/2)/A and z - A.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    G = grid.size
    W = np.zeros((lam.size, G))
    wl = np.empty(lam.size)
    wr = np.empty(lam.size)
    logg = np.log(grid)
    dg = np.diff(grid)
    rows = max(1, _BLOCK // G)
    for s in range(0, lam.size, rows):
        lm = lam[s : s + rows, None]
        z = (logg[None, :] - np.log(lm) + 0.5 * A * A) / A
        zl = z[:, :-1]
        zr = z[:, 1:]
        p = _phi_interval(zl, zr)
        q = lm * _phi_interval(zl - A, zr - A)
        # E0[(Y - g_i); seg] >= 0 up to rounding
        right_w = np.clip((q - grid[None, :-1] * p) / dg[None, :], 0.0, p)
        blk = W[s : s + rows]
        blk[:, :-1] += p - right_w
        blk[:, 1:] += right_w
        qL = lm[:, 0] * ndtr(z[:, 0] - A)
        first = np.clip(qL / grid[0], 0.0, ndtr(z[:, 0]))
        blk[:, 0] += first
        wl[s : s + rows] = ndtr(z[:, 0]) - first
        wr[s : s + rows] = ndtr(-z[:, -1])
    return W, wl, wr


def _coarse_keep(grid: np.ndarray, kinks) -> np.ndarray:
    """Mask of the coarse grid: every other non-kink point, the last point and the kinks."""
    kink = np.zeros(grid.size, dtype=bool)
    k = np.asarray(kinks, dtype=float).ravel()
    if k.size:
        pos = np.searchsorted(grid, k)
        for off in (-1, 0):
            j = np.clip(pos + off, 0, grid.size - 1)
            hit = np.abs(grid[j] - k) <= 1e-12 * k
            kink[j[hit]] = True
    plain = np.flatnonzero(~kink)
    keep = kink.copy()
    keep[plain[::2]] = True
    keep[-1] = True
    return keep


def _gaussian_weights_extrap(A: float, grid: np.ndarray, lam, kinks=()):
    W, wl, wr = _gaussian_weights(A, grid, lam)
    if grid.size < 5:
        return W, wl, wr
    keep = _coarse_keep(grid, kinks)
    W2, wl2, wr2 = _gaussian_weights(A, grid[keep], lam)
    W *= 4.0 / 3.0
    W[:, keep] -= W2 / 3.0
    return W, (4 * wl - wl2) / 3, (4 * wr - wr2) / 3


def _discrete_weights(model, grid: np.ndarray, lam: np.ndarray):
    """Sparse interpolation weights of the exact sum over the support."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    G = grid.size
    n = lam.size
    rows, cols, vals = [], [], []
    wl = np.zeros(n)
    wr = np.zeros(n)
    ridx = np.arange(n)
    for lv, p in zip(model.support_llr, model.support_probs(0)):
        y = lam * math.exp(lv)
        j = np.searchsorted(grid, y, side="right") - 1
        below = j < 0
        above = j >= G - 1
        inside = ~(below | above)
        # exact hit on the last grid point counts as inside with full weight
        last = above & (y == grid[-1])
        jj = j[inside]
        t = (y[inside] - grid[jj]) / (grid[jj + 1] - grid[jj])
        rows += [ridx[inside], ridx[inside]]
        cols += [jj, jj + 1]
        vals += [p * (1 - t), p * t]
        tb = y[below] / grid[0]
        rows.append(ridx[below])
        cols.append(np.zeros(tb.size, dtype=int))
        vals.append(p * tb)
        wl[below] += p * (1 - tb)
        rows.append(ridx[last])
        cols.append(np.full(int(last.sum()), G - 1))
        vals.append(np.full(int(last.sum()), p))
        wr[above & ~last] += p
    W = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, G)
    )
    return W, wl, wr


def expectation_weights(model: HypothesisPair, grid: np.ndarray, lam, kinks=()):
    """Linear map from curve values on ``grid`` to ``E0[curve(lam*l)]``.

    Returns ``(W, wl, wr)``; ``W`` is dense for the Gaussian pair and sparse
    for discrete models.
    """
    grid = np.asarray(grid, dtype=float)
    if isinstance(model, GaussianShift):
        return _gaussian_weights_extrap(model.A, grid, lam, kinks)
    if model.is_discrete:
        return _discrete_weights(model, grid, lam)
    raise TypeError(f"unsupported model {model!r}")


def expect_h0(model: HypothesisPair, curve: ValueCurve, lam):
    """``E0[curve(lam * l)]``, clamped to ``[curve(0+), sup curve]``."""
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise ValueError("lambda must be positive")
    flat = np.atleast_1d(lam_arr).ravel()
    if model.is_discrete:
        out = np.zeros(flat.size)
        for lv, p in zip(model.support_llr, model.support_probs(0)):
            out += p * curve.eval(flat * math.exp(lv))
    else:
        W, wl, wr = expectation_weights(model, curve.grid, flat, curve.kinks)
        out = W @ curve.values + wl * curve.left_limit + wr * curve.right_value
    out = np.clip(out, min(curve.left_limit, curve.sup), curve.sup)
    out = out.reshape(lam_arr.shape)
    return float(out) if out.ndim == 0 else out


def find_crossing(
    f: Callable[[float], float],
    level: float,
    bracket: tuple[float, float],
    max_iter: int = 200,
) -> float:
    """First ``lam`` in ``bracket`` with ``f(lam) >= level``, by bisection on log lambda.

    Requires ``f(lo) < level <= f(hi)``.  On a flat stretch where ``f`` equals
    the level the left end is returned.
    """
    lo, hi = map(float, bracket)
    if not (0 < lo < hi):
        raise ValueError("bracket must satisfy 0 < lo < hi")
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo < level <= f_hi):
        raise NoCrossingError(lo, hi, f_lo, f_hi, level)
    a, b = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        if f(math.exp(m)) >= level:
            b = m
        else:
            a = m
        if b - a <= 1e-15 * max(1.0, abs(b)):
            break
    return math.exp(b)


_BASE_CACHE: dict = {}


def _key(x: np.ndarray):
    return (x.size, float(x[0]), float(x[-1]), hash(x.tobytes()))


def _base_weights(A: float, rows: np.ndarray, cols: np.ndarray):
    key = (float(A), _key(rows), _key(cols))
    hit = _BASE_CACHE.get(key)
    if hit is None:
        if len(_BASE_CACHE) >= 8:
            _BASE_CACHE.pop(next(iter(_BASE_CACHE)))
        hit = _gaussian_weights(A, cols, rows)
        _BASE_CACHE[key] = hit
    return hit


def _positions(outer: np.ndarray, inner: np.ndarray):
    """Indices of ``inner`` in ``outer``, or None if not contained."""
    idx = np.searchsorted(outer, inner)
    if np.any(idx >= outer.size) or np.any(outer[np.minimum(idx, outer.size - 1)] != inner):
        return None
    return idx


class _SplitOp:
    """Linear-interpolation Gaussian expectation from values on ``cols`` to targets ``rows``.

    ``brows``/``bcols`` are cached base subsets; inserted columns enter as
    tent corrections on the base rows and inserted rows get direct weights.
    """

    def __init__(self, A, rows, brows, cols, bcols):
        self.n = rows.size
        self.iBr = _positions(rows, brows)
        self.iBc = _positions(cols, bcols)
        self.WB = _base_weights(A, brows, bcols)
        mask = np.ones(rows.size, dtype=bool)
        mask[self.iBr] = False
        self.iKr = np.flatnonzero(mask)
        self.WK = _gaussian_weights(A, cols, rows[self.iKr]) if self.iKr.size else None
        mask = np.ones(cols.size, dtype=bool)
        mask[self.iBc] = False
        self.iKc = np.flatnonzero(mask)
        K = cols[self.iKc]
        a = np.searchsorted(bcols, K) - 1
        if np.any(a < 0) or np.any(a >= bcols.size - 1):
            raise ValueError("inserted points must lie strictly inside the base grid")
        self.a = a
        self.t = (K - bcols[a]) / (bcols[a + 1] - bcols[a])
        self.H = np.empty((K.size, brows.size))
        for n, idx in enumerate(self.iKc):
            Wm, _, _ = _gaussian_weights(A, cols[idx - 1 : idx + 2], brows)
            self.H[n] = Wm[:, 1]

    def __call__(self, values, left, right):
        WB, wlB, wrB = self.WB
        vB = values[self.iBc]
        out = np.empty(self.n)
        base_part = WB @ vB + wlB * left + wrB * right
        if self.iKc.size:
            e = values[self.iKc] - ((1 - self.t) * vB[self.a] + self.t * vB[self.a + 1])
            base_part = base_part + e @ self.H
        if self.iKr.size:
            WK, wlK, wrK = self.WK
            out[self.iKr] = WK @ values + wlK * left + wrK * right
        out[self.iBr] = base_part
        return out


class GridExpectation:
    """``E0[f(lam*l)]`` at every point of a fixed grid, as a linear map of ``f``'s values.

    For the Gaussian pair the grid is a base grid (whose dense weights are
    cached) plus a few inserted points, which are treated as kinks.  The
    result matches :func:`expect_h0` on a curve whose ``kinks`` are the
    inserted points.
    """

    def __init__(self, model: HypothesisPair, grid: np.ndarray, base: np.ndarray | None = None):
        self.grid = np.asarray(grid, dtype=float)
        self._discrete = model.is_discrete
        if self._discrete:
            self._W, self._wl, self._wr = _discrete_weights(model, self.grid, self.grid)
            return
        A = model.A
        base = self.grid if base is None else np.asarray(base, dtype=float)
        iB = _positions(self.grid, base)
        if iB is None:
            base, iB = self.grid, np.arange(self.grid.size)
        self._ops = [_SplitOp(A, self.grid, base, self.grid, base)]
        if self.grid.size >= 5:
            inserted = np.ones(self.grid.size, dtype=bool)
            inserted[iB] = False
            keep = _coarse_keep(self.grid, self.grid[inserted])
            bkeep = keep[iB]
            self._keep = keep
            self._ops.append(_SplitOp(A, self.grid, base, self.grid[keep], base[bkeep]))

    def __call__(self, values: np.ndarray, left: float, right: float) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self._discrete:
            return self._W @ values + self._wl * left + self._wr * right
        fine = self._ops[0](values, left, right)
        if len(self._ops) == 1:
            return fine
        coarse = self._ops[1](values[self._keep], left, right)
        return (4 * fine - coarse) / 3
