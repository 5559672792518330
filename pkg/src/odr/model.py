"""Simple-vs-simple hypothesis pairs.

Three kinds are supported: a unit-variance Gaussian mean shift, a Bernoulli
pair and a general finite alphabet pair.  The discrete kinds expose their
support so that every expectation can be written as an exact finite sum.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import optimize
from scipy.special import logsumexp


class Hypothesis(enum.IntEnum):
    H0 = 0
    H1 = 1


class Direction(enum.Enum):
    """KL direction: ``d0 = D(p0||p1)`` and ``d1 = D(p1||p0)``."""

    D0 = "d0"
    D1 = "d1"


class ModelError(ValueError):
    pass


def _as_hypothesis(h) -> Hypothesis:
    if isinstance(h, Hypothesis):
        return h
    if isinstance(h, str):
        return Hypothesis[h.upper()]
    return Hypothesis(int(h))


class HypothesisPair:
    """Common interface; concrete kinds below."""

    kind: str = ""
    is_discrete: bool = False

    def llr(self, x):
        raise NotImplementedError

    def sample(self, hypothesis, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def log_mgf(self, under, alpha: float) -> float:
        raise NotImplementedError

    def kl(self, direction) -> float:
        d = Direction(direction) if not isinstance(direction, Direction) else direction
        # d0 = -E0[llr], d1 = E1[llr]
        if d is Direction.D0:
            return max(-self.mean_llr(Hypothesis.H0), 0.0)
        return max(self.mean_llr(Hypothesis.H1), 0.0)

    def mean_llr(self, under) -> float:
        raise NotImplementedError

    @property
    def d0(self) -> float:
        return self.kl(Direction.D0)

    @property
    def d1(self) -> float:
        return self.kl(Direction.D1)

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianShift(HypothesisPair):
    """p0 = N(0, 1) against p1 = N(A, 1)."""

    A: float
    kind: str = field(default="gaussian", init=False, repr=False)
    is_discrete: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.A) and self.A > 0):
            raise ModelError(f"GaussianShift needs A > 0, got {self.A!r}")

    def llr(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ModelError("observation outside the support of the Gaussian pair")
        out = self.A * x - 0.5 * self.A**2
        return float(out) if out.ndim == 0 else out

    def sample(self, hypothesis, rng, size=None):
        mean = self.A if _as_hypothesis(hypothesis) is Hypothesis.H1 else 0.0
        return rng.normal(mean, 1.0, size=size)

    def log_mgf(self, under, alpha):
        # llr ~ N(-A^2/2, A^2) under H0 and N(+A^2/2, A^2) under H1
        a2 = self.A**2
        if _as_hypothesis(under) is Hypothesis.H0:
            return 0.5 * alpha * (alpha - 1.0) * a2
        return 0.5 * alpha * (alpha + 1.0) * a2

    def mean_llr(self, under):
        a2 = self.A**2
        return -0.5 * a2 if _as_hypothesis(under) is Hypothesis.H0 else 0.5 * a2

    def llr_moments(self, under) -> tuple[float, float]:
        """Mean and standard deviation of the per-sample llr."""
        return self.mean_llr(under), self.A

    def to_config(self):
        return {"kind": "gaussian", "A": self.A}


class _Discrete(HypothesisPair):
    is_discrete = True

    # set by subclasses in __post_init__
    p0: np.ndarray
    p1: np.ndarray

    def _init_support(self, p0, p1):
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        if p0.shape != p1.shape or p0.ndim != 1 or p0.size < 1:
            raise ModelError("p0 and p1 must be 1-D vectors of equal length")
        for name, p in (("p0", p0), ("p1", p1)):
            if np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ModelError(f"{name} has negative or non-finite entries")
            if abs(math.fsum(p) - 1.0) > 1e-12:
                raise ModelError(f"{name} sums to {math.fsum(p)!r}, not 1")
        if np.any((p0 > 0) != (p1 > 0)):
            raise ModelError("p0 and p1 must be mutually absolutely continuous")
        support = np.flatnonzero(p0 > 0)
        object.__setattr__(self, "_support", support)
        object.__setattr__(self, "_w0", p0[support])
        object.__setattr__(self, "_w1", p1[support])
        object.__setattr__(self, "_llr", np.log(p1[support]) - np.log(p0[support]))

    @property
    def support(self) -> np.ndarray:
        """Symbols carrying positive probability."""
        return self._support

    @property
    def support_llr(self) -> np.ndarray:
        return self._llr

    def support_probs(self, under) -> np.ndarray:
        return self._w1 if _as_hypothesis(under) is Hypothesis.H1 else self._w0

    def llr(self, x):
        x = np.asarray(x)
        idx = np.searchsorted(self._support, x)
        idx_c = np.clip(idx, 0, self._support.size - 1)
        if np.any(self._support[idx_c] != x):
            raise ModelError(f"observation {x!r} outside the support")
        out = self._llr[idx_c]
        return float(out) if out.ndim == 0 else out

    def sample(self, hypothesis, rng, size=None):
        w = self.support_probs(hypothesis)
        return rng.choice(self._support, size=size, p=w)

    def log_mgf(self, under, alpha):
        w = self.support_probs(under)
        return float(logsumexp(alpha * self._llr, b=w))

    def mean_llr(self, under):
        w = self.support_probs(under)
        return math.fsum(w * self._llr)


@dataclass(frozen=True, eq=False)
class Bernoulli(_Discrete):
    """Observations in {0, 1} with P[x = 1] = q0 under H0 and q1 under H1."""

    q0: float
    q1: float
    kind: str = field(default="bernoulli", init=False, repr=False)

    def __post_init__(self):
        if not (0 < self.q0 < 1 and 0 < self.q1 < 1):
            raise ModelError(f"Bernoulli needs 0 < q0, q1 < 1, got {self.q0}, {self.q1}")
        if self.q0 == self.q1:
            raise ModelError("Bernoulli needs q0 != q1")
        self._init_support([1 - self.q0, self.q0], [1 - self.q1, self.q1])

    @property
    def p0(self):
        return np.array([1 - self.q0, self.q0])

    @property
    def p1(self):
        return np.array([1 - self.q1, self.q1])

    def to_config(self):
        return {"kind": "bernoulli", "q0": self.q0, "q1": self.q1}


@dataclass(frozen=True, eq=False)
class FiniteDiscrete(_Discrete):
    """Arbitrary pair of pmfs on the alphabet {0, ..., K-1}."""

    p0: tuple
    p1: tuple
    kind: str = field(default="discrete", init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "p0", tuple(float(v) for v in self.p0))
        object.__setattr__(self, "p1", tuple(float(v) for v in self.p1))
        self._init_support(self.p0, self.p1)

    @property
    def alphabet_size(self) -> int:
        return len(self.p0)

    def to_config(self):
        return {"kind": "discrete", "p0": list(self.p0), "p1": list(self.p1)}


def llr(model: HypothesisPair, x):
    return model.llr(x)


def sample(model: HypothesisPair, hypothesis, rng, size=None):
    return model.sample(hypothesis, rng, size=size)


def kl(model: HypothesisPair, direction) -> float:
    return model.kl(direction)


def log_mgf(model: HypothesisPair, under, alpha: float) -> float:
    return model.log_mgf(under, alpha)


def chernoff_info(model: HypothesisPair) -> float:
    """Chernoff information ``-min_{s in [0,1]} log E0[exp(s * llr)]``.

    ``log E0[exp(s*llr)]`` is convex in ``s`` and vanishes at both ends, so
    a bounded scalar minimisation on [0, 1] is enough.
    """
    res = optimize.minimize_scalar(
        lambda s: model.log_mgf(Hypothesis.H0, s),
        bounds=(0.0, 1.0),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return max(-float(res.fun), 0.0)


def model_from_config(cfg: Mapping[str, Any]) -> HypothesisPair:
    """Build a model from its JSON block, e.g. ``{"kind": "gaussian", "A": 1.0}``."""
    kind = cfg.get("kind")
    try:
        if kind == "gaussian":
            return GaussianShift(float(cfg["A"]))
        if kind == "bernoulli":
            return Bernoulli(float(cfg["q0"]), float(cfg["q1"]))
        if kind == "discrete":
            return FiniteDiscrete(tuple(cfg["p0"]), tuple(cfg["p1"]))
    except KeyError as exc:
        raise ModelError(f"model block missing field {exc.args[0]!r}") from None
    raise ModelError(f"unknown model kind {kind!r}")
