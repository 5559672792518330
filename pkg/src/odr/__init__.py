"""Opportunistic detection rules: Bayes-optimal sequential tests that may stop
early only to declare H1, with fixed or geometric maximum sample sizes."""

from .model import Bernoulli, FiniteDiscrete, GaussianShift, Hypothesis, chernoff_info
from .fixed_horizon import CostSpec, ThresholdSchedule, backward_recursion, run_policy, bayes_cost
from .geometric_horizon import GeoPolicy, GeoSpec, solve_geo, value_iteration, geo_bayes_cost
from .evaluate import exact_eval, brute_force_optimum, mc_eval, slope_check

__all__ = [
    "Bernoulli",
    "FiniteDiscrete",
    "GaussianShift",
    "Hypothesis",
    "chernoff_info",
    "CostSpec",
    "ThresholdSchedule",
    "backward_recursion",
    "run_policy",
    "bayes_cost",
    "GeoPolicy",
    "GeoSpec",
    "solve_geo",
    "value_iteration",
    "geo_bayes_cost",
    "exact_eval",
    "brute_force_optimum",
    "mc_eval",
    "slope_check",
]

__version__ = "0.1.0"
