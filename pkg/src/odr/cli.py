"""``odr`` command line.

Commands: thresholds, geo, region, simulate, verify.  Exit status is 0 on
success, 1 when a check or computation fails, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import asymptotics as asy
from . import evaluate as ev
from .curve import DEFAULT_HI, DEFAULT_LO, DEFAULT_POINTS
from .fixed_horizon import CostError, CostSpec, ThresholdSchedule, backward_recursion
from .geometric_horizon import GeoPolicy, solve_geo
from .model import Bernoulli, GaussianShift, HypothesisPair, ModelError, chernoff_info, model_from_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.12g}"


def write_csv(header, rows, out):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    _emit(buf.getvalue(), out)


def write_json(obj, out):
    _emit(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", out)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    model: HypothesisPair | None = None
    costs: CostSpec | None = None
    horizon: tuple | None = None  # ("fixed", N) or ("geometric", eps)
    grid: dict = field(default_factory=dict)
    seed: int | None = None
    policy: dict | None = None
    eta: float | None = None
    raw: dict = field(default_factory=dict)

    def require(self, *names):
        for n in names:
            if getattr(self, n) is None:
                raise ConfigError(n, "required for this command")

    def grid_kw(self) -> dict:
        return {
            "grid_points": self.grid.get("points", DEFAULT_POINTS),
            "grid_lo": self.grid.get("lo", DEFAULT_LO),
            "grid_hi": self.grid.get("hi", DEFAULT_HI),
        }


def _num(block, key, path, kind=float, required=True):
    if key not in block:
        if required:
            raise ConfigError(f"{path}.{key}", "missing")
        return None
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
        return int(v)
    return float(v)


def parse_config(cfg: dict) -> RunConfig:
    if not isinstance(cfg, dict):
        raise ConfigError("$", "config must be a JSON object")
    rc = RunConfig(raw=cfg)
    if "model" in cfg:
        if not isinstance(cfg["model"], dict):
            raise ConfigError("model", "expected an object")
        try:
            rc.model = model_from_config(cfg["model"])
        except (ModelError, TypeError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from None
    if "costs" in cfg:
        b = cfg["costs"]
        if not isinstance(b, dict):
            raise ConfigError("costs", "expected an object")
        vals = {k: _num(b, k, "costs") for k in ("pi", "c0", "c1", "c")}
        try:
            rc.costs = CostSpec(**vals)
        except CostError as exc:
            raise ConfigError("costs", str(exc)) from None
    if "horizon" in cfg:
        h = cfg["horizon"]
        if not isinstance(h, dict) or len(h) != 1 or next(iter(h)) not in ("fixed", "geometric"):
            raise ConfigError("horizon", 'expected exactly one of {"fixed": N} or {"geometric": eps}')
        if "fixed" in h:
            N = _num(h, "fixed", "horizon", int)
            if N < 1:
                raise ConfigError("horizon.fixed", "N must be >= 1")
            rc.horizon = ("fixed", N)
        else:
            eps = _num(h, "geometric", "horizon")
            if not (0 < eps < 1):
                raise ConfigError("horizon.geometric", "eps must lie in (0, 1)")
            rc.horizon = ("geometric", eps)
    if "grid" in cfg:
        g = cfg["grid"]
        if not isinstance(g, dict):
            raise ConfigError("grid", "expected an object")
        unknown = set(g) - {"points", "lo", "hi"}
        if unknown:
            raise ConfigError(f"grid.{sorted(unknown)[0]}", "unknown field")
        if "points" in g:
            rc.grid["points"] = _num(g, "points", "grid", int)
            if rc.grid["points"] < 3:
                raise ConfigError("grid.points", "need at least 3 points")
        for k in ("lo", "hi"):
            if k in g:
                rc.grid[k] = _num(g, k, "grid")
                if rc.grid[k] <= 0:
                    raise ConfigError(f"grid.{k}", "must be > 0")
        if rc.grid.get("lo", DEFAULT_LO) >= rc.grid.get("hi", DEFAULT_HI):
            raise ConfigError("grid", "lo must be below hi")
    if "seed" in cfg:
        rc.seed = _num(cfg, "seed", "$", int)
    if "policy" in cfg:
        if not isinstance(cfg["policy"], dict) or "kind" not in cfg["policy"]:
            raise ConfigError("policy", 'expected an object with a "kind" field')
        rc.policy = cfg["policy"]
    if "eta" in cfg:
        rc.eta = _num(cfg, "eta", "$")
        if not (0 <= rc.eta <= 1):
            raise ConfigError("eta", "must lie in [0, 1]")
    return rc


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return parse_config(cfg)


def parse_sweep(text: str):
    """``"c0=c1:0.2:16:40"`` -> (("c0", "c1"), values)."""
    try:
        names, lo, hi, n = text.split(":")
        names = tuple(names.split("="))
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise ConfigError("--sweep", f"expected NAME[=NAME]:LO:HI:COUNT, got {text!r}") from None
    for nm in names:
        if nm not in ("pi", "c0", "c1", "c"):
            raise ConfigError("--sweep", f"unknown cost field {nm!r}")
    if n < 1:
        raise ConfigError("--sweep", "COUNT must be >= 1")
    return names, np.linspace(lo, hi, n)


# ---------------------------------------------------------------- commands


def _fixed_schedule(rc: RunConfig) -> ThresholdSchedule:
    return backward_recursion(rc.model, rc.costs, rc.horizon[1], **rc.grid_kw())


def _geo_policy(rc: RunConfig, costs=None) -> GeoPolicy:
    return solve_geo(rc.model, costs or rc.costs, rc.horizon[1], **rc.grid_kw())


def cmd_thresholds(args) -> int:
    rc = load_config(args.config)
    rc.require("model", "costs", "horizon")
    if rc.horizon[0] == "fixed":
        if args.sweep:
            raise ConfigError("--sweep", "sweeps are only supported for the geometric horizon")
        s = _fixed_schedule(rc)
        write_csv(["n", "tau"], [(n, t) for n, t in enumerate(s.taus, start=1)], args.out)
        return EXIT_OK
    if args.sweep:
        names, values = parse_sweep(args.sweep)
        rows = []
        base = {k: getattr(rc.costs, k) for k in ("pi", "c0", "c1", "c")}
        for v in values:
            kw = dict(base)
            kw.update({nm: float(v) for nm in names})
            try:
                costs = CostSpec(**kw)
            except CostError as exc:
                raise ConfigError("--sweep", str(exc)) from None
            p = _geo_policy(rc, costs)
            rows.append((costs.c0, costs.c1, p.tau_r, p.tau_t))
        write_csv(["c0", "c1", "tau_r", "tau_t"], rows, args.out)
        return EXIT_OK
    write_json(_geo_policy(rc).to_dict(), args.out)
    return EXIT_OK


def cmd_geo(args) -> int:
    rc = load_config(args.config)
    rc.require("model", "costs", "horizon")
    if rc.horizon[0] != "geometric":
        raise ConfigError("horizon", 'the geo command needs {"geometric": eps}')
    p = _geo_policy(rc)
    write_json(p.to_dict(), args.out)
    if args.curve_out:
        write_csv(["lambda", "V"], p.V.rows(), args.curve_out)
    return EXIT_OK


def cmd_region(args) -> int:
    rc = load_config(args.config)
    rc.require("model")
    eta = args.eta if args.eta is not None else (rc.eta if rc.eta is not None else 1.0)
    if not (0 <= eta <= 1):
        raise ConfigError("--eta", "must lie in [0, 1]")
    if args.nu_grid < 2:
        raise ConfigError("--nu-grid", "need at least 2 points")
    scale = 1.0
    if args.normalized:
        if not isinstance(rc.model, GaussianShift):
            raise ConfigError("--normalized", "only defined for the Gaussian model")
        scale = rc.model.A**2 / 2
    nus = np.linspace(0, 1, args.nu_grid)
    rows = [
        (nu, p.delta_fa / scale, p.delta_m / scale, p.eta, p.fa_sup / scale)
        for nu, p in zip(nus, asy.region_table(rc.model, nus, eta))
    ]
    write_csv(["nu", "delta_fa", "delta_m", "eta", "fa_sup"], rows, args.out)
    return EXIT_OK


def build_policy(rc: RunConfig):
    """Policy named by the config, or the optimal one for its horizon."""
    block = rc.policy
    horizon = rc.horizon
    if block is None:
        rc.require("costs")
        return _fixed_schedule(rc) if horizon[0] == "fixed" else _geo_policy(rc)
    kind = block["kind"]
    N = horizon[1] if horizon[0] == "fixed" else None

    def need_fixed():
        if N is None:
            raise ConfigError("policy.kind", f"{kind!r} needs a fixed horizon")

    try:
        if kind == "thresholds":
            need_fixed()
            taus = block.get("taus")
            if not isinstance(taus, list) or len(taus) != N:
                raise ConfigError("policy.taus", f"expected a list of {N} thresholds")
            return ThresholdSchedule.from_taus([math.inf if t is None else float(t) for t in taus])
        if kind == "stein":
            need_fixed()
            return asy.stein_design(rc.model, N, _num(block, "eps", "policy"), _num(block, "delta", "policy")).schedule()
        if kind == "two_stage":
            need_fixed()
            d = asy.design_two_stage(
                rc.model, N, *(_num(block, k, "policy") for k in ("eta", "mu", "nu"))
            )
            return d.schedule()
        if kind == "ospr":
            need_fixed()
            return asy.truncated_ospr_policy(_num(block, "B", "policy"), N)
        if kind == "geo":
            if horizon[0] != "geometric":
                raise ConfigError("policy.kind", "'geo' needs a geometric horizon")
            return GeoPolicy(_num(block, "tau_r", "policy"), _num(block, "tau_t", "policy"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("policy", str(exc)) from None
    raise ConfigError("policy.kind", f"unknown policy kind {kind!r}")


def cmd_simulate(args) -> int:
    rc = load_config(args.config)
    rc.require("model", "horizon")
    seed = args.seed if args.seed is not None else rc.seed
    if seed is None:
        raise ConfigError("seed", "required for stochastic commands")
    trials = int(float(args.trials))
    if trials < 1:
        raise ConfigError("--trials", "must be >= 1")
    policy = build_policy(rc)
    eps = rc.horizon[1] if rc.horizon[0] == "geometric" else None
    rep = ev.mc_eval(policy, rc.model, rc.costs, trials, args.estimator, seed=seed, eps=eps)
    out: dict[str, Any] = {"monte_carlo": rep.as_dict(), "seed": seed}
    if args.exact:
        out["exact"] = ev.exact_eval(policy, rc.model, rc.costs, eps=eps).as_dict()
    write_json(out, args.out)
    return EXIT_OK


# ------------------------------------------------------------------ suites

ORACLE_COSTS = (CostSpec(0.5, 5.0, 5.0, 0.2), CostSpec(0.3, 2.0, 8.0, 0.05), CostSpec(0.6, 10.0, 3.0, 0.4))


def suite_small_oracle(tol: float = 1e-10) -> dict:
    """Backward recursion against brute-force enumeration on small Bernoulli cases."""
    cases = []
    for q0 in (0.2, 0.3, 0.4):
        for q1 in (0.6, 0.7, 0.8):
            m = Bernoulli(q0, q1)
            for N in (2, 3):
                for ci, costs in enumerate(ORACLE_COSTS):
                    s = backward_recursion(m, costs, N)
                    got = ev.exact_eval(s, m, costs).cost
                    best, _ = ev.brute_force_optimum(m, costs, N)
                    cases.append({
                        "q0": q0, "q1": q1, "N": N, "costs": ci,
                        "recursion": got, "oracle": best, "gap": got - best,
                        "pass": abs(got - best) <= tol,
                    })
    return {"suite": "small-oracle", "cases": cases, "pass": all(c["pass"] for c in cases)}


def suite_gaussian_region(A: float = 1.0) -> dict:
    """Closed-form Gaussian facts of the exponent region."""
    g = GaussianShift(A)
    half = A * A / 2
    checks = []
    worst = 0.0
    for nu in np.linspace(0, 1, 50):
        p = asy.boundary_point(g, float(nu), 1.0)
        worst = max(worst, abs(math.sqrt(p.fa_sup / half) + math.sqrt(p.delta_m / half) - 1.0))
    checks.append({"name": "sqrt_x_plus_sqrt_y", "value": worst, "pass": worst <= 1e-6})
    stein = asy.boundary_point(g, 1.0, 1.0).delta_m
    checks.append({"name": "stein_point", "value": stein, "pass": abs(stein - half) <= 1e-6})
    eta = 0.3
    nu = asy.nu_star(g, eta)
    corner = asy.boundary_point(g, nu, eta)
    checks.append({
        "name": "corner", "value": corner.delta_fa - eta * g.d1,
        "pass": abs(corner.delta_fa - eta * g.d1) <= 1e-8 and abs(corner.fa_sup - eta * g.d1) <= 1e-8,
    })
    C = chernoff_info(g)
    checks.append({"name": "chernoff", "value": C, "pass": abs(C - A**2 / 8) <= 1e-6})
    e_min = asy.chernoff_operating_eta(g)
    e_bis = asy.min_eta_by_bisection(g, C, C)
    checks.append({"name": "operating_eta", "value": e_min, "pass": abs(e_min - 0.25) <= 1e-6 and abs(e_bis - e_min) <= 1e-4})
    return {"suite": "gaussian-region", "checks": checks, "pass": all(c["pass"] for c in checks)}


SUITES = {"small-oracle": suite_small_oracle, "gaussian-region": suite_gaussian_region}


def cmd_verify(args) -> int:
    if args.suite not in SUITES:
        print(f"odr verify: unknown suite {args.suite!r}; choose from {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    report = SUITES[args.suite]()
    write_json(report, args.out)
    return EXIT_OK if report["pass"] else EXIT_FAIL


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="odr", description="Opportunistic detection rules.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("thresholds", help="threshold schedule (fixed) or running threshold (geometric)")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--sweep", help="geometric only, e.g. c0=c1:0.2:16:40")
    p.set_defaults(fn=cmd_thresholds)

    p = sub.add_parser("geo", help="geometric-horizon policy")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--curve-out", help="CSV of the value curve V")
    p.set_defaults(fn=cmd_geo)

    p = sub.add_parser("region", help="exponent-region boundary over a nu grid")
    p.add_argument("--config", required=True)
    p.add_argument("--nu-grid", type=int, default=50)
    p.add_argument("--eta", type=float)
    p.add_argument("--normalized", action="store_true", help="divide exponents by A^2/2 (Gaussian)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_region)

    p = sub.add_parser("simulate", help="Monte Carlo evaluation of a policy")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", default="100000")
    p.add_argument("--estimator", choices=["direct", "cm", "change_of_measure"], default="direct")
    p.add_argument("--seed", type=int)
    p.add_argument("--exact", action="store_true", help="also report exact values (discrete models)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="run a built-in check suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"odr {args.command}: config error at {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, TypeError) as exc:
        print(f"odr {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
