import csv
import json
import math
import os
import subprocess
import sys

import pytest

from odr.cli import ConfigError, main, parse_config, parse_sweep

GAUSS_FIXED = {
    "model": {"kind": "gaussian", "A": 1.0},
    "costs": {"pi": 0.5, "c0": 10, "c1": 10, "c": 1},
    "horizon": {"fixed": 50},
}
BERN_GEO = {
    "model": {"kind": "bernoulli", "q0": 0.3, "q1": 0.7},
    "costs": {"pi": 0.5, "c0": 5, "c1": 5, "c": 0.2},
    "horizon": {"geometric": 0.1},
    "seed": 7,
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestThresholds:
    def test_fifty_sample_gaussian_rows(self, tmp_path):
        out = tmp_path / "taus.csv"
        assert main(["thresholds", "--config", write(tmp_path, GAUSS_FIXED), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["n", "tau"]
        assert len(rows) == 51
        assert rows[-1] == ["50", "1"]
        # 12 significant digits
        assert len(rows[1][1].replace(".", "").lstrip("0")) <= 12

    def test_single_sample(self, tmp_path):
        cfg = dict(GAUSS_FIXED, costs={"pi": 0.25, "c0": 3, "c1": 2, "c": 1}, horizon={"fixed": 1})
        out = tmp_path / "t.csv"
        assert main(["thresholds", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
        assert read_csv(out) == [["n", "tau"], ["1", "4.5"]]

    def test_geometric_json(self, tmp_path):
        out = tmp_path / "p.json"
        assert main(["thresholds", "--config", write(tmp_path, BERN_GEO), "--out", str(out)]) == 0
        d = json.loads(out.read_text())
        assert d["tau_t"] == 1.0 and d["tau_r"] > 0

    def test_sweep(self, tmp_path):
        cfg = dict(GAUSS_FIXED, horizon={"geometric": 0.05})
        out = tmp_path / "sweep.csv"
        assert main(["thresholds", "--config", write(tmp_path, cfg), "--sweep", "c0=c1:0.2:16:8", "--out", str(out)]) == 0
        rows = read_csv(out)[1:]
        assert len(rows) == 8
        tau_r = [float(r[2]) for r in rows]
        assert all(b >= a for a, b in zip(tau_r, tau_r[1:]))
        assert tau_r[0] < 1 < tau_r[-1]

    def test_sweep_on_fixed_horizon(self, tmp_path, capsys):
        assert main(["thresholds", "--config", write(tmp_path, GAUSS_FIXED), "--sweep", "c0:1:2:3"]) == 2
        assert "--sweep" in capsys.readouterr().err


class TestGeo:
    def test_policy_and_curve(self, tmp_path):
        out, curve = tmp_path / "p.json", tmp_path / "V.csv"
        code = main(["geo", "--config", write(tmp_path, BERN_GEO), "--out", str(out), "--curve-out", str(curve)])
        assert code == 0
        d = json.loads(out.read_text())
        assert set(d) == {"tau_r", "tau_t", "iterations", "residual"}
        rows = read_csv(curve)
        assert rows[0] == ["lambda", "V"] and len(rows) > 2000

    def test_needs_geometric(self, tmp_path):
        assert main(["geo", "--config", write(tmp_path, GAUSS_FIXED)]) == 2


class TestRegion:
    def test_normalized_gaussian(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["region", "--config", write(tmp_path, GAUSS_FIXED), "--nu-grid", "50", "--normalized", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["nu", "delta_fa", "delta_m", "eta", "fa_sup"]
        assert len(rows) == 51
        for r in rows[1:]:
            x, y = float(r[1]), float(r[2])
            assert abs(math.sqrt(x) + math.sqrt(y) - 1) <= 1e-6

    def test_eta_zero(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["region", "--config", write(tmp_path, GAUSS_FIXED), "--eta", "0", "--out", str(out)]) == 0
        assert all(float(r[1]) == 0.0 for r in read_csv(out)[1:])

    def test_bernoulli_monotone(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["region", "--config", write(tmp_path, BERN_GEO), "--nu-grid", "30", "--out", str(out)]) == 0
        rows = read_csv(out)[1:]
        dm = [float(r[2]) for r in rows]
        fs = [float(r[4]) for r in rows]
        assert all(b >= a - 1e-9 for a, b in zip(dm, dm[1:]))
        assert all(b <= a + 1e-9 for a, b in zip(fs, fs[1:]))

    def test_normalized_needs_gaussian(self, tmp_path):
        assert main(["region", "--config", write(tmp_path, BERN_GEO), "--normalized"]) == 2


class TestSimulate:
    def test_with_exact(self, tmp_path):
        out = tmp_path / "rep.json"
        code = main(["simulate", "--config", write(tmp_path, BERN_GEO), "--trials", "2e4", "--exact", "--out", str(out)])
        assert code == 0
        d = json.loads(out.read_text())
        mc, ex = d["monte_carlo"], d["exact"]
        assert mc["n_trials"] == 20000 and d["seed"] == 7
        assert abs(mc["estimates"]["cost"] - ex["cost"]) <= 4 * mc["std_errors"]["cost"]

    @pytest.mark.parametrize(
        "policy",
        [
            {"kind": "thresholds", "taus": [None, None, 1.0]},
            {"kind": "stein", "eps": 0.34, "delta": 0.05},
            {"kind": "two_stage", "eta": 0.34, "mu": 0.1, "nu": 0.5},
            {"kind": "ospr", "B": 3.0},
        ],
    )
    def test_policy_kinds(self, tmp_path, policy):
        cfg = dict(BERN_GEO, horizon={"fixed": 3}, policy=policy)
        out = tmp_path / "rep.json"
        assert main(["simulate", "--config", write(tmp_path, cfg), "--trials", "1000", "--estimator", "cm", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["monte_carlo"]["estimator"] == "change_of_measure"

    def test_missing_seed(self, tmp_path):
        cfg = {k: v for k, v in BERN_GEO.items() if k != "seed"}
        assert main(["simulate", "--config", write(tmp_path, cfg)]) == 2

    def test_seed_flag(self, tmp_path):
        cfg = {k: v for k, v in BERN_GEO.items() if k != "seed"}
        out = tmp_path / "rep.json"
        assert main(["simulate", "--config", write(tmp_path, cfg), "--seed", "3", "--trials", "500", "--out", str(out)]) == 0

    def test_bad_policy(self, tmp_path):
        cfg = dict(BERN_GEO, policy={"kind": "stein", "eps": 0.1, "delta": 0.05})
        assert main(["simulate", "--config", write(tmp_path, cfg)]) == 2
        cfg = dict(BERN_GEO, horizon={"fixed": 3}, policy={"kind": "thresholds", "taus": [1.0]})
        assert main(["simulate", "--config", write(tmp_path, cfg)]) == 2

    def test_byte_identical_across_threads(self, tmp_path):
        cfg = write(tmp_path, dict(BERN_GEO, horizon={"fixed": 6}, policy={"kind": "ospr", "B": 4.0}))
        outs = []
        for threads in ("1", "3"):
            out = tmp_path / f"rep{threads}.json"
            env = dict(os.environ, ODR_THREADS=threads)
            subprocess.run(
                [sys.executable, "-m", "odr", "simulate", "--config", cfg, "--trials", "200000", "--exact", "--out", str(out)],
                check=True, env=env,
            )
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestVerify:
    @pytest.mark.parametrize("suite", ["small-oracle", "gaussian-region"])
    def test_suites_pass(self, tmp_path, suite):
        out = tmp_path / "v.json"
        assert main(["verify", "--suite", suite, "--out", str(out)]) == 0
        assert json.loads(out.read_text())["pass"] is True

    def test_unknown_suite(self, capsys):
        assert main(["verify", "--suite", "everything"]) == 2
        assert "unknown suite" in capsys.readouterr().err


class TestConfig:
    def test_field_paths(self):
        with pytest.raises(ConfigError, match=r"costs\.c1"):
            parse_config({"costs": {"pi": 0.5, "c0": 1, "c": 1}})
        with pytest.raises(ConfigError, match=r"horizon"):
            parse_config({"horizon": {"fixed": 5, "geometric": 0.1}})
        with pytest.raises(ConfigError, match=r"horizon\.geometric"):
            parse_config({"horizon": {"geometric": 1.5}})
        with pytest.raises(ConfigError, match=r"grid\.step"):
            parse_config({"grid": {"step": 2}})
        with pytest.raises(ConfigError, match="model"):
            parse_config({"model": {"kind": "poisson"}})

    def test_missing_file(self, tmp_path):
        assert main(["thresholds", "--config", str(tmp_path / "nope.json")]) == 2

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        assert main(["thresholds", "--config", str(p)]) == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["thresholds"])
        assert err.value.code == 2

    def test_sweep_parser(self):
        names, vals = parse_sweep("c0=c1:0.2:16:40")
        assert names == ("c0", "c1") and len(vals) == 40
        assert vals[0] == 0.2 and vals[-1] == 16
        with pytest.raises(ConfigError):
            parse_sweep("c9:1:2:3")
        with pytest.raises(ConfigError):
            parse_sweep("c0:1:2")
