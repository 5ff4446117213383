import json
import os

import numpy as np
import pytest

from relaxctl import cli
from relaxctl.config import ConfigError, build_problem, config_hash, dumps, validate
from relaxctl.dpp import backward_induction, build_transition

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")

# small settings per command so the determinism check stays quick
SMALL = {
    "solve": {"problem": {"builtin": "put-stop"}},
    "simulate": {"problem": {"builtin": "lq", "params": {"n_steps": 20}}, "n_paths": 300, "n_record": 3},
    "chatter": {"problem": {"builtin": "drift-bang"}, "n_paths": 200, "n_sub": [2, 4]},
    "martcheck": {"problem": {"builtin": "jump-lq", "params": {"n_steps": 20}}, "n_paths": 300, "n_testfns": 3},
    "select": {"problem": {"builtin": "tie"}},
    "compare": {"problem": {"builtin": "lq", "params": {"n_steps": 50}}, "n_paths": 500},
    "oracle": {"problem": {"builtin": "small-random"}},
}


def write_cfg(tmp_path, body, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"version": 1, **body}))
    return str(path)


def run(command, cfg_path, out, *extra):
    return cli.main([command, "--config", cfg_path, "--out", str(out), "--quiet", *extra])


def data_files(out):
    return {f: open(os.path.join(out, f), "rb").read() for f in sorted(os.listdir(out)) if f != "metadata.json"}


class TestConfig:
    def test_defaults_filled(self):
        cfg = validate({"version": 1, "problem": {"builtin": "lq"}})
        assert cfg["seed"] == 0 and cfg["tolerances"]["dpp"] == 1e-10

    @pytest.mark.parametrize("body, path", [
        ({"problem": {"builtin": "lq"}, "n_paths": -5}, "config.n_paths"),
        ({"problem": {"builtin": "lq", "params": {"n_steps": 0}}}, "config.problem.params.n_steps"),
        ({"problem": {"builtin": "lq"}, "tolerances": {"dpp": -1}}, "config.tolerances.dpp"),
        ({"problem": {"builtin": "nope"}}, "config.problem.builtin"),
        ({"problem": {"builtin": "lq"}, "n_sub": [2, 0]}, "config.n_sub[1]"),
    ])
    def test_field_paths(self, body, path):
        with pytest.raises(ConfigError) as exc:
            validate({"version": 1, **body})
        assert exc.value.path == path

    def test_version_required(self):
        with pytest.raises(ConfigError):
            validate({"version": 2, "problem": {"builtin": "lq"}})

    def test_hash_stable(self):
        a = {"b": 1, "a": [1.5, 2]}
        assert config_hash(a) == config_hash({"a": [1.5, 2], "b": 1})
        assert config_hash(a) != config_hash({"a": [1.5, 2], "b": 2})

    def test_dumps_digits(self):
        assert dumps({"x": 0.1, "n": 3, "ok": True, "bad": float("nan")}) == \
            '{\n  "bad": null,\n  "n": 3,\n  "ok": true,\n  "x": 0.10000000000000001\n}'

    def test_custom_tables(self):
        N, K = 3, 2
        body = {"problem": {"custom": {
            "grid": {"T": 0.75, "n_steps": 3},
            "lattice": {"lower": [0.0], "upper": [2.0], "h": [1.0]},
            "controls": {"atoms": [0.0, 1.0], "labels": ["a", "b"]},
            "x0": [1.0],
            "mode": "control-and-stop",
            "drift": {"kind": "table", "values": [[[0.5], [-0.5]]] * N},
            "diffusion": {"kind": "table", "values": [[[[0.5]], [[1.0]]]] * N},
            "jumps": [{"rate": {"kind": "constant", "value": 0.5}, "z": [2.0]}],
            "running": {"kind": "table", "values": [[0.125, -0.25]] * N},
            "terminal": {"kind": "table", "values": [0.0, 1.0, -1.0]},
            "stopping": {"kind": "table", "values": [[0.5, 0.0, 0.25]] * 4},
        }}}
        p = build_problem(validate({"version": 1, **body}))
        assert p.controls.labels == ("a", "b") and p.stops
        tm = build_transition(p)
        v = backward_induction(p, tm)[0].values
        assert np.all(v[0] >= [0.5, 0.0, 0.25])

    def test_custom_table_shape_error(self):
        body = {"problem": {"custom": {
            "grid": {"T": 1.0, "n_steps": 2}, "lattice": {"lower": [0.0], "upper": [1.0], "h": [1.0]},
            "controls": {"atoms": [0.0]}, "x0": [0.0],
            "drift": {"kind": "table", "values": [[0.0]]},
            "diffusion": {"kind": "constant", "value": [[0.0]]},
            "running": {"kind": "constant", "value": 0.0}, "terminal": {"kind": "constant", "value": 0.0},
        }}}
        with pytest.raises(ConfigError) as exc:
            build_problem(validate({"version": 1, **body}))
        assert exc.value.path == "config.problem.custom.drift.values"


class TestCommands:
    def test_zero_reward_solve(self, tmp_path):
        assert run("solve", os.path.join(CONFIGS, "zero.json"), tmp_path) == 0
        rows = [ln for ln in (tmp_path / "value.csv").read_text().splitlines() if not ln.startswith("#")][1:]
        assert rows and all(ln.split(",")[-1] == "0" for ln in rows)

    def test_oracle_then_solve(self, tmp_path):
        cfg = os.path.join(CONFIGS, "small-random.json")
        assert run("oracle", cfg, tmp_path / "o") == 0
        assert run("solve", cfg, tmp_path / "s") == 0
        oracle = json.loads((tmp_path / "o" / "oracle.json").read_text())
        report = json.loads((tmp_path / "s" / "report.json").read_text())
        assert oracle["value"] == report["results"]["v0"]

    def test_malformed(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"problem": {"builtin": "lq"}, "n_paths": -1})
        assert run("simulate", cfg, tmp_path / "o") == cli.EXIT_CONFIG
        assert "config.n_paths" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{")
        assert run("solve", str(path), tmp_path / "o") == cli.EXIT_CONFIG

    def test_cfl_failure(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"problem": {"builtin": "lq", "params": {"n_steps": 5, "h": 0.05}}})
        assert run("solve", cfg, tmp_path / "o") == cli.EXIT_CFL
        assert "n_steps >= " in capsys.readouterr().err

    def test_too_large(self, tmp_path):
        cfg = write_cfg(tmp_path, {"problem": {"builtin": "drift-bang"}})
        assert run("oracle", cfg, tmp_path / "o") == cli.EXIT_SIZE
        assert run("select", cfg, tmp_path / "s") == cli.EXIT_SIZE

    def test_contract_failure_exit(self, tmp_path):
        cfg = write_cfg(tmp_path, {**SMALL["martcheck"], "compensator_scale": 3.0, "n_paths": 2000})
        assert run("martcheck", cfg, tmp_path / "o") == cli.EXIT_CONTRACT
        assert json.loads((tmp_path / "o" / "report.json").read_text())["passed"] is False

    def test_seed_override(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL["simulate"])
        run("simulate", cfg, tmp_path / "a", "--seed", "11")
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        assert report["seed"] == 11
        run("simulate", cfg, tmp_path / "b")
        assert json.loads((tmp_path / "b" / "report.json").read_text())["config_hash"] != report["config_hash"]

    def test_atom_policy(self, tmp_path):
        cfg = write_cfg(tmp_path, {**SMALL["simulate"], "policy": 60})
        assert run("simulate", cfg, tmp_path / "o") == 0
        bad = write_cfg(tmp_path, {**SMALL["simulate"], "policy": 500}, "bad.json")
        assert run("simulate", bad, tmp_path / "p") == cli.EXIT_CONFIG

    def test_outputs_carry_hash(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL["select"])
        assert run("select", cfg, tmp_path) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        first = (tmp_path / "mstar.csv").read_text().splitlines()[0]
        assert first == f"# config_hash={report['config_hash']} seed=0"
        assert "timestamp" in json.loads((tmp_path / "metadata.json").read_text())
        assert "timestamp" not in (tmp_path / "report.json").read_text()

    @pytest.mark.parametrize("command", cli.COMMANDS)
    def test_deterministic(self, tmp_path, command):
        cfg = write_cfg(tmp_path, SMALL[command])
        codes = [run(command, cfg, tmp_path / d) for d in ("a", "b")]
        assert codes[0] == codes[1] == 0
        a, b = data_files(tmp_path / "a"), data_files(tmp_path / "b")
        assert a.keys() == b.keys() and "report.json" in a
        assert a == b

    def test_console_entry(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, SMALL["select"])
        assert cli.main(["select", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert "select: PASS" in capsys.readouterr().out
