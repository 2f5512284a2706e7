import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from levyhom.cli import main
from levyhom.config import Config, load_config
from levyhom.errors import ConfigError
from levyhom.matrixio import write_matrix

P1 = {
    "case": "p1", "d": 1, "alpha": 0.5, "gamma": 3.0,
    "lambda": {"table": [1.0, 1 / 3]}, "mu": {"table": [1.0, 3.0]},
    "m": 1.0, "eps": [0.5, 0.25], "grid": {"R_dom": 1.0, "K": 8},
}


def write_cfg(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_effective_prints_value(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "p1.yaml", P1)
    assert main(["effective", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert "lambda_eff = 0.8" in capsys.readouterr().out
    doc = json.loads((tmp_path / "o" / "effective.json").read_text())
    assert doc["lambda_eff"] == pytest.approx(0.8, rel=1e-15)
    assert doc["config"]["lambda"] == {"table": [1.0, 1 / 3]}


def test_validate_reports_cell_and_writes_nothing(tmp_path, capsys):
    bad = dict(P1, gamma=2.0, **{"lambda": {"table": [1.0, 0.25]}, "mu": {"table": [1.0, 2.0]}})
    cfg = write_cfg(tmp_path / "bad.yaml", bad)
    before = sorted(p.name for p in tmp_path.iterdir())
    code = main(["validate", "--config", cfg, "--out", str(tmp_path / "o")])
    err = json.loads(capsys.readouterr().err)
    assert code == 2 and err["exit_code"] == 2
    assert "cell (1,)" in err["message"]
    assert sorted(p.name for p in tmp_path.iterdir()) == before


def test_validate_ok(tmp_path):
    assert main(["validate", "--config", write_cfg(tmp_path / "c.yaml", P1), "--quiet"]) == 0


def test_cell_symmetric_gives_ones(tmp_path):
    doc = {"case": "p2", "alpha": 0.5, "gamma": 4.0,
           "kernel": {"rule": "cos_diff", "mean": 2.0, "amp": 1.0, "N": 32}}
    out = tmp_path / "o"
    assert main(["cell", "--config", write_cfg(tmp_path / "sym.yaml", doc), "--out", str(out), "--quiet"]) == 0
    p0 = np.loadtxt(out / "p0.txt")
    assert np.max(np.abs(p0 - 1)) < 1e-8
    rep = json.loads((out / "cell.json").read_text())
    assert {"p0", "eigenvalue", "residual", "pmin", "lambda_eff"} <= set(rep)
    assert rep["lambda_eff"] == pytest.approx(2.0, rel=1e-10)


def test_cell_numeric_failure_exit_code(tmp_path, capsys):
    doc = {"case": "nonsym", "alpha": 0.5, "gamma": 4.0,
           "kernel": {"rule": "sin_sum", "c": 2.0, "a": 0.5, "b": 0.25, "N": 32}, "cell": {"max_iter": 2}}
    assert main(["cell", "--config", write_cfg(tmp_path / "c.yaml", doc), "--out", str(tmp_path)]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "ConvergenceError"


def test_unknown_keys_rejected(tmp_path):
    assert main(["validate", "--config", write_cfg(tmp_path / "c.yaml", dict(P1, colour="red"))]) == 2
    assert main(["validate", "--config", write_cfg(tmp_path / "d.yaml", dict(P1, grid={"R_dom": 1.0, "Kk": 8}))]) == 2


def test_missing_file_is_io_error(tmp_path):
    assert main(["effective", "--config", str(tmp_path / "none.yaml")]) == 4


def test_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    write_matrix(sub / "mu.txt", [1.0, 3.0])
    doc = dict(P1, mu={"file": "mu.txt"})
    cfg = load_config(write_cfg(sub / "p1.yaml", doc))
    assert cfg.model().mu.samples.tolist() == [1.0, 3.0]
    assert cfg.resolved()["mu"]["file"] == str((sub / "mu.txt").resolve())


def test_json_config(tmp_path, capsys):
    path = tmp_path / "p1.json"
    path.write_text(json.dumps(P1))
    assert main(["effective", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    assert "0.8" in capsys.readouterr().out


def test_sweep_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path / "p1.yaml", P1)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet", "--threads", "2"]) == 0
    for name in ("sweep.csv", "sweep.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    doc = json.loads((tmp_path / "a" / "sweep.json").read_text())
    assert doc["config"]["eps"] == [0.5, 0.25]


def test_solve_writes_solution(tmp_path):
    doc = dict(P1, eps=0.25, p=3.0)
    out = tmp_path / "o"
    assert main(["solve", "--config", write_cfg(tmp_path / "s.yaml", doc), "--out", str(out), "--quiet"]) == 0
    u = np.loadtxt(out / "u.txt")
    rep = json.loads((out / "solve.json").read_text())
    assert u.shape == (rep["n"],) and rep["wall_ms"] == 0.0 and rep["residual"] <= 1e-6


def test_seed_override_q1(tmp_path):
    doc = {"case": "q1", "alpha": 0.5, "gamma": 3.0,
           "lambda_spec": {"kind": "checkerboard", "states": [1.0, 1 / 3], "seed": 7},
           "mu_spec": {"kind": "checkerboard", "states": [1.0, 3.0], "seed": 7},
           "eps": [0.5, 0.25], "grid": {"R_dom": 1.0}, "seeds": [0, 1, 2]}
    cfg = write_cfg(tmp_path / "q1.yaml", doc)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "5", "--quiet"]) == 0
    rows = (tmp_path / "o" / "sweep.csv").read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"5"}


def test_ergodic_subcommand(tmp_path):
    doc = {"case": "q2", "alpha": 0.5, "gamma": 4.0, "omega": {"rule": "product", "mean": 1.5, "amp": 0.5},
           "seeds": list(range(10)), "ergodic": {"box": [0.0, 1.0, 0.5, 1.5], "eps": [0.25, 0.0625]}}
    assert main(["ergodic", "--config", write_cfg(tmp_path / "e.yaml", doc), "--out", str(tmp_path), "--quiet"]) == 0
    rep = json.loads((tmp_path / "ergodic.json").read_text())
    assert rep["limit"] == pytest.approx(2.25) and rep["mean_deviation"][1] < rep["mean_deviation"][0]


def test_config_schema_errors():
    with pytest.raises(ConfigError):
        Config({"case": "p9", "alpha": 0.5, "gamma": 2.0})
    with pytest.raises(ConfigError):
        Config({"case": "p1", "gamma": 2.0})
    with pytest.raises(ConfigError):
        Config(dict(P1, **{"lambda": {"rule": "zigzag", "mean": 1, "amp": 0}})).model()


def test_help_documents_exit_codes():
    out = subprocess.run([sys.executable, "-m", "levyhom.cli", "sweep", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "3  numerical failure" in out.stdout and "4  file I/O error" in out.stdout
