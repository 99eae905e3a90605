import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from jetreduce.cli import DEFAULT_TOL, GridSpec, config_from_dict, dumps, load_config, main
from jetreduce.reduce import SolutionField

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

HEAT = {"problem": "heat63", "coeffs": {"c0": 1, "c1": 0.3, "c2": 0.3},
        "grid": {"x": [-1, 1, 41], "t": [0, 0.1, 41]}, "init": {"u": 1.0, "a": 0.2, "b": 0.5}}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, cfg, *extra, command="run"):
    path = write(tmp_path, cfg)
    out = tmp_path / "out"
    code = main([command, str(path), "--out", str(out), *extra])
    report = json.loads((out / "report.json").read_text())
    return code, report, out


def test_run_heat(tmp_path):
    code, report, out = run(tmp_path, HEAT)
    assert code == 0 and report["status"] == "OK" and report["schema"] == 1
    names = [s["name"] for s in report["stages"]]
    assert names == ["transversality", "solve_parameters", "build_constraint", "tangency_check",
                     "reduced_system", "integrate_reduced", "reconstruct", "fd_residual"]
    fd = report["stages"][-1]
    assert abs(fd["orders"][-1] - 2) < 0.3
    lines = (out / "solution.csv").read_text().splitlines()
    assert lines[0] == "t,x,u" and len(lines) == 1 + 41 * 41
    f = SolutionField.from_csv(out / "solution.csv")
    assert f["u"].shape == (41, 41)


def test_run_is_deterministic(tmp_path):
    run(tmp_path, HEAT)
    first = (tmp_path / "out" / "report.json").read_bytes()
    run(tmp_path, HEAT)
    assert (tmp_path / "out" / "report.json").read_bytes() == first
    assert b"time" not in first


def test_corrupted_seed_exit_3(tmp_path):
    cfg = {**HEAT, "problem": {"builtin": "heat", "seed": ["u_x - u^2"]}}
    code, report, _ = run(tmp_path, cfg)
    assert code == 3 and report["status"] == "TANGENCY_FAILURE"
    assert report["stages"][-1]["name"] == "tangency_check"


def test_blowup_exit_4(tmp_path):
    cfg = {**HEAT, "coeffs": {"c0": 1, "c1": 0, "c2": 0}, "init": {"u": 1.0, "a": 0.0, "b": -1.0},
           "grid": {"x": [-1, 1, 41], "t": [0, 1, 41]}}
    code, report, _ = run(tmp_path, cfg)
    assert code == 4 and report["status"] == "BLOWUP"


@pytest.mark.parametrize("bad", [
    {**HEAT, "extra": 1},
    {**HEAT, "grid": {"x": [-1, 1, 5], "t": [0, 0.1, 41]}},
    {**HEAT, "grid": {"x": [1, -1, 41], "t": [0, 0.1, 41]}},
    {**HEAT, "tol": {"nonsense": 1}},
    {**HEAT, "coeffs": {"c7": 1}},
    {**HEAT, "problem": "wave"},
    {"coeffs": {}},
])
def test_config_errors_exit_2(tmp_path, bad):
    code, report, _ = run(tmp_path, bad)
    assert code == 2 and report["status"] == "CONFIG_ERROR"


def test_missing_and_broken_config(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "report.json").read_text())["error"]["code"] == "CONFIG_ERROR"


def test_closure_command(tmp_path):
    code, report, _ = run(tmp_path, {"problem": "heat63"}, command="closure")
    assert code == 0 and report["stages"][0]["closed"] is True
    code, report, _ = run(tmp_path, {"problem": "heat63", "closure": {"generators": ["u_xx", "u^2"]}},
                          command="closure")
    assert code == 3 and report["status"] == "CLOSURE_FAILURE"
    code, report, _ = run(tmp_path, {"problem": "transport62"}, command="closure")
    pair = report["stages"][0]["pairs"][0]
    assert code == 0 and pair["lambda_variance"] <= 1e-8
    assert pair["lambda"] == pytest.approx([-1, 0], abs=1e-9)


def test_verify_command(tmp_path):
    code, _, out = run(tmp_path, HEAT)
    cfg = write(tmp_path, HEAT)
    assert main(["verify", str(out / "solution.csv"), str(cfg), "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v" / "report.json").read_text())
    assert len(rep["stages"][0]["levels"]) == 3
    f = SolutionField.from_csv(out / "solution.csv")
    bad = SolutionField(f.t_grid, f.x_grid, {"u": f["u"] + 1e-3 * np.cos(f.x_grid)[None, :]})
    bad.to_csv(tmp_path / "bad.csv")
    assert main(["verify", str(tmp_path / "bad.csv"), str(cfg), "--out", str(tmp_path / "v2")]) == 5
    assert main(["verify", str(tmp_path / "missing.csv"), str(cfg), "--out", str(tmp_path / "v3")]) == 2


def test_coefficient_table(tmp_path):
    (tmp_path / "c1.csv").write_text("t,value\n0,0.3\n0.05,0.2\n0.1,0.3\n")
    cfg = config_from_dict({**HEAT, "coeffs": {"c1": {"table": "c1.csv"}}}, base=tmp_path)
    assert cfg.coeffs.value("c1", 0.025) == pytest.approx(0.25)


def test_overrides(tmp_path):
    cfg = load_config(write(tmp_path, HEAT), out=str(tmp_path / "o"), tol=1e-7, seed=9, refine=1)
    assert cfg.tol["tangency"] == cfg.tol["closure"] == 1e-7
    assert cfg.seed == 9 and cfg.refine == 1 and cfg.out_dir == tmp_path / "o"
    assert cfg.tol["residual"] == DEFAULT_TOL["residual"]
    g = GridSpec((0.0, 1.0), 11, (0.0, 1.0), 21).refined(1)
    assert (g.nx, g.nt) == (21, 41)


def test_dumps_is_canonical():
    text = dumps({"b": 0.1, "a": [1, float("nan"), 1 / 3], "c": {"z": True, "y": None}})
    data = json.loads(text)
    assert list(data) == ["a", "b", "c"] and data["a"][1] is None
    assert "0.33333333333333331" in text and data["a"][2] == 1 / 3
    assert math.isclose(data["b"], 0.1)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.problem.label


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "jetreduce", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "verify" in out.stdout
