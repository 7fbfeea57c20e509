import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

import oracles
from volstop.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(args, tmp_path, name="out"):
    out = tmp_path / name
    return main([*args, "--out", str(out)]), out


def write_config(tmp_path, base, replace=None, extra=""):
    text = (CONFIGS / base).read_text()
    for old, new in (replace or {}).items():
        assert old in text
        text = text.replace(old, new)
    path = tmp_path / base
    path.write_text(text + extra)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_price_one_state_matches_closed_form(tmp_path):
    code, out = run(["price", "--config", str(CONFIGS / "one_state.ini")], tmp_path)
    assert code == 0
    rows = read_csv(out / "thresholds.csv")
    b = float(rows[0]["b"])
    assert abs(b / oracles.put_threshold(1.0, 0.05, 0.2) - 1) < 0.01
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["residual"] <= meta["tol"] and meta["iterations"] >= 1
    assert meta["grid"]["points"] == 2000 and "git_describe" in meta


def test_price_is_byte_identical_on_rerun(tmp_path):
    cfg = str(CONFIGS / "three_state.ini")
    _, a = run(["price", "--config", cfg], tmp_path, "a")
    _, b = run(["price", "--config", cfg], tmp_path, "b")
    for name in ("surface.csv", "thresholds.csv", "metadata.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert b"\r\n" not in (a / "surface.csv").read_bytes()


def test_malformed_generator_row(tmp_path, capsys):
    cfg = write_config(tmp_path, "three_state.ini", {"0.5, -1.0,  0.5": "0.5, -1.0"})
    code, _ = run(["price", "--config", cfg], tmp_path)
    assert code == 2
    assert error_of(capsys)["error"] == "BadGenerator"


def test_verify_monotone_passes(tmp_path):
    code, out = run(["verify", "monotone", "--config", str(CONFIGS / "three_state.ini")], tmp_path)
    assert code == 0
    assert json.loads((out / "verify_monotone.json").read_text())["passed"] is True


def test_verify_ordering_counts(tmp_path):
    code, out = run(["verify", "ordering", "--config", str(CONFIGS / "three_state.ini")], tmp_path)
    assert code == 0
    rep = json.loads((out / "verify_ordering.json").read_text())
    assert rep["orderings_examined"] == {"exhaustive": 6, "monotone": 1}
    assert rep["modes_agree"] and rep["strictly_decreasing"]


def test_verify_coupling_refuses_non_skip_free(tmp_path, capsys):
    cfg = write_config(tmp_path, "three_state.ini", {"-1.0,  1.0,  0.0": "-1.5,  1.0,  0.5"})
    code, _ = run(["verify", "coupling", "--config", cfg], tmp_path)
    assert code == 2
    assert error_of(capsys)["error"] == "NotSkipFree"


def test_verify_coupling_chain_passes(tmp_path):
    cfg = write_config(tmp_path, "three_state.ini", {"n_paths = 2000": "n_paths = 200"})
    code, out = run(["verify", "coupling", "--config", cfg], tmp_path)
    assert code == 0
    rep = json.loads((out / "verify_coupling.json").read_text())
    assert rep["violations"] == 0 and rep["n"] == 200


def test_failed_check_exits_one(tmp_path):
    # a single level 10% away cannot be within the convergence tolerance
    cfg = write_config(tmp_path, "hull_white.ini",
                       {"n_levels = 5": "n_levels = 1", "n_paths = 500": "n_paths = 20", "dt = 0.0001": "dt = 0.001"})
    code, out = run(["verify", "continuity", "--config", cfg], tmp_path)
    assert code == 1
    rep = json.loads((out / "verify_continuity.json").read_text())
    assert rep["passed"] is False


def test_no_convergence_exits_three(tmp_path, capsys):
    cfg = write_config(tmp_path, "three_state.ini", {"tol = 1e-10": "tol = 1e-10\nmax_iters = 1"})
    code, _ = run(["price", "--config", cfg], tmp_path)
    assert code == 3
    assert error_of(capsys)["error"] == "NoConvergence"


def test_model_condition_failure_exits_two(tmp_path, capsys):
    cfg = write_config(tmp_path, "hull_white.ini", {"kappa = 0.08": "kappa = 0.07"})
    code, _ = run(["validate", "--config", cfg], tmp_path)
    assert code == 2
    assert error_of(capsys)["error"] == "ModelConditionFailed"


def test_validate_reports_phi(tmp_path):
    code, out = run(["validate", "--config", str(CONFIGS / "heston.ini")], tmp_path)
    assert code == 0
    rep = json.loads((out / "validate.json").read_text())
    assert rep["valid"] and rep["phi"] >= 2


def test_export_constant_volatility_gamma_column(tmp_path):
    code, out = run(["export-paths", "--config", str(CONFIGS / "one_state.ini")], tmp_path)
    assert code == 0
    for row in read_csv(out / "paths.csv"):
        assert float(row["Gamma"]) == float(row["t"]) / 0.2**2
        assert float(row["Y_tilde"]) == 0.2


def test_export_coupled_columns_ordered(tmp_path):
    code, out = run(["export-paths", "--config", str(CONFIGS / "three_state.ini")], tmp_path)
    assert code == 0
    rows = read_csv(out / "paths.csv")
    assert rows and all(float(r["Z"]) <= float(r["Z_prime"]) for r in rows)
    assert all(float(r["Gamma"]) >= float(r["Gamma_prime"]) for r in rows)


def test_export_seed_changes_paths_not_schema(tmp_path):
    cfg = str(CONFIGS / "three_state.ini")
    _, a = run(["export-paths", "--config", cfg, "--seed", "1"], tmp_path, "a")
    _, b = run(["export-paths", "--config", cfg, "--seed", "2"], tmp_path, "b")
    ta, tb = (a / "paths.csv").read_text(), (b / "paths.csv").read_text()
    assert ta.splitlines()[0] == tb.splitlines()[0]
    assert ta != tb


def test_export_diffusion_runs(tmp_path):
    code, out = run(["export-paths", "--config", str(CONFIGS / "hull_white.ini")], tmp_path)
    assert code == 0
    rows = read_csv(out / "paths.csv")
    assert all(float(r["Z"]) <= float(r["Z_prime"]) for r in rows)


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("VOLSTOP_THREADS", "not-a-number")
    code, _ = run(["validate", "--config", str(CONFIGS / "one_state.ini")], tmp_path)
    assert code == 2


def test_missing_config_exits_two(tmp_path):
    code, _ = run(["validate", "--config", str(tmp_path / "missing.ini")], tmp_path)
    assert code == 2


@pytest.mark.parametrize("cmd", [["volstop"], [sys.executable, "-m", "volstop"]])
def test_console_entry(cmd):
    res = subprocess.run([*cmd, "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
