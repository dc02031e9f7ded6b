import json

import numpy as np
import pytest
import yaml

from multitime.cli import main
from multitime.runner import (
    OUTPUT_ROOT_ENV,
    export_expectation_series,
    manifest_numbers,
    read_series_table,
    run_scenario,
)

BASE = {
    "scenario": "propagate",
    "lattice": {"n_sites": 16, "spacing": 0.5, "n_particles": 2, "dirac_mass": 1.0},
    "field": {"n_modes": 2, "max_occupation": 1, "field_mass": 0.5, "coupling": 1.0},
    "cutoff": {"delta": 1.0},
    "initial_state": {"centers": [2.0, 6.0], "widths": [1.0, 1.0], "spinors": [[1, 0], [0, 1]],
                      "truncation_radius": 3.0},
    "times": [0.3, 0.2],
    "output": {"directory": "run"},
}


def write_config(tmp_path, name="cfg.yaml", **overrides):
    cfg = json.loads(json.dumps(BASE))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", str(write_config(tmp_path))]) == 0
    assert "propagate" in capsys.readouterr().out


def test_validate_schema_error_names_field(tmp_path, capsys):
    path = write_config(tmp_path, lattice={"spacing": -1.0})
    assert main(["validate", str(path)]) == 2
    assert "lattice.spacing" in capsys.readouterr().err


def test_validate_invariant_error(tmp_path, capsys):
    path = write_config(tmp_path, initial_state={"widths": [0.5, 1.0]})
    assert main(["validate", str(path)]) == 2
    assert "two lattice spacings" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path, bogus=1)
    assert main(["validate", str(path)]) == 2


def test_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "nope.yaml")]) == 2


def test_propagate_writes_snapshot(tmp_path):
    path = write_config(tmp_path, checks=["norm"])
    assert main(["run", str(path), "--output-root", str(tmp_path / "out")]) == 0
    run = tmp_path / "out" / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["all_passed"] and manifest["config"]["times"] == [0.3, 0.2]
    rows = np.loadtxt(run / "state_final.tsv", comments="#")
    assert rows.shape == (16 * 16 * 2 * 2 * 2**2, 3)
    # amplitudes carry the lattice measure a**(N d)
    assert 0.5**2 * np.sum(rows[:, 1] ** 2 + rows[:, 2] ** 2) == pytest.approx(1.0, abs=1e-9)


def test_free_consistency_passes(tmp_path):
    path = write_config(tmp_path, scenario="verify-consistency", field={"coupling": 0.0}, times=None)
    code, manifest, _ = run_scenario(path, str(tmp_path / "out"))
    assert code == 0
    assert manifest["reports"][0]["residual"] <= 1e-13


def test_check_failure_exit_code(tmp_path):
    check = {"name": "consistency", "t_A": 0.5, "t_B": 0.0, "margin_threshold": 0.0, "tolerance": 1e-30}
    path = write_config(tmp_path, scenario="verify-consistency", checks=[check], times=None)
    assert main(["run", str(path), "--output-root", str(tmp_path / "out")]) == 1


def test_numerical_failure_exit_code(tmp_path, capsys):
    path = write_config(tmp_path, plan={"tolerance": 1e-300, "krylov_dim": 2})
    assert main(["run", str(path), "--output-root", str(tmp_path / "out")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_unknown_check_is_config_error(tmp_path):
    path = write_config(tmp_path, checks=["nonsense"])
    assert main(["run", str(path), "--output-root", str(tmp_path / "out")]) == 2


def test_export_round_trip(tmp_path):
    check = {"name": "series", "t_grid": {"start": 0.0, "step": 0.1, "num": 3}}
    path = write_config(tmp_path, checks=[check], field={"coupling": 0.0})
    assert main(["run", str(path), "--output-root", str(tmp_path / "out")]) == 0
    run = tmp_path / "out" / "run"
    out = export_expectation_series(run, "phi")
    header = out.read_text().splitlines()[0]
    assert header.startswith("# observable=phi units=")
    assert "coupling=0.0" in header
    table = read_series_table(out)
    doc = json.loads((run / "series" / "phi.json").read_text())
    assert np.array_equal(table["t"], doc["t"])
    assert np.array_equal(table["x"], doc["x"])
    # free field in the vacuum fiber: <g phi> vanishes identically
    assert np.all(table["values"] == 0.0)
    assert main(["export", str(run), "missing"]) == 2


def test_env_var_root(tmp_path, monkeypatch):
    path = write_config(tmp_path, checks=["norm"])
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "env" / "run" / "manifest.json").exists()
    assert main(["run", str(path), "--output-root", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "run" / "manifest.json").exists()


def test_deterministic_reports(tmp_path):
    fiber = {"random": "safe"}
    check = {"name": "consistency", "t_A": 0.5, "t_B": 0.0, "margin_threshold": 0.0}
    path = write_config(tmp_path, scenario="verify-consistency", checks=[check], times=None, seed=7,
                        initial_state={"fock_fiber": fiber})
    _, m1, _ = run_scenario(path, str(tmp_path / "a"))
    _, m2, _ = run_scenario(path, str(tmp_path / "b"))
    a, b = manifest_numbers(m1), manifest_numbers(m2)
    assert len(a) == len(b) > 0
    assert np.max(np.abs(np.subtract(a, b))) <= 1e-13
