import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import tomli

from pilotwave.harness import (
    Artifact,
    ConfigError,
    RunReport,
    load_config,
    parse_config,
    read_columns,
    run_experiment,
    write_outputs,
)
from pilotwave.harness.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_PHYSICS, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_MEASURE = """
kind = "measure"
seed = 3

[grid]
x_min = -1.0
x_max = 3.0
n = 64

[state]
type = "piecewise_density"
intervals = [[0.0, 1.0], [1.0, 2.0]]
weights = [0.5, 0.5]

[chain]
lam = 1.0
duration = 4.0
n_measurements = 5

[chain.observable]
type = "binned_position"
edges = [0.0, 1.0, 2.0]

[chain.detector]
sigma = 0.5
y_min = -8.0
y_max = 8.0
ny = 128
"""

SMALL_PROPAGATE = """
kind = "propagate"
seed = 1

[grid]
x_min = -16.0
x_max = 16.0
n = 256

[state]
type = "gaussian"
center = 0.0
sigma = 1.0

[plan]
dt = 0.004
n_steps = 50
snapshot_every = 25
"""

NODE_TRAJECTORY = """
kind = "trajectory"

[grid]
x_min = -1.0
x_max = 3.0
n = 64

[state]
type = "piecewise_density"
intervals = [[0.0, 1.0]]
weights = [1.0]

[plan]
dt = 0.001
n_steps = 10

[trajectory]
positions = [2.0]
"""


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _data(text):
    return tomli.loads(text)


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert len(cfg.config_hash()) == 64


def test_unknown_key_is_named():
    data = _data(SMALL_MEASURE)
    data["chain"]["lamda"] = 1.0
    with pytest.raises(ConfigError, match=r"unknown key 'chain.lamda'"):
        parse_config(data)


def test_missing_section_is_named():
    data = _data(SMALL_MEASURE)
    del data["chain"]
    with pytest.raises(ConfigError, match="requires section"):
        parse_config(data)


def test_toml_syntax_error_reports_line(tmp_path):
    path = _write(tmp_path, 'kind = "measure"\nseed = = 3\n')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(path)


def test_insufficient_separation_is_rejected():
    data = _data(SMALL_MEASURE)
    data["chain"]["duration"] = 1.0
    with pytest.raises(ConfigError, match="sigma"):
        parse_config(data)


def test_stability_bound_is_enforced():
    data = _data(SMALL_PROPAGATE)
    data["plan"]["dt"] = 0.01
    with pytest.raises(ConfigError, match="stability bound"):
        parse_config(data)


def test_gaussian_padding_is_enforced():
    data = _data(SMALL_PROPAGATE)
    data["state"]["center"] = 13.0
    with pytest.raises(ConfigError, match="padding"):
        parse_config(data)


def test_physical_flow_sequence_is_rejected():
    data = tomli.loads((CONFIGS / "sequence_two_interval.toml").read_text())
    data["chain"]["reprepare"] = "physical_flow"
    with pytest.raises(ConfigError, match="physical_flow"):
        parse_config(data)


def test_hash_ignores_output_dir_but_not_seed():
    a = parse_config(_data(SMALL_MEASURE))
    data = _data(SMALL_MEASURE)
    data["output_dir"] = "elsewhere"
    assert parse_config(data).config_hash() == a.config_hash()
    assert a.with_seed(4).config_hash() != a.config_hash()


# ---------------------------------------------------------------------------
# output


def test_columns_round_trip(tmp_path):
    report = RunReport("propagate", "abc", 7)
    x = np.array([0.1, 1 / 3, -2.5e-17])
    art = Artifact("a.dat", ("i", "x"), (np.arange(3), x), {"t": "0.5"}, ("1", "L"))
    paths = write_outputs(report, [art], tmp_path)
    assert [p.name for p in paths] == ["a.dat", "report.json"]
    meta, cols, data = read_columns(tmp_path / "a.dat")
    assert cols == ["i", "x"]
    assert meta == {"config_hash": "abc", "seed": "7", "kind": "propagate", "t": "0.5"}
    assert np.array_equal(data[:, 1], x)
    assert json.loads((tmp_path / "report.json").read_text())["files"] == ["a.dat", "report.json"]


def test_empty_artifact_list_writes_only_report(tmp_path):
    paths = write_outputs(RunReport("measure", "h", 0), [], tmp_path)
    assert [p.name for p in paths] == ["report.json"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["report.json"]


def test_mismatched_columns_are_rejected(tmp_path):
    art = Artifact("bad.dat", ("a", "b"), (np.arange(3), np.arange(4)))
    with pytest.raises(ValueError, match="do not match"):
        write_outputs(RunReport("measure", "h", 0), [art], tmp_path)


# ---------------------------------------------------------------------------
# runs


def test_runs_are_byte_identical(tmp_path):
    cfg = parse_config(_data(SMALL_MEASURE))
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").glob("*.dat"))
    assert names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_data_headers_carry_provenance(tmp_path):
    cfg = parse_config(_data(SMALL_PROPAGATE))
    report = run_experiment(cfg, tmp_path)
    assert report.all_passed
    snaps = sorted(tmp_path.glob("snapshot_*.dat"))
    assert len(snaps) == 3
    meta, cols, data = read_columns(snaps[-1])
    assert meta["config_hash"] == cfg.config_hash()
    assert float(meta["t"]) == pytest.approx(0.2)
    assert cols == ["x", "re_psi", "im_psi", "density"] and data.shape == (256, 4)
    assert snaps[0].read_text().startswith("# config_hash=")


def test_seed_changes_sampled_output(tmp_path):
    data = _data(SMALL_MEASURE)
    run_experiment(parse_config(data), tmp_path / "a")
    run_experiment(parse_config(data).with_seed(4), tmp_path / "b")
    a = (tmp_path / "a" / "outcomes.dat").read_text().splitlines()
    b = (tmp_path / "b" / "outcomes.dat").read_text().splitlines()
    assert a[1:] != b[1:]


# ---------------------------------------------------------------------------
# command line


def test_cli_run_and_validate(tmp_path, capsys):
    path = _write(tmp_path, SMALL_PROPAGATE)
    assert main(["propagate", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert "[PASS] norm conservation" in capsys.readouterr().out
    assert (tmp_path / "out" / "report.json").exists()
    assert main(["validate", "--config", str(path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok: kind=propagate")


def test_cli_config_errors(tmp_path, capsys):
    path = _write(tmp_path, SMALL_PROPAGATE)
    assert main(["measure", "--config", str(path)]) == EXIT_CONFIG
    assert "does not match config kind" in capsys.readouterr().err
    assert main(["propagate", "--config", str(path), "--seed", "-1"]) == EXIT_CONFIG
    bad = _write(tmp_path, SMALL_PROPAGATE.replace("n_steps", "nsteps"), "bad.toml")
    assert main(["propagate", "--config", str(bad)]) == EXIT_CONFIG
    assert "unknown key 'plan.nsteps'" in capsys.readouterr().err


def test_cli_physics_error(tmp_path, capsys):
    path = _write(tmp_path, NODE_TRAJECTORY)
    assert main(["trajectory", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_PHYSICS
    assert "runtime error" in capsys.readouterr().err


def test_cli_io_error(tmp_path, capsys):
    path = _write(tmp_path, SMALL_PROPAGATE)
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["propagate", "--config", str(path), "--out", str(blocker / "sub")]) == EXIT_IO
    assert "i/o error" in capsys.readouterr().err
    assert main(["propagate", "--config", str(tmp_path / "missing.toml")]) == EXIT_IO


def test_module_entry_point(tmp_path):
    path = _write(tmp_path, SMALL_MEASURE)
    done = subprocess.run([sys.executable, "-m", "pilotwave", "validate", "--config", str(path)], capture_output=True, text=True)
    assert done.returncode == EXIT_OK and done.stdout.startswith("ok: kind=measure")
    done = subprocess.run([sys.executable, "-m", "pilotwave", "sequence", "--config", str(path)], capture_output=True, text=True)
    assert done.returncode == EXIT_CONFIG
