import json
import subprocess
import sys

import pytest

from sltlab.cli import UnknownKeyError, main, parse_config
from sltlab.experiments import ConfigError


def test_parse_config_file_and_flags(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# small run\nr = 6\ns = 2  # shell width\nseed = 3\nu_prime = none\n")
    rc = parse_config(f, {"seed": "9", "out_dir": str(tmp_path / "o")})
    assert rc.experiment.r == 6 and rc.experiment.s == 2
    assert rc.experiment.seed == 9
    assert rc.experiment.u_prime is None
    assert rc.out_dir == tmp_path / "o"


def test_parse_config_errors(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("radius = 4\n")
    with pytest.raises(UnknownKeyError):
        parse_config(f)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_config(None, {"eps": "0.3"})
    with pytest.raises(ConfigError):
        parse_config(None, {"r": "twelve"})


def test_out_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("SLTLAB_OUT_DIR", str(tmp_path))
    assert parse_config().out_dir == tmp_path


def test_capacity_command(capsys):
    assert main(["capacity", "--points", "0,0,0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] == pytest.approx(0.6595, abs=1e-4)


def test_green_and_geometry_commands(capsys, tmp_path):
    assert main(["green", "--offsets", "0,0,0;1,0,0"]) == 0
    vals = [v["G"] for v in json.loads(capsys.readouterr().out)["values"]]
    assert vals[0] - vals[1] == pytest.approx(1.0, abs=1e-8)
    assert main(["--r", "4", "--s", "1", "--out-dir", str(tmp_path), "geometry", "--write"]) == 0
    assert (tmp_path / "geometry.json").is_file()


def test_error_exit_codes(capsys, tmp_path):
    assert main(["--eps", "0.3", "experiment", "vacant-law"]) == 1
    assert main(["experiment", "no-such-thing"]) == 1
    assert main(["--config", str(tmp_path / "none.cfg"), "geometry"]) == 1
    assert "error" in capsys.readouterr().err


def test_experiment_writes_identical_csv(tmp_path):
    args = ["--reps", "1000", "--seed", "7"]
    assert main(args + ["--out-dir", str(tmp_path / "a"), "experiment", "vacant-law"]) in (0, 2)
    assert main(args + ["--out-dir", str(tmp_path / "b"), "experiment", "vacant-law"]) in (0, 2)
    a = (tmp_path / "a" / "vacant-law.csv").read_bytes()
    b = (tmp_path / "b" / "vacant-law.csv").read_bytes()
    assert a == b
    assert json.loads((tmp_path / "a" / "vacant-law.json").read_text())["name"] == "vacant-law"


def test_failed_flag_exits_two(tmp_path):
    # a handful of walks cannot resolve the Green function to the required precision
    rc = main(["--reps", "1000", "--out-dir", str(tmp_path), "experiment", "green-check"])
    assert rc == 2


def test_simulate_writes_clotheslines(tmp_path):
    assert main(["--r", "3", "--s", "1", "--u", "2", "--out-dir", str(tmp_path), "simulate"]) == 0
    summary = json.loads((tmp_path / "simulate.json").read_text())
    lines = (tmp_path / "clotheslines.csv").read_text().splitlines()
    assert lines[0] == "clothesline,k,w,y"
    assert len(lines) - 1 == summary["steps"]


def test_calibrate_writes_threshold(tmp_path, capsys):
    golden = tmp_path / "golden.json"
    assert main(["--r", "4", "--s", "1", "--reps", "3", "calibrate", "sandwich",
                 "--statistic", "frequency", "--golden", str(golden)]) == 0
    data = json.loads(golden.read_text())
    (key, entry), = data["thresholds"].items()
    assert key.startswith("sandwich|ball|d3|r4|s1")
    assert entry["threshold"] <= entry["pilot_value"]


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "sltlab", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("sltlab ")
