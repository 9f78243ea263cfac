import json
import os
import subprocess
import sys

import pytest

from gplasc.cli import ConfigError, DEFAULTS, load_config, main, parse_config_text, parse_value

SMALL_CONTINUAL = """\
methods = supcon, gplasc
tasks = 2
classes = 2
d_in = 6
hidden = 12
dim = 4
n_train = 8
n_test = 6
epochs = 2
batch_size = 6
buffer = 6
"""

SMALL_TOY = """\
loss_mode = r2scl
threshold = 0.7
classes = 3
dim = 3
n_per_class = 4
steps = 50
"""


def _cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _read(path):
    return open(path, "rb").read()


# Parsing ------------------------------------------------------------------------


def test_parse_value_types():
    assert parse_value("3", 1) == 3
    assert parse_value("0.5", 1.0) == 0.5
    assert parse_value("yes", False) is True
    assert parse_value("a, b", ["x"]) == ["a", "b"]
    assert parse_value("0, 0.1", [0.0]) == [0.0, 0.1]
    with pytest.raises(ValueError):
        parse_value("nan", 1.0)
    with pytest.raises(ValueError):
        parse_value("maybe", True)


def test_parse_config_errors_carry_line_numbers():
    d = DEFAULTS["etf"]
    assert parse_config_text("# comment\ndim = 4  # trailing\n", d) == {"dim": 4}
    for text, fragment in [
        ("dim = 3\nbogus = 1\n", ":2: unknown key"),
        ("dim = 3\ndim = 4\n", ":2: duplicate key"),
        ("\n\ndim 3\n", ":3: expected"),
        ("dim = three\n", ":1: bad value"),
    ]:
        with pytest.raises(ConfigError, match=fragment):
            parse_config_text(text, d)


def test_load_config_from_report_checks_command(tmp_path):
    rep = tmp_path / "r.json"
    rep.write_text(json.dumps({"config": {"command": "etf", "dim": 5, "vertices": 4, "seed": 1, "tol": 1e-8}}))
    assert load_config(str(rep), "etf")["dim"] == 5
    with pytest.raises(ConfigError, match="produced by 'etf'"):
        load_config(str(rep), "verify")
    rep.write_text(json.dumps({"config": {"dim": "five"}}))
    with pytest.raises(ConfigError):
        load_config(str(rep), "etf")


# Exit codes ---------------------------------------------------------------------


def test_etf_ok_and_bad_geometry(tmp_path):
    assert main(["etf", "--dim", "7", "--vertices", "3", "--out", str(tmp_path / "a")]) == 0
    d = json.loads((tmp_path / "a" / "etf.json").read_text())
    assert d["command"] == "etf" and d["report"]["passed"] and d["schema_version"] == 1
    assert main(["etf", "--dim", "2", "--vertices", "5", "--out", str(tmp_path / "b")]) == 2


def test_usage_errors(tmp_path, capsys):
    out = str(tmp_path)
    assert main([]) == 2
    assert main(["nope"]) == 2
    assert main(["etf", "--seed", "x"]) == 2
    assert main(["etf", "--buffer", "3", "--out", out]) == 2
    assert main(["verify", "--threshold", "1.5", "--out", out]) == 2
    assert main(["continual", "--method", "replay", "--out", out]) == 2
    assert main(["etf", "--config", str(tmp_path / "missing.cfg"), "--out", out]) == 2
    capsys.readouterr()
    bad = _cfg(tmp_path, "dim = 3\nwhat = 1\n")
    assert main(["etf", "--config", bad, "--out", out]) == 2
    assert "run.cfg:2: unknown key 'what'" in capsys.readouterr().err


def test_verify_zero_trials(tmp_path):
    cfg = _cfg(tmp_path, "trials = 0\ngram_max_n = 4\ngram_grid = 10\n")
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "v")]) == 0
    d = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert d["passed"] and d["bound_trials"] == [] and d["min_bound_slack"] is None


def test_verify_small_run_passes(tmp_path):
    cfg = _cfg(tmp_path, "trials = 10\ngram_max_n = 5\ngram_grid = 12\n")
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "verify.json").read_text())
    assert len(d["bound_trials"]) == 10 and d["min_bound_slack"] >= -1e-9


# Outputs and determinism --------------------------------------------------------


def test_toy_outputs_are_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, SMALL_TOY + "snapshot_every = 10\n")
    for sub in ("a", "b"):
        assert main(["toy", "--config", cfg, "--out", str(tmp_path / sub)]) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["toy.json", "toy_loss.csv", "toy_points.csv", "toy_snapshots.csv"]
    for n in names:
        assert _read(tmp_path / "a" / n) == _read(tmp_path / "b" / n)


def test_toy_continual_outputs(tmp_path):
    cfg = _cfg(tmp_path, SMALL_TOY.replace("r2scl", "gplasc") + "tasks = 2\nmargin = 0.5\n")
    assert main(["toy", "--config", cfg, "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "toy.json").read_text())
    assert len(d["prototype_errors"]) == 2 and d["plan"]["task_count_max"] == 2
    assert (tmp_path / "toy_overlap.csv").exists() and (tmp_path / "toy_loss_task1.csv").exists()


def test_continual_rerun_from_report_is_identical(tmp_path):
    cfg = _cfg(tmp_path, SMALL_CONTINUAL)
    assert main(["continual", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert "summary.json" in names and "continual_gplasc_overlap.csv" in names
    report = str(tmp_path / "a" / "continual_gplasc.json")
    assert main(["continual", "--config", report, "--out", str(tmp_path / "b")]) == 0
    for n in names:
        assert _read(tmp_path / "a" / n) == _read(tmp_path / "b" / n), n
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert [r["method"] for r in summary["results"]] == ["supcon", "gplasc"]


def test_continual_method_flag(tmp_path):
    cfg = _cfg(tmp_path, SMALL_CONTINUAL)
    assert main(["continual", "--config", cfg, "--method", "supcon_ird", "--out", str(tmp_path)]) == 0
    assert sorted(p for p in os.listdir(tmp_path) if p.endswith(".json")) == ["continual_supcon_ird.json", "summary.json"]


def test_sweep_writes_table(tmp_path):
    cfg = _cfg(tmp_path, SMALL_CONTINUAL.replace("methods = supcon, gplasc", "values = 0, 0.2"))
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("margin,final_cil") and len(lines) == 3
    assert (tmp_path / "sweep_margin_0.2.json").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gplasc", "etf", "--out", str(tmp_path)], capture_output=True)
    assert r.returncode == 0
    r = subprocess.run([sys.executable, "-m", "gplasc", "etf", "--vertices", "9"], capture_output=True, cwd=tmp_path)
    assert r.returncode == 2


CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.mark.parametrize("name", ["toy_supcon.cfg", "toy_r2scl.cfg", "toy_continual.cfg"])
def test_shipped_toy_configs(tmp_path, name):
    assert main(["toy", "--config", os.path.join(CONFIGS, name), "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "toy.json").read_text())
    eq = d["equality"]
    assert max(eq[k] for k in ("collapse_dev", "cross_inner_dev", "radius_dev", "equiangular_dev", "centroid_dev")) < 5e-2


def test_shipped_continual_config_direction(tmp_path):
    assert main(["continual", "--config", os.path.join(CONFIGS, "continual.cfg"), "--out", str(tmp_path)]) == 0
    rows = {r["method"]: r for r in json.loads((tmp_path / "summary.json").read_text())["results"]}
    assert rows["gplasc"]["final_cil"] >= rows["supcon"]["final_cil"]
