import json

import pytest

from dopus.cli import main
from dopus.config import load_config, parse_config

SCAN_TOML = """
[scan]
out_dir = "run"
[scan.scenario]
seed = 3
length_mm = 30.0
dropout = [[10.0, 25.0, 0.15]]
n_decoys = 2
[ab]
trials = 1
[dataset]
n_patients = 2
sweeps_per_patient = 1
length_mm = 25.0
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "scan.toml"
    p.write_text(SCAN_TOML)
    return p


def test_parse_config_resolves_paths(config):
    rc = load_config(config)
    assert rc.scan.out_dir == str(config.parent / "run")
    assert rc.scan.scenario.dropout == [[10.0, 25.0, 0.15]] and rc.ab_trials == 1
    assert rc.dataset.n_patients == 2
    rc = parse_config({"scan": {"replay_path": "seq", "write_outputs": False}}, "/data")
    assert rc.scan.scenario is None and rc.scan.replay_path == "/data/seq"


@pytest.mark.parametrize("data, msg", [
    ({"scan": {"speeed": 1}}, "unknown key"),
    ({"scan": {"scenario": {"phantom": {"nope": 1}}}}, "scan.scenario.phantom"),
    ({"extra": {}}, "unknown section"),
    ({"ab": {"trials": 2, "x": 1}}, "trials"),
    ({"scan": {"tracker": 3}}, "must be a table"),
])
def test_config_errors(data, msg):
    with pytest.raises(ValueError, match=msg):
        parse_config(data)


def test_scan_run_and_errors(config, tmp_path, capsys):
    assert main(["scan", "run", "--config", str(config), "--out", str(tmp_path / "o")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["frames"] >= 30 and out["episodes"] >= 1 and (tmp_path / "o" / "manifest.json").is_file()

    assert main(["scan", "run", "--config", str(tmp_path / "missing.toml")]) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "BadParameter"

    bad = tmp_path / "bad.toml"
    bad.write_text("[scan]\nspeed = -1\nout_dir = 'x'\n")
    assert main(["scan", "run", "--config", str(bad)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValueError" and "speed" in err["message"]

    assert main(["bogus"]) != 0
    assert json.loads(capsys.readouterr().err)["error"] == "NoSuchCommand"


def test_no_reident_flag(config, tmp_path, capsys):
    assert main(["scan", "run", "--config", str(config), "--no-reident", "--out", str(tmp_path / "n")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["episodes"] == 0 and out["dwell_frames"] == 0


def test_phantom_train_eval(config, tmp_path, capsys):
    data = tmp_path / "ph"
    assert main(["phantom", "gen", "--config", str(config), "--out", str(data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["sequences"] == ["patient_00/sweep_00", "patient_01/sweep_00"]
    ck = tmp_path / "m.npz"
    assert main(["train", "--data", str(data), "--out", str(ck), "--resolution", "16", "--fold", "1",
                 "--max-iterations", "1", "--batch-size", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["held_out"] == [1] and 0.0 <= out["held_out_dice"] <= 1.0
    assert ck.is_file() and (tmp_path / "m.curve.csv").is_file()
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["sequences"]) == 2 and 0.0 <= out["mean_dice"] <= 1.0
    assert main(["train", "--data", str(data), "--out", str(ck), "--fold", "5"]) != 0
    assert "fold" in json.loads(capsys.readouterr().err)["message"]
