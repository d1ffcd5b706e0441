import csv
import json

import pytest

from qbsde import __version__
from qbsde.cli import CONFIG_SCHEMA, main, shipped_manifest, validate_config

ENTROPIC_REPR = {"name": "repr-entropic", "experiment": "repr-check", "generator": {"type": "Entropic", "beta": 0.5},
                 "tolerance": 1e-8, "params": {"y": 0.0, "z": 1.2, "eps": [0.1, 0.05, 0.025]}}
TV_LI = {"name": "tv-li", "experiment": "li-test", "generator": {"type": "TimeVaryingQuadratic", "k": "Heaviside(0.5 - t)"},
         "pair": {"type": "IncrementShift", "phi": "tanh(x)", "t1": 0.5}, "grid": {"steps_per_unit": 100, "n_x": 401},
         "tolerance": 1e-3}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_repr_check_writes_report_and_csv(tmp_path):
    cfg = _write(tmp_path / "c.json", ENTROPIC_REPR)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "repr-entropic" / "report.json").read_text())
    assert report["verdict"] == "pass" and report["version"] == __version__
    assert len(report["config_hash"]) == 64 and report["config"]["params"]["z"] == 1.2
    rows = list(csv.reader(open(tmp_path / "out" / "repr-entropic" / "slopes.csv")))
    assert rows[0] == ["eps", "slope", "target"] and len(rows) == 4
    assert float(rows[1][1]) == pytest.approx(0.5 * 1.44, abs=1e-8)


def test_malformed_json_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "x",\n "experiment": }')
    assert main(["--config", str(bad), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_unknown_fields_rejected(tmp_path):
    cfg = dict(ENTROPIC_REPR, colour="blue")
    assert main(["--config", str(_write(tmp_path / "c.json", cfg)), "--out", str(tmp_path)]) == 2
    cfg = json.loads(json.dumps(ENTROPIC_REPR))
    cfg["params"]["zz"] = 1.0
    assert main(["--config", str(_write(tmp_path / "c.json", cfg)), "--out", str(tmp_path)]) == 2


def test_time_varying_li_fails_with_jensen_gap(tmp_path):
    assert main(["--config", str(_write(tmp_path / "c.json", TV_LI)), "--out", str(tmp_path)]) == 1
    report = json.loads((tmp_path / "tv-li" / "report.json").read_text())
    assert report["verdict"] == "fail"
    # 0.5 log E exp(2 tanh(W_{1/2})), adaptive quadrature
    assert report["gap"] == pytest.approx(0.24998165913647843, rel=1e-3)


def test_numerical_failure_exit_3(tmp_path):
    cfg = {"name": "small-box", "experiment": "solve", "generator": {"type": "Entropic", "beta": 0.5},
           "payoff": {"phi": "sin(3*x)"}, "grid": {"steps_per_unit": 50, "n_x": 101, "width": 1.0}}
    assert main(["--config", str(_write(tmp_path / "c.json", cfg)), "--out", str(tmp_path)]) == 3


def test_tolerance_scale_and_seed_override(tmp_path):
    cfg = _write(tmp_path / "c.json", TV_LI)
    assert main(["--config", str(cfg), "--out", str(tmp_path), "--tolerance-scale", "1000"]) == 0
    inv = {"name": "inv", "experiment": "invariance-check",
           "params": {"lambda": 1.0, "C": 1.0, "eps": 0.2, "t": 0.4, "s": 0.4, "n_paths": 5000}}
    assert main(["--config", str(_write(tmp_path / "i.json", inv)), "--out", str(tmp_path), "--seed", "17"]) == 0
    assert json.loads((tmp_path / "inv" / "report.json").read_text())["config"]["seed"] == 17


def test_env_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("QBSDE_OUT", str(tmp_path / "env-out"))
    assert main(["--config", str(_write(tmp_path / "c.json", ENTROPIC_REPR))]) == 0
    assert (tmp_path / "env-out" / "repr-entropic" / "report.json").exists()


def test_manifest_empty_mixed_and_deterministic(tmp_path):
    empty = _write(tmp_path / "empty.json", {"experiments": []})
    assert main(["--manifest", str(empty), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "summary.csv").read_text().splitlines() == ["name,verdict,gap,tolerance,seconds"]

    _write(tmp_path / "tv.json", TV_LI)
    mixed = _write(tmp_path / "mixed.json", {"experiments": [ENTROPIC_REPR, "tv.json"]})
    for out in ("a", "b"):
        assert main(["--manifest", str(mixed), "--out", str(tmp_path / out), "--threads", "2"]) == 1
    rows = list(csv.DictReader(open(tmp_path / "a" / "summary.csv")))
    assert [r["verdict"] for r in rows] == ["pass", "fail"]
    for name in ("repr-entropic/report.json", "repr-entropic/slopes.csv", "tv-li/report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_shipped_manifest_validates():
    data = json.loads(shipped_manifest().read_text())
    assert len(data["experiments"]) > 30
    for cfg in data["experiments"]:
        validate_config(cfg)
    assert CONFIG_SCHEMA["additionalProperties"] is False
