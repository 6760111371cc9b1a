import json

import pytest

from eabc.cli import EXIT_CONFIG, EXIT_FAULT, EXIT_OK, main, parse_seeds
from eabc.config import ConfigError, parse_config


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def test_equilibrium_command(capsys):
    code, out, _ = run(capsys, "equilibrium", "--delta-ref", "0.3", "--d-phi", "0")
    assert code == EXIT_OK
    result = json.loads(out)
    assert result["phi_e"] == pytest.approx(0.011196, abs=1e-6)
    assert result["u_e"] == [0.0, 0.0]
    assert result["feasible"]


def test_equilibrium_rear_load(capsys):
    code, out, _ = run(capsys, "equilibrium", "--d-r", "0.4")
    assert code == EXIT_OK
    assert json.loads(out)["u_e"] == [-0.4, 0.0]


def test_equilibrium_infeasible(capsys):
    code, _, err = run(capsys, "equilibrium", "--delta-ref", "0.3", "--d-phi", "20")
    assert code == EXIT_FAULT
    assert "infeasible" in err and "asin argument" in err


def test_unknown_scenario(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--scenario", "nope", "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    assert "rear-tracking" in err


def test_unknown_controller(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--scenario", "rear-tracking", "--controller", "pid",
                       "--out", str(tmp_path))
    assert code == EXIT_CONFIG and "pid" in err


def test_config_errors_carry_positions(capsys, tmp_path):
    path = write_config(tmp_path, {"scenario": {"name": "rear-tracking"}, "ocp": {"N": 1}})
    code, _, err = run(capsys, "simulate", "--config", path, "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    assert f"{path}:6:5:" in err
    broken = tmp_path / "broken.json"
    broken.write_text('{\n  "robot": {"m": 7.4,}\n}\n')
    code, _, err = run(capsys, "equilibrium", "--config", str(broken))
    assert code == EXIT_CONFIG and f"{broken}:2:" in err


def test_parse_config_messages():
    text = '{\n  "harness": {\n    "plant_dt": 0.001\n  },\n  "observer": {"dt": 0.01}\n}'
    with pytest.raises(ConfigError, match=r"<config>:5:16: observer dt"):
        parse_config(text)
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config('{"robots": {}}')
    with pytest.raises(ConfigError, match="unknown key 'speed'"):
        parse_config('{"harness": {"speed": 3}}')
    cfg = parse_config('{"robot": {"lambda_deg": 20}, "scenario": {"name": "rear-tracking"}}')
    assert parse_config(json.dumps(cfg.to_dict())).to_dict() == cfg.to_dict()


def test_parse_seeds():
    assert parse_seeds("3") == [3]
    assert parse_seeds("0,2,5") == [0, 2, 5]
    assert parse_seeds("0-4") == [0, 1, 2, 3, 4]
    for bad in ("", "a", "4-1"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def short_run_config(tmp_path):
    return write_config(tmp_path, {"scenario": {"name": "constant-disturbance", "duration": 3.0}})


def test_simulate_writes_outputs(capsys, tmp_path):
    out = tmp_path / "runs"
    code, stdout, _ = run(capsys, "simulate", "--config", short_run_config(tmp_path),
                          "--controller", "eabc", "--out", str(out), "--plot")
    assert code == EXIT_OK
    assert "position MAE" in stdout
    stem = out / "constant-disturbance_eabc_seed0"
    assert stem.with_suffix(".csv").exists()
    metrics = json.loads((out / "constant-disturbance_eabc_seed0_metrics.json").read_text())
    assert metrics["balance_maintained"]
    assert json.loads((out / "config.json").read_text())["scenario"]["duration"] == 3.0
    svg = (out / "constant-disturbance_eabc_seed0_roll.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_compare_is_reproducible(capsys, tmp_path):
    cfg = short_run_config(tmp_path)
    results = []
    for k in range(2):
        out = tmp_path / f"cmp{k}"
        code, stdout, _ = run(capsys, "compare", "--config", cfg, "--controller", "eabc,mpc",
                              "--seeds", "0-1", "--out", str(out))
        assert code == EXIT_OK
        assert len(list(out.glob("*_seed*.csv"))) == 4
        results.append((out / "aggregate.json").read_bytes())
        ranking = (out / "ranking.txt").read_text().splitlines()
        assert ranking[1].split()[1] == "eabc"
    assert results[0] == results[1]
    assert json.loads(results[0])["controllers"]["eabc"]["runs"] == 2


def test_compare_needs_two_controllers(capsys, tmp_path):
    code, _, err = run(capsys, "compare", "--scenario", "rear-tracking", "--controller", "eabc",
                       "--out", str(tmp_path))
    assert code == EXIT_CONFIG and "two controllers" in err


@pytest.mark.slow
def test_fall_reported_with_nonzero_exit(capsys, tmp_path):
    cfg = write_config(tmp_path, {"scenario": {"name": "incline-lateral-steep",
                                               "ramp_rate_deg": 4.0, "hold": 2.0}})
    code, _, err = run(capsys, "simulate", "--config", cfg, "--controller", "mpc",
                       "--out", str(tmp_path / "o"))
    assert code == EXIT_FAULT
    assert "mpc seed 0: fell over at t=" in err
    code, _, _ = run(capsys, "simulate", "--config", cfg, "--controller", "eabc",
                     "--out", str(tmp_path / "o"))
    assert code == EXIT_OK
