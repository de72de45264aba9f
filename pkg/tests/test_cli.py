import json
import math

import pytest

from tslip.cli import EXIT_CONFIG, EXIT_OK, EXIT_SIMULATION, main
from tslip.config import ConfigError, load_config
from tslip.io import read_table, sha256_of


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["run", "--out", str(d), "--format", "both", "--vp-radius", "0.4"]) == EXIT_OK
    return d


def test_run_emits_timeseries_and_metrics(run_dir):
    for name in ("timeseries.csv", "timeseries.events.json", "metrics.csv", "gait.json", "manifest.json"):
        assert (run_dir / name).exists()
    rows, units = read_table(run_dir / "metrics.csv")
    assert units["duty_factor"] == "-"
    assert rows[0]["pitch_direction"] == "backward"


def test_run_emits_vector_plots_with_data(run_dir):
    svgs = sorted(run_dir.glob("*.svg"))
    assert len(svgs) >= 4
    for p in svgs:
        assert p.read_text().lstrip().startswith("<?xml")
        assert p.with_suffix(".csv").exists()


def test_manifest_is_complete(run_dir):
    m = json.loads((run_dir / "manifest.json").read_text())
    listed = {f["path"]: f["sha256"] for f in m["files"]}
    on_disk = {p.name for p in run_dir.iterdir() if p.name != "manifest.json"}
    assert set(listed) == on_disk
    assert all(sha256_of(run_dir / k) == v for k, v in listed.items())
    assert m["config_hash"] == load_config().with_overrides(vp_radius=0.4).digest()


def test_analyze_reproduces_inline_metrics(run_dir, tmp_path, capsys):
    code, out, _ = _run(capsys, "analyze", str(run_dir), "--out", str(tmp_path))
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["drift_vs_stored"] < 1e-9
    a, _ = read_table(run_dir / "metrics.csv")
    b, _ = read_table(tmp_path / "metrics.csv")
    for ra, rb in zip(a, b):
        for k, v in ra.items():
            if isinstance(v, float) and k in rb and math.isfinite(v):
                assert abs(v - rb[k]) <= 1e-9 * max(1.0, abs(v))


def test_env_var_sets_default_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TSLIP_OUTPUT_ROOT", str(tmp_path))
    code, out, _ = _run(capsys, "run", "--seedless")
    assert code == EXIT_OK
    assert (tmp_path / "run" / "timeseries.csv").exists()
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert m["seedless_checked"] is True
    assert json.loads(out)["angular_excursion"] == 0.0


def test_radius_out_of_range_is_config_error(tmp_path, capsys):
    code, _, err = _run(capsys, "run", "--vp-radius", "0.9", "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    doc = json.loads(err)
    assert doc["status"] == "error" and doc["exit_code"] == EXIT_CONFIG


def test_missing_config_file(tmp_path, capsys):
    code, _, _ = _run(capsys, "run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path))
    assert code == EXIT_CONFIG


def test_unknown_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  masss: 70\n")
    code, _, err = _run(capsys, "run", "--config", str(bad), "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    assert "masss" in err


def test_invalid_physical_value_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"mass": -1}}))
    with pytest.raises(ConfigError):
        load_config(bad)


def test_unconverged_run_is_simulation_error(tmp_path, capsys):
    cfg = tmp_path / "short.json"
    cfg.write_text(json.dumps({"stride_budget": 1}))
    code, _, err = _run(capsys, "run", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == EXIT_SIMULATION
    assert json.loads(err)["details"]["reason"] == "stride_budget_exhausted"


def test_config_digest_ignores_output_section():
    a = load_config()
    assert a.digest() == a.with_overrides(output_format="both", output_dir="/tmp/x").digest()
    assert a.digest() != a.with_overrides(speed=6.0).digest()


def test_damping_interpolates_between_table_speeds():
    c = load_config()
    assert c.damping_for(5.0) == 1210.546875
    assert c.damping_for(4.5) == pytest.approx(0.5 * (1556.25 + 1210.546875))
    with pytest.raises(ConfigError):
        c.damping_for(12.0)


def test_small_sweep(tmp_path, capsys):
    cfg = tmp_path / "grid.yaml"
    cfg.write_text("sweep:\n  vp_radii: [0.0, 0.2, -0.2]\n  speeds: [5.0]\n  tune: false\n")
    code, out, _ = _run(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--format", "both")
    assert code == EXIT_OK
    rows, _ = read_table(tmp_path / "o" / "summary.csv")
    assert [r["vp_radius"] for r in rows] == [0.0, 0.2, -0.2]
    assert {r["pitch_direction"] for r in rows if r["vp_radius"] != 0} == {"backward", "forward"}
    assert all(r["damping"] == 1210.546875 for r in rows)
    assert (tmp_path / "o" / "cells" / "v5_r+0.20" / "timeseries.csv").exists()
    assert list((tmp_path / "o").glob("*.svg"))


def test_tune_single_speed(tmp_path, capsys):
    code, out, _ = _run(capsys, "tune", "--speed", "10", "--out", str(tmp_path))
    assert code == EXIT_OK
    rows, _ = read_table(tmp_path / "tuning.csv")
    assert len(rows) == 1
    lo, hi = load_config().band().band(10.0)
    assert lo <= rows[0]["duty_factor"] <= hi
    assert rows[0]["damping"] == pytest.approx(355.5555555555556, rel=1e-9)


def test_fixtures_command(tmp_path, capsys, fixture_index):
    code, _, _ = _run(capsys, "fixtures", "--out", str(tmp_path))
    assert code == EXIT_OK
    idx = json.loads((tmp_path / "fixtures.json").read_text())
    assert idx["config_hash"] == fixture_index["config_hash"]
    for g in fixture_index["gaits"]:
        assert (tmp_path / g["file"]).exists()


def test_unknown_subcommand(capsys):
    assert main(["fly"]) == 2
