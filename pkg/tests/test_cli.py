"""CLI harness: subcommands, exit codes, manifests, determinism."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ptztrack.cli import main
from ptztrack.scenarios import tracking_scenario, revisit_scenario


@pytest.fixture(scope="module")
def scenario_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("sc") / "tracking.json"
    sc = tracking_scenario(seed=31, n_frames=60)
    sc.landmark_count = 900
    path.write_text(sc.to_json())
    return path


@pytest.fixture(scope="module")
def small_revisit_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("sc2") / "revisit.json"
    sc = revisit_scenario(seed=32, n_frames=40, landmark_count=700)
    path.write_text(sc.to_json())
    return path


def test_init_writes_map_and_report(scenario_file, tmp_path):
    out = tmp_path / "init"
    rc = main(["init", "--scenario", str(scenario_file), "--out", str(out)])
    assert rc == 0
    assert (out / "scene_map.bin").exists()
    report = json.loads((out / "init_report.json").read_text())
    assert report["converged"]
    assert len(report["views"]) == 12
    # deterministic map for a fixed seed
    blob1 = (out / "scene_map.bin").read_bytes()
    out2 = tmp_path / "init2"
    main(["init", "--scenario", str(scenario_file), "--out", str(out2)])
    assert (out2 / "scene_map.bin").read_bytes() == blob1


def test_init_refuses_overwrite(scenario_file, tmp_path):
    out = tmp_path / "init"
    assert main(["init", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    rc = main(["init", "--scenario", str(scenario_file), "--out", str(out)])
    assert rc == 3
    rc = main(["init", "--scenario", str(scenario_file), "--out", str(out), "--force"])
    assert rc == 0


def test_run_outputs_and_manifest(scenario_file, tmp_path):
    out = tmp_path / "run"
    rc = main(
        ["run", "--scenario", str(scenario_file), "--out", str(out), "--sample-size", "500"]
    )
    assert rc == 0
    for name in ("manifest.json", "trajectories.csv", "truth.csv",
                 "diagnostics.csv", "calib_errors.csv"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["sample_size"] == 500
    assert manifest["scenario"]["seed"] == 31


def test_run_determinism_from_manifest(scenario_file, tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out1),
                 "--sample-size", "500"]) == 0
    assert main(["run", "--manifest", str(out1 / "manifest.json"),
                 "--out", str(out2)]) == 0
    for name in ("trajectories.csv", "truth.csv", "calib_errors.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_parallel_mode_matches_sequential(scenario_file, tmp_path):
    out1 = tmp_path / "seq"
    out2 = tmp_path / "par"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out1),
                 "--sample-size", "500"]) == 0
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out2),
                 "--sample-size", "500", "--parallel"]) == 0
    assert (out1 / "trajectories.csv").read_bytes() == (out2 / "trajectories.csv").read_bytes()


def test_eval_subcommand(scenario_file, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(scenario_file), "--out", str(out),
                 "--sample-size", "500"]) == 0
    ev = tmp_path / "eval"
    rc = main(["eval", "--truth", str(out / "truth.csv"),
               "--trajectories", str(out / "trajectories.csv"), "--out", str(ev)])
    assert rc == 0
    rep = json.loads((ev / "mot_report.json").read_text())
    assert rep["mota"] <= 100.0
    assert abs(rep["mt_pct"] + rep["pt_pct"] + rep["ml_pct"] - 100.0) < 1e-9
    assert (ev / "mot_events.csv").exists()


def test_config_error_exit_code(tmp_path):
    rc = main(["run", "--scenario", "/nonexistent.json", "--out", str(tmp_path / "x")])
    assert rc == 3
    rc = main(["init", "--out", str(tmp_path / "y")])
    assert rc == 3


def test_calibration_failure_exit_code(tmp_path):
    # fast descriptor drift with map updating disabled: matching collapses
    # online while the offline stage is healthy
    sc = revisit_scenario(seed=33, n_frames=60, landmark_count=500,
                          drift_rate=1.5)
    path = tmp_path / "bad.json"
    path.write_text(sc.to_json())
    rc = main(["run", "--scenario", str(path), "--out", str(tmp_path / "out"),
               "--no-map-updating"])
    assert rc == 2


def test_timings_report(small_revisit_file, tmp_path, capsys):
    out = tmp_path / "timings.json"
    rc = main(["timings", "--scenario", str(small_revisit_file), "--frames", "40",
               "--sample-size", "400", "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "Total (sequential)" in text and "Total (parallel)" in text
    data = json.loads(out.read_text())
    stage_sum = sum(data["stages_ms"].values())
    assert data["sequential_stage_sum_ms"] == pytest.approx(stage_sum, rel=1e-9)
    assert data["fps_parallel"] > 0


def test_scale_probe(small_revisit_file, tmp_path):
    out = tmp_path / "probe.csv"
    rc = main(["scale-probe", "--scenario", str(small_revisit_file), "--out", str(out),
               "--spacing", "80"])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "foot_x,foot_y,head_x,head_y,height_px"
    assert len(lines) > 5
    # heads sit above feet for ground points (image y decreases upward)
    for row in lines[1:6]:
        fx, fy, hx, hy, h = map(float, row.split(","))
        assert hy < fy
        assert h > 0


def test_sweep_tables(tmp_path):
    sc = revisit_scenario(seed=34, n_frames=24, landmark_count=700)
    path = tmp_path / "sc.json"
    path.write_text(sc.to_json())
    out = tmp_path / "sweep"
    rc = main(["sweep", "--scenario", str(path), "--out", str(out),
               "--landmarks", "80,400", "--thresholds", "3",
               "--seeds", "2", "--sample-size", "400"])
    assert rc == 0
    lm = (out / "sweep_landmarks.csv").read_text().strip().splitlines()
    assert lm[0] == "landmark_count,seed,mean_reproj_px"
    assert len(lm) == 1 + 2 * 2
    thr = (out / "sweep_threshold.csv").read_text().strip().splitlines()
    assert len(thr) == 1 + 1 * 2


def test_console_entry_point(scenario_file, tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "ptztrack.cli", "init",
         "--scenario", str(scenario_file), "--out", str(tmp_path / "cli")],
        capture_output=True, text=True,
    )
    assert r.returncode == 0, r.stderr
    assert "map written" in r.stdout
