"""CLI behavior: exit codes, artifacts on disk, determinism, error paths."""

import json
import math

import numpy as np
import pytest

from gatedslam.cli import main
from gatedslam.evaluation import ate_rmse
from gatedslam.geometry import Quaternion, SE3Pose
from gatedslam.trajectory import Trajectory, read_tum, write_tum

ROOM = [[[0.0, 0.0, 0.0], [4.0, 3.0, 2.5]]]
# Bent path: a straight out-and-back line is collinear and the aligned ATE
# is undefined for it.
BENT = [[[1.0, 1.0, 1.2], 0.0], [[3.0, 1.2, 1.2], 0.3], [[2.0, 2.2, 1.2], -0.4]]

SCENE = {
    "seed": 3,
    "boxes": ROOM,
    "waypoints": BENT,
    "frames_per_segment": 10,
    "height": 24,
    "width": 24,
}

RUN_CFG = {
    "scene": SCENE,
    "predictor": "oracle",
    "seed": 0,
    "frontend": {"radius": 0.25, "stride": 2},
}


def _dump(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def _bent_trajectory(n=12, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    ts = np.arange(n, dtype=float)
    poses = []
    for i in range(n):
        p = np.array([math.cos(0.4 * i), math.sin(0.4 * i), 0.1 * i])
        p = p + noise * rng.standard_normal(3)
        poses.append(SE3Pose(Quaternion.from_rotvec(np.array([0.0, 0.0, 0.05 * i])), p))
    return Trajectory(list(ts), poses)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_run")
    cfg = _dump(base / "run.json", RUN_CFG)
    out = base / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_generate_writes_sequence(tmp_path, capsys):
    cfg = _dump(tmp_path / "scene.json", SCENE)
    out = tmp_path / "seq"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "gt_traj.tum").exists()
    assert (out / "scene.json").exists()
    assert (out / "frame_00000.ply").exists()
    assert "wrote 21 frames" in capsys.readouterr().out


def test_generate_twice_is_byte_identical(tmp_path):
    cfg = _dump(tmp_path / "scene.json", SCENE)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", cfg, "--out", str(a)]) == 0
    assert main(["generate", "--config", cfg, "--out", str(b)]) == 0
    names_a = sorted(p.name for p in a.iterdir())
    assert names_a == sorted(p.name for p in b.iterdir())
    for name in names_a:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_generate_seed_override(tmp_path):
    cfg = _dump(tmp_path / "scene.json", SCENE)
    out = tmp_path / "seq"
    assert main(["generate", "--config", cfg, "--out", str(out), "--seed", "9"]) == 0
    assert json.loads((out / "scene.json").read_text())["seed"] == 9


def test_generate_rejects_wall_crossing(tmp_path, capsys):
    bad = dict(SCENE)
    bad["waypoints"] = [[[1.0, 1.0, 1.2], 0.0], [[6.0, 1.0, 1.2], 0.0]]
    cfg = _dump(tmp_path / "scene.json", bad)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "seq")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "free space" in err


def test_generate_rejects_malformed_json(tmp_path, capsys):
    cfg = tmp_path / "scene.json"
    cfg.write_text("{ this is not json")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_run_emits_all_artifacts(run_dir):
    for name in ("est_traj.tum", "map.ply", "submaps.json", "posegraph.g2o",
                 "metrics.json", "decisions.jsonl", "eval_report.json"):
        assert (run_dir / name).exists(), name
    metrics = json.loads((run_dir / "metrics.json").read_text())
    # Noiseless oracle in a single room: the estimate is the ground truth.
    assert metrics["ate_rmse_m"] < 1e-6
    assert metrics["frame_count"] == 21


def test_run_metrics_reproduce_byte_identically(run_dir, tmp_path):
    cfg = _dump(tmp_path / "run.json", RUN_CFG)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "metrics.json").read_bytes() == (run_dir / "metrics.json").read_bytes()
    assert (out / "est_traj.tum").read_bytes() == (run_dir / "est_traj.tum").read_bytes()


def test_run_rejects_unknown_predictor_in_config(tmp_path, capsys):
    bad = dict(RUN_CFG)
    bad["predictor"] = "resnet"
    cfg = _dump(tmp_path / "run.json", bad)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_run_rejects_non_object_config(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text("[1, 2, 3]")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "JSON object" in capsys.readouterr().err


def test_run_failure_leaves_error_report(tmp_path, capsys):
    # A two-waypoint straight line is collinear; the aligned evaluation
    # rejects it, which exercises the pipeline-failure exit path.
    bad = dict(RUN_CFG)
    bad["scene"] = dict(SCENE)
    bad["scene"]["waypoints"] = [[[1.0, 1.0, 1.2], 0.0], [[3.0, 1.0, 1.2], 0.0]]
    cfg = _dump(tmp_path / "run.json", bad)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 3
    assert "pipeline error" in capsys.readouterr().err
    report = json.loads((out / "error.json").read_text())
    assert set(report) == {"error", "type", "trace"}
    assert report["type"] == "ValueError"


def test_run_predictor_flag_overrides_config(tmp_path):
    zigzag = dict(SCENE)
    zigzag["frames_per_segment"] = 1
    zigzag["waypoints"] = [[[1.0 + 0.3 * i, 1.0 + 0.2 * (i % 2), 1.2], 0.05 * i]
                           for i in range(8)]
    cfg = _dump(tmp_path / "run.json", {"scene": zigzag, "predictor": "oracle",
                                        "frontend": {"radius": 0.25, "stride": 2}})
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out), "--predictor", "toy"]) == 0
    assert json.loads((out / "metrics.json").read_text())["predictor"] == "toy"


def test_eval_identical_trajectories(tmp_path, capsys):
    traj = _bent_trajectory()
    write_tum(tmp_path / "est.tum", traj)
    write_tum(tmp_path / "gt.tum", traj)
    out = tmp_path / "report"
    assert main(["eval", str(tmp_path / "est.tum"), str(tmp_path / "gt.tum"),
                 "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["ate_rmse_m"] < 1e-12
    assert metrics["matched_poses"] == 12
    assert "<svg" in (out / "trajectories.svg").read_text()
    assert "ate_rmse" in capsys.readouterr().out


def test_eval_matches_library_call_bit_exactly(tmp_path):
    est = _bent_trajectory(noise=0.05, seed=4)
    gt = _bent_trajectory()
    write_tum(tmp_path / "est.tum", est)
    write_tum(tmp_path / "gt.tum", gt)
    out = tmp_path / "report"
    assert main(["eval", str(tmp_path / "est.tum"), str(tmp_path / "gt.tum"),
                 "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    est_r, gt_r = read_tum(tmp_path / "est.tum"), read_tum(tmp_path / "gt.tum")
    assert metrics["ate_rmse_m"] == ate_rmse(est_r, gt_r, align=True)
    assert metrics["ate_rmse_unaligned_m"] == ate_rmse(est_r, gt_r, align=False)


def test_eval_names_malformed_line(tmp_path, capsys):
    traj = _bent_trajectory(n=6)
    write_tum(tmp_path / "est.tum", traj)
    bad = (tmp_path / "est.tum").read_text() + "6.0 0.1 0.2\n"
    (tmp_path / "bad.tum").write_text(bad)
    write_tum(tmp_path / "gt.tum", traj)
    assert main(["eval", str(tmp_path / "bad.tum"), str(tmp_path / "gt.tum"),
                 "--out", str(tmp_path / "report")]) == 2
    assert "line 7" in capsys.readouterr().err


def test_export_g2o_from_dir_and_file_agree(run_dir, tmp_path):
    out_a = tmp_path / "a.g2o"
    out_b = tmp_path / "b.g2o"
    assert main(["export-g2o", str(run_dir), "--out", str(out_a)]) == 0
    assert main(["export-g2o", str(run_dir / "posegraph.g2o"),
                 "--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert out_a.read_bytes() == (run_dir / "posegraph.g2o").read_bytes()


def test_export_g2o_missing_file(tmp_path, capsys):
    assert main(["export-g2o", str(tmp_path / "nope.g2o"),
                 "--out", str(tmp_path / "o.g2o")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_export_g2o_corrupt_line(tmp_path, capsys):
    src = tmp_path / "bad.g2o"
    src.write_text("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n"
                   "EDGE_SE3:QUAT bogus\n")
    assert main(["export-g2o", str(src), "--out", str(tmp_path / "o.g2o")]) == 2
    assert "line 2" in capsys.readouterr().err
