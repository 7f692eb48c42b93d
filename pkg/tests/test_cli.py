import csv
import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from rigrefine import cli
from rigrefine.dataset import read_dataset, read_ground_truth, read_poses
from rigrefine.errors import NonFiniteLoss
from rigrefine.evaluation import METRICS

GEN = {"version": 1, "gen": {"trajectory": {"duration": 1.2}, "rig": {"image_size": 32},
                             "lidar": {"rings": 8, "azimuth_steps": 90}, "tracks": {"n_landmarks": 40}}}
TRAIN = ["--epochs", "1", "--nvs-epochs", "1", "--steps-per-epoch", "3", "--rays-per-batch", "128",
         "--n-samples", "16", "--downscale", "2"]


def tree_digest(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.json").write_text(json.dumps(GEN))
    assert run("gen", d / "gt", "--config", d / "gen.json", "--seed", 3) == 0
    assert run("perturb", d / "gt", d / "noisy", "--preset", "mild", "--seed", 1) == 0
    return d


def test_gen_round_trips_and_is_deterministic(workdir, tmp_path):
    ds = read_dataset(workdir / "gt")
    assert ds.provenance == "synthetic-gt" and ds.n_frames > 0 and ds.tracks
    assert (workdir / "gt" / "gt").is_dir()
    assert run("gen", tmp_path / "again", "--config", workdir / "gen.json", "--seed", 3) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(workdir / "gt")
    assert run("gen", tmp_path / "other", "--config", workdir / "gen.json", "--seed", 4) == 0
    assert tree_digest(tmp_path / "other") != tree_digest(workdir / "gt")


def test_seed_from_environment(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "3")
    assert run("gen", tmp_path / "env", "--config", workdir / "gen.json") == 0
    assert tree_digest(tmp_path / "env") == tree_digest(workdir / "gt")


def test_gen_io_error_leaves_nothing(workdir, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen", blocker / "out", "--config", workdir / "gen.json") == cli.EXIT_IO
    assert not (blocker / "out").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["file"]


def test_existing_output_needs_overwrite(workdir, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    assert run("gen", out, "--config", workdir / "gen.json") == cli.EXIT_CONFIG
    assert run("gen", out, "--config", workdir / "gen.json", "--overwrite") == 0
    assert (out / "rig.json").exists()


@pytest.mark.parametrize("content", ["{not json", json.dumps({"version": 7}), json.dumps([1, 2])])
def test_bad_config_exit_2(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert run("gen", tmp_path / "o", "--config", cfg) == cli.EXIT_CONFIG


def test_unknown_train_key_exit_2(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "train": {"epochz": 3}}))
    assert run("refine", workdir / "noisy", tmp_path / "r", "--config", cfg) == cli.EXIT_CONFIG


def test_missing_input_exit_2(tmp_path):
    assert run("perturb", tmp_path / "nope", tmp_path / "o") == cli.EXIT_CONFIG
    assert run("evaluate", tmp_path / "nope", tmp_path / "c", tmp_path / "o") == cli.EXIT_CONFIG


def test_perturb_needs_ground_truth(workdir, tmp_path):
    assert run("perturb", workdir / "noisy", tmp_path / "twice") == cli.EXIT_CONFIG
    assert not (tmp_path / "twice").exists()


def test_perturb_soac_preset_magnitudes(workdir, tmp_path):
    assert run("perturb", workdir / "gt", tmp_path / "soac", "--preset", "soac-noise", "--seed", 5) == 0
    rec = read_ground_truth(tmp_path / "soac")
    for s, p in rec.ext_noise.items():
        assert np.linalg.norm(p.translation) <= 0.5 + 1e-12
        assert np.degrees(p.angle()) <= 5.0 + 1e-9


def test_zero_noise_perturb_keeps_poses(workdir, tmp_path):
    assert run("perturb", workdir / "gt", tmp_path / "z", "--ext-translation-m", 0, "--ext-rotation-deg", 0) == 0
    a_rig, a_traj = read_poses(workdir / "gt")
    b_rig, b_traj = read_poses(tmp_path / "z")
    for s in a_rig.ids:
        assert np.array_equal(a_rig.extrinsic(s).rotation, b_rig.extrinsic(s).rotation)
        assert np.array_equal(a_rig.extrinsic(s).translation, b_rig.extrinsic(s).translation)
    assert np.array_equal(a_traj.translations, b_traj.translations)


def test_perturb_deterministic(workdir, tmp_path):
    assert run("perturb", workdir / "gt", tmp_path / "again", "--preset", "mild", "--seed", 1) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(workdir / "noisy")


def test_refine_outputs_and_determinism(workdir, tmp_path):
    before = tree_digest(workdir / "noisy")
    assert run("refine", workdir / "noisy", tmp_path / "a", *TRAIN, "--deterministic", "--threads", 1) == 0
    assert run("refine", workdir / "noisy", tmp_path / "b", *TRAIN, "--deterministic", "--threads", 2) == 0
    assert tree_digest(workdir / "noisy") == before
    for name in ("checkpoint.rrck", "rig.json", "trajectory.csv", "summary.json"):
        assert (tmp_path / "a" / name).is_file()
    assert (tmp_path / "a" / "checkpoint.rrck").read_bytes() == (tmp_path / "b" / "checkpoint.rrck").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config"]["epochs"] == 1 and summary["config"]["steps_per_epoch"] == 3


def test_calib_only_leaves_trajectory_untouched(workdir, tmp_path):
    assert run("refine", workdir / "noisy", tmp_path / "c", *TRAIN, "--stage", "calib-only") == 0
    assert (tmp_path / "c" / "trajectory.csv").read_bytes() == (workdir / "noisy" / "trajectory.csv").read_bytes()


def test_rig_mismatch_exit_4(workdir, tmp_path):
    coll = tmp_path / "coll"
    shutil.copytree(workdir / "noisy", coll / "a")
    shutil.copytree(workdir / "noisy", coll / "b")
    rig = json.loads((coll / "b" / "rig.json").read_text())
    rig["sensors"][1]["extrinsic"]["t"][0] += 0.05
    rig["name"] = "other"
    (coll / "b" / "rig.json").write_text(json.dumps(rig))
    assert run("refine", coll, tmp_path / "r", *TRAIN) == cli.EXIT_RIG_MISMATCH
    assert not (tmp_path / "r").exists()


def test_nonfinite_loss_exit_5(workdir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLoss("loss became nan at step 0")

    monkeypatch.setattr(cli, "run_calibration_stage", boom)
    assert run("refine", workdir / "noisy", tmp_path / "r", *TRAIN) == cli.EXIT_NONFINITE
    assert not (tmp_path / "r").exists()
    dump = json.loads((tmp_path / "r.nonfinite.json").read_text())
    assert "nan" in dump["error"] and dump["config"]["epochs"] == 1


def test_evaluate_candidate_equals_original(workdir, tmp_path, capsys):
    capsys.readouterr()
    assert run("evaluate", workdir / "noisy", workdir / "noisy", tmp_path / "e", *TRAIN) == 0
    assert capsys.readouterr().out == ""
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    (rec,) = report["scenes"]
    assert rec["selection"] == "original"
    assert all(v in (0.0, None) for v in rec["delta"].values())
    rows = list(csv.DictReader(open(tmp_path / "e" / "report.csv")))
    assert len(rows) == len(report["scenes"]) * len(report["metrics"])
    assert set(METRICS) <= set(report["metrics"])


def test_evaluate_gt_candidate_is_selected(workdir, tmp_path):
    """Ground-truth poses beat a strongly perturbed original on the track metrics."""
    assert run("gen", tmp_path / "gt", "--config", workdir / "gen.json", "--image-size", 128, "--seed", 3) == 0
    assert run("perturb", tmp_path / "gt", tmp_path / "noisy", "--preset", "soac-noise", "--seed", 2) == 0
    assert run("evaluate", tmp_path / "noisy", tmp_path / "gt", tmp_path / "e", *TRAIN, "--skip", "nvs",
               "--skip", "geometry") == 0
    (rec,) = json.loads((tmp_path / "e" / "report.json").read_text())["scenes"]
    assert rec["improved"]["reproj_error"] and rec["improved"]["track_length"] and rec["improved"]["true_error"]
    assert rec["selection"] == "optimized"


def test_print_report_and_report_command(workdir, tmp_path, capsys):
    assert run("evaluate", workdir / "noisy", workdir / "noisy", tmp_path / "e", *TRAIN, "--skip", "nvs",
               "--print-report") == 0
    printed = capsys.readouterr().out
    assert "selection=original" in printed
    assert run("report", tmp_path / "e", "--output", tmp_path / "again") == 0
    assert (tmp_path / "again" / "report.json").read_bytes() == (tmp_path / "e" / "report.json").read_bytes()
    assert (tmp_path / "again" / "report.csv").read_bytes() == (tmp_path / "e" / "report.csv").read_bytes()
    capsys.readouterr()
    assert run("report", tmp_path / "e" / "report.json") == 0
    assert capsys.readouterr().out.strip() == printed.strip()


def test_flags_override_config_file(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "seed": 9, "train": {"epochs": 4, "steps_per_epoch": 2}}))
    args = cli.build_parser().parse_args(["refine", "in", "out", "--config", str(cfg), "--epochs", "2"])
    file_cfg = cli.load_config(cfg)
    tc = cli.train_config(args, file_cfg, cli.resolve_seed(args.seed, file_cfg))
    assert (tc.epochs, tc.steps_per_epoch, tc.seed) == (2, 2, 9)
    assert tc.nvs_epochs == 10
