"""End-to-end tests of the command-line surface and its exit-code contract."""

import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from egomotion.cli import main
from egomotion.container import load_motion, read_container, save_motion, write_container
from egomotion.fitting import make_camera_rig, save_keypoints, save_rig, synthesize_keypoints
from egomotion.skeletons import get_skeleton

from helpers import random_motion, straight_walk_motion

SKEL = get_skeleton("humanoid22")

TRAIN_CONFIG = """\
epochs = 2
batch_size = 2
lr = 1e-3
lr_final = 1e-4
lr_switch_epoch = 1
t_max = 40
seed = 7

[model]
layers = 1
width = 32
heads = 2
n_max = 80
d_img = 16
"""


def _tree_bytes(root: Path):
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def _report_values(path: Path):
    values = {}
    for line in path.read_text().splitlines():
        if "=" in line and not line.startswith("#") and " " not in line.split("=", 1)[0]:
            key, val = line.split("=", 1)
            values[key] = float(val)
    return values


# ---------------------------------------------------------------------------
# shared artifacts


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = main(
        [
            "synth", "--scenes", "2", "--activities", "2", "--takes", "1",
            "--duration", "8.0", "--seed", "3", "--d-img", "16", "--out", str(out),
        ]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.toml"
    path.write_text(TRAIN_CONFIG)
    return path


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory, data_dir, config_path):
    out = tmp_path_factory.mktemp("cli") / "model"
    code = main(
        ["train", "--config", str(config_path), "--data", str(data_dir), "--out", str(out)]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def take_path(data_dir):
    return sorted((data_dir / "takes").glob("*.eem"))[0]


# ---------------------------------------------------------------------------
# synth


def test_synth_take_count_and_manifest(tmp_path):
    out = tmp_path / "synth8"
    code = main(
        [
            "synth", "--scenes", "2", "--activities", "2", "--takes", "2",
            "--duration", "8.0", "--seed", "1", "--d-img", "16", "--out", str(out),
        ]
    )
    assert code == 0
    assert len(list((out / "takes").glob("*.eem"))) == 8
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 1
    assert "config_hash" in manifest and "versions" in manifest
    assert manifest["results"]["n_takes"] == 8


def test_synth_rerun_identical_bytes(tmp_path):
    out = tmp_path / "synth"
    flags = [
        "synth", "--scenes", "1", "--activities", "2", "--takes", "1",
        "--duration", "8.0", "--seed", "5", "--d-img", "16", "--out", str(out),
    ]
    assert main(flags) == 0
    first = _tree_bytes(out)
    shutil.rmtree(out)
    assert main(flags) == 0
    assert _tree_bytes(out) == first


def test_synth_missing_out_is_usage_error():
    assert main(["synth", "--scenes", "1"]) == 1


def test_unknown_flag_is_usage_error(tmp_path):
    assert main(["synth", "--bogus", "1", "--out", str(tmp_path / "x")]) == 1


def test_synth_unwritable_out_is_data_error(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory")
    code = main(
        ["synth", "--scenes", "1", "--activities", "1", "--takes", "1",
         "--out", str(blocker / "sub")]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# train


def test_train_artifacts(model_dir):
    assert (model_dir / "checkpoint.eem").is_file()
    log = (model_dir / "loss_log.csv").read_text().splitlines()
    assert log[0] == "epoch,mean_loss"
    assert len(log) == 3  # header + 2 epochs
    for line in log[1:]:
        assert math.isfinite(float(line.split(",")[1]))
    manifest = json.loads((model_dir / "manifest.json").read_text())
    assert manifest["results"]["status"] == "ok"
    assert manifest["seed"] == 7


def test_train_bad_config_key_named(tmp_path, data_dir, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("epochs = 1\nbatch_sizes = 4\n")
    code = main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "out")])
    assert code == 1
    assert "batch_sizes" in capsys.readouterr().err


def test_train_resume_matches_uninterrupted(tmp_path, data_dir, config_path):
    full = tmp_path / "full"
    assert main(["train", "--config", str(config_path), "--data", str(data_dir), "--out", str(full)]) == 0

    half = tmp_path / "half"
    assert (
        main(
            ["train", "--config", str(config_path), "--data", str(data_dir),
             "--max-steps", "2", "--out", str(half)]
        )
        == 0
    )
    resumed = tmp_path / "resumed"
    assert (
        main(
            ["train", "--config", str(config_path), "--data", str(data_dir),
             "--resume", str(half / "checkpoint.eem"), "--out", str(resumed)]
        )
        == 0
    )
    assert (resumed / "checkpoint.eem").read_bytes() == (full / "checkpoint.eem").read_bytes()
    assert (resumed / "loss_log.csv").read_bytes() == (full / "loss_log.csv").read_bytes()


# ---------------------------------------------------------------------------
# inference commands


def test_reconstruct_rerun_identical(tmp_path, model_dir, take_path):
    out = tmp_path / "rec"
    flags = [
        "reconstruct", "--model", str(model_dir / "checkpoint.eem"),
        "--input", str(take_path), "--frames", "10", "--seed", "5", "--out", str(out),
    ]
    assert main(flags) == 0
    motion = load_motion(out / "motion.eem", SKEL)
    assert len(motion) == 10
    first = _tree_bytes(out)
    shutil.rmtree(out)
    assert main(flags) == 0
    assert _tree_bytes(out) == first


def test_forecast_prefix_equals_reconstruct(tmp_path, model_dir, take_path):
    rec = tmp_path / "rec"
    fc = tmp_path / "fc"
    model = str(model_dir / "checkpoint.eem")
    assert (
        main(["reconstruct", "--model", model, "--input", str(take_path),
              "--frames", "10", "--seed", "9", "--out", str(rec)])
        == 0
    )
    assert (
        main(["forecast", "--model", model, "--input", str(take_path),
              "--observe", "1.0", "--frames", "20", "--seed", "9", "--out", str(fc)])
        == 0
    )
    ra, _ = read_container(rec / "motion.eem")
    fa, _ = read_container(fc / "motion.eem")
    assert fa["root_rotation"].shape[0] == 20
    for key in ("root_rotation", "root_translation", "joint_angles"):
        np.testing.assert_array_equal(fa[key][:10], ra[key])
    np.testing.assert_array_equal(fa["shape"], ra["shape"])


def test_forecast_observe_too_long_is_usage_error(tmp_path, model_dir, take_path):
    code = main(
        ["forecast", "--model", str(model_dir / "checkpoint.eem"), "--input", str(take_path),
         "--observe", "8.0", "--out", str(tmp_path / "fc")]
    )
    assert code == 1


def test_generate_seed_determinism(tmp_path, model_dir, take_path):
    model = str(model_dir / "checkpoint.eem")
    outs = []
    for name, seed in (("a", "11"), ("b", "11"), ("c", "12")):
        out = tmp_path / name
        assert (
            main(["generate", "--model", model, "--image-feature", str(take_path),
                  "--frames", "12", "--seed", seed, "--out", str(out)])
            == 0
        )
        outs.append((out / "motion.eem").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0] != outs[2]


def test_generate_feature_width_mismatch_is_data_error(tmp_path, model_dir):
    feat = tmp_path / "feat.eem"
    write_container(feat, {"feature": np.zeros(8, np.float32)}, {"kind": "image_feature"})
    code = main(
        ["generate", "--model", str(model_dir / "checkpoint.eem"),
         "--image-feature", str(feat), "--out", str(tmp_path / "gen")]
    )
    assert code == 2


def test_skeleton_mismatch_is_data_error(tmp_path, model_dir, take_path):
    arrays, meta = read_container(take_path)
    meta = dict(meta)
    meta["skeleton"] = "chain5"
    bad = tmp_path / "bad_take.eem"
    write_container(bad, arrays, meta)
    code = main(
        ["reconstruct", "--model", str(model_dir / "checkpoint.eem"),
         "--input", str(bad), "--out", str(tmp_path / "rec")]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# eval


@pytest.fixture(scope="module")
def motions_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "motions"
    out.mkdir()
    rng = np.random.default_rng(7)
    for k in range(40):
        save_motion(out / f"clip_{k:03d}.eem", random_motion(rng, SKEL, n_frames=30))
    return out


@pytest.fixture(scope="module")
def encoder_path(tmp_path_factory, motions_dir):
    out = tmp_path_factory.mktemp("cli") / "encoder"
    code = main(
        ["train-encoder", "--data", str(motions_dir), "--window-frames", "20",
         "--stride", "10", "--steps", "120", "--width", "64", "--seed", "1",
         "--out", str(out)]
    )
    assert code == 0
    return out / "encoder.eem"


def test_eval_pred_equals_gt(tmp_path, motions_dir, encoder_path):
    report = tmp_path / "report.txt"
    code = main(
        ["eval", "--pred", str(motions_dir), "--gt", str(motions_dir),
         "--encoder", str(encoder_path), "--metrics", "semantic",
         "--report", str(report)]
    )
    assert code == 0
    values = _report_values(report)
    expected = {
        "mpjpe", "mpjpe_pa", "mpjpe_h", "head_rot_err", "head_trans_err",
        "foot_slide", "foot_contact", "semantic_sim", "fid",
    }
    assert expected.issubset(values.keys())
    assert values["mpjpe"] == 0.0
    assert values["fid"] < 1e-3
    assert values["semantic_sim"] > 0.999
    assert report.with_name(report.name + ".per_clip.csv").is_file()
    manifest = json.loads(report.with_name(report.name + ".manifest.json").read_text())
    assert manifest["command"] == "eval"


def test_eval_clip_count_mismatch_is_data_error(tmp_path, motions_dir):
    fewer = tmp_path / "fewer"
    fewer.mkdir()
    for p in sorted(motions_dir.glob("*.eem"))[:5]:
        shutil.copy(p, fewer / p.name)
    code = main(
        ["eval", "--pred", str(motions_dir), "--gt", str(fewer),
         "--report", str(tmp_path / "r.txt")]
    )
    assert code == 2


def test_eval_semantic_without_encoder_is_usage_error(tmp_path, motions_dir):
    code = main(
        ["eval", "--pred", str(motions_dir), "--gt", str(motions_dir),
         "--metrics", "semantic", "--report", str(tmp_path / "r.txt")]
    )
    assert code == 1


# ---------------------------------------------------------------------------
# fit


@pytest.fixture(scope="module")
def fit_scene(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli") / "fit_scene"
    base.mkdir()
    motion = straight_walk_motion(SKEL, n_frames=12, fps=10.0)
    views = make_camera_rig(n_views=4)
    save_rig(base / "rig.eem", views)
    save_motion(base / "init.eem", motion)

    clean = synthesize_keypoints(motion, SKEL, views)
    save_keypoints(base / "kps_clean.eem", clean)
    rng = np.random.default_rng(3)
    dirty = synthesize_keypoints(
        motion, SKEL, views, noise_px=1.0, outlier_frac=0.1, outlier_px=60.0, rng=rng
    )
    save_keypoints(base / "kps_outliers.eem", dirty)
    return base


def test_fit_clean_manifest(tmp_path, fit_scene):
    out = tmp_path / "fit"
    code = main(
        ["fit", "--rig", str(fit_scene / "rig.eem"),
         "--keypoints", str(fit_scene / "kps_clean.eem"),
         "--init", str(fit_scene / "init.eem"), "--out", str(out)]
    )
    assert code == 0
    assert (out / "fitted.eem").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    results = manifest["results"]
    assert results["mean_joint_error_vs_init_m"] < 0.02
    assert results["kept_ranges"] == [[0, 12]]
    assert results["robust"] is False
    assert results["failed_frames"] == []


def test_fit_outlier_manifest_flags_robust(tmp_path, fit_scene):
    out = tmp_path / "fit"
    code = main(
        ["fit", "--rig", str(fit_scene / "rig.eem"),
         "--keypoints", str(fit_scene / "kps_outliers.eem"),
         "--init", str(fit_scene / "init.eem"), "--out", str(out)]
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["results"]["robust"] is True
    assert manifest["results"]["outlier_fraction"] > 0.02


def test_fit_missing_rig_is_data_error(tmp_path, fit_scene):
    code = main(
        ["fit", "--rig", str(fit_scene / "nope.eem"),
         "--keypoints", str(fit_scene / "kps_clean.eem"),
         "--init", str(fit_scene / "init.eem"), "--out", str(tmp_path / "fit")]
    )
    assert code == 2


def test_fit_all_frames_fail_is_numerical_failure(tmp_path, fit_scene):
    # an absurd prior weight overflows the energy on every frame
    rng = np.random.default_rng(1)
    init = random_motion(rng, SKEL, n_frames=12, angle_scale=0.5)
    save_motion(tmp_path / "init.eem", init)
    cfg = tmp_path / "weights.toml"
    cfg.write_text("lambda_pose = 1e308\n")
    code = main(
        ["fit", "--rig", str(fit_scene / "rig.eem"),
         "--keypoints", str(fit_scene / "kps_clean.eem"),
         "--init", str(tmp_path / "init.eem"),
         "--weights-config", str(cfg), "--out", str(tmp_path / "fit")]
    )
    assert code == 3


def test_fit_unknown_weights_key_is_usage_error(tmp_path, fit_scene, capsys):
    cfg = tmp_path / "weights.toml"
    cfg.write_text("lambda_poses = 1.0\n")
    code = main(
        ["fit", "--rig", str(fit_scene / "rig.eem"),
         "--keypoints", str(fit_scene / "kps_clean.eem"),
         "--init", str(fit_scene / "init.eem"),
         "--weights-config", str(cfg), "--out", str(tmp_path / "fit")]
    )
    assert code == 1
    assert "lambda_poses" in capsys.readouterr().err
