import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from splatkit.cli import build_parser, config_keys, load_config, main
from splatkit.errors import ConfigError
from splatkit.mesh import cleanup_report, read_mesh, write_mesh
from splatkit.trainer import LossTrace, load_checkpoint

from helpers import cube_mesh, random_dirty_mesh


def run_cli(*args, env=None):
    full_env = dict(os.environ, SPLATKIT_LOG_LEVEL="WARNING", **(env or {}))
    return subprocess.run([sys.executable, "-m", "splatkit", *map(str, args)], capture_output=True, text=True,
                          env=full_env)


# ---------------------------------------------------------------------------
# configuration

def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "train": {"iterations": 50, "lambda_dssim": 0.3},
                               "mesh": {"tau": 0.2}}))
    c = load_config(cfg, {"train.iterations": "70", "mesh.ascii": "true"})
    assert c.seed == 5 and c.train.iterations == 70 and c.train.lambda_dssim == 0.3
    assert c.mesh.tau == 0.2 and c.mesh.ascii is True and c.mesh.resolution == 128
    assert c.train_config().seed == 5
    assert load_config().train.iterations == 7000


@pytest.mark.parametrize("data", [{"trian": {"iterations": 5}}, {"train": {"iteratons": 5}}, {"sed": 1},
                                  [1, 2]])
def test_unknown_config_keys_rejected(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_config(cfg)


@pytest.mark.parametrize("override", [{"train.iterations": "many"}, {"split.train": "0.9"},
                                      {"mesh.ascii": "maybe"}, {"nope": 1}, {"train.iterations": "0"}])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(None, override)


def test_help_lists_every_key():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    assert set(subs) == {"import", "prep", "train", "eval", "extract", "clean", "synth"}
    for name, sub in subs.items():
        text = sub.format_help()
        for key in config_keys():
            assert f"--{key}" in text, (name, key)


# ---------------------------------------------------------------------------
# exit codes

def test_unknown_key_exits_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"mesh": {"isovalue": 0.3}}')
    r = run_cli("clean", tmp_path / "m.ply", "-o", tmp_path / "o.ply", "--config", cfg)
    assert r.returncode == 1 and "ConfigError" in r.stderr


def test_usage_errors_exit_1(tmp_path):
    assert run_cli().returncode == 1
    assert run_cli("frobnicate").returncode == 1
    assert run_cli("clean", "m.ply", "--mesh.bogus", "1").returncode == 1


def test_import_missing_points(tmp_path):
    r = run_cli("synth", tmp_path / "s", "--n-gaussians", 3, "--n-views", 3, "--image-size", 16)
    assert r.returncode == 0, r.stderr
    (tmp_path / "s" / "sparse" / "0" / "points3D.bin").unlink()
    r = run_cli("import", tmp_path / "s" / "sparse" / "0")
    assert r.returncode == 2 and r.stderr.startswith("MissingFile")


def test_data_error_exit_2(tmp_path):
    r = run_cli("clean", tmp_path / "absent.ply", "-o", tmp_path / "o.ply")
    assert r.returncode == 2 and "MissingFile" in r.stderr
    (tmp_path / "bad.ply").write_bytes(b"ply\nformat nonsense\n")
    r = run_cli("clean", tmp_path / "bad.ply", "-o", tmp_path / "o.ply")
    assert r.returncode == 2 and not (tmp_path / "o.ply").exists()


def test_clean_is_idempotent(tmp_path):
    dirty = random_dirty_mesh(np.random.default_rng(0))
    write_mesh(tmp_path / "dirty.ply", dirty)
    assert main(["clean", str(tmp_path / "dirty.ply"), "-o", str(tmp_path / "a.ply")]) == 0
    assert main(["clean", str(tmp_path / "a.ply"), "-o", str(tmp_path / "b.ply")]) == 0
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert cleanup_report(read_mesh(tmp_path / "a.ply")).ok


def test_clean_writes_obj_and_ascii(tmp_path):
    write_mesh(tmp_path / "c.ply", cube_mesh())
    assert main(["clean", str(tmp_path / "c.ply"), "-o", str(tmp_path / "c.obj")]) == 0
    assert read_mesh(tmp_path / "c.obj").n_faces == 12
    assert main(["clean", str(tmp_path / "c.ply"), "-o", str(tmp_path / "a.ply"), "--mesh.ascii", "true"]) == 0
    assert b"format ascii 1.0" in (tmp_path / "a.ply").read_bytes()[:100]


def test_paths_from_config(tmp_path):
    write_mesh(tmp_path / "c.ply", cube_mesh())
    assert main(["clean", str(tmp_path / "c.ply"), "--paths.output", str(tmp_path / "d.ply")]) == 0
    assert (tmp_path / "d.ply").exists()
    assert main(["clean", str(tmp_path / "c.ply")]) == 1


# ---------------------------------------------------------------------------
# small end-to-end run

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "train": {"iterations": 40, "sh_degree": 0, "densify_from": 10,
                                                    "densify_interval": 10, "densify_until": 30,
                                                    "eval_interval": 20},
                               "mesh": {"resolution": 40}}))
    c = ["--config", str(cfg)]
    assert main(["synth", str(root / "scene"), "--n-gaussians", "8", "--n-views", "10",
                 "--image-size", "32", *c]) == 0
    assert main(["import", str(root / "scene" / "sparse" / "0"), "-o", str(root / "rig.json"), *c]) == 0
    assert main(["prep", str(root / "scene" / "sparse" / "0"), str(root / "scene" / "images"),
                 str(root / "scene" / "masks"), "-o", str(root / "prep"), *c]) == 0
    assert main(["train", str(root / "prep"), "-o", str(root / "run"), *c]) == 0
    assert main(["eval", str(root / "run" / "checkpoint.ply"), str(root / "prep"), "-o",
                 str(root / "report"), *c]) == 0
    assert main(["extract", str(root / "run" / "checkpoint.ply"), "-o", str(root / "raw.ply"), *c]) == 0
    assert main(["clean", str(root / "raw.ply"), "-o", str(root / "clean.ply"), *c]) == 0
    return root


def test_pipeline_outputs(pipeline):
    rig = json.loads((pipeline / "rig.json").read_text())
    assert rig["n_images"] == 10 and len(rig["cameras"]) == 1
    manifest = (pipeline / "prep" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "video_id,frame_index,image_path,mask_path,split" and len(manifest) == 11
    splits = [line.rsplit(",", 1)[1] for line in manifest[1:]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (8, 1, 1)
    ckpt = load_checkpoint(pipeline / "run" / "checkpoint.ply")
    assert ckpt.metadata["seed"] == 3 and ckpt.metadata["config"]["iterations"] == 40
    trace = LossTrace.from_csv((pipeline / "run" / "loss_trace.csv").read_text())
    assert trace.iterations == [0, 20, 40]
    report = json.loads((pipeline / "report.json").read_text())
    assert report["n_views"] == 1
    assert (pipeline / "report.csv").read_text().startswith("view_id,psnr\n")
    assert cleanup_report(read_mesh(pipeline / "clean.ply")).ok


def test_pipeline_is_rerunnable(pipeline, tmp_path):
    c = ["--config", str(pipeline / "cfg.json")]
    assert main(["train", str(pipeline / "prep"), "-o", str(tmp_path / "run"), *c]) == 0
    for name in ("checkpoint.ply", "checkpoint.json", "loss_trace.csv"):
        assert (tmp_path / "run" / name).read_bytes() == (pipeline / "run" / name).read_bytes()
    assert main(["extract", str(tmp_path / "run" / "checkpoint.ply"), "-o", str(tmp_path / "raw.ply"), *c]) == 0
    assert (tmp_path / "raw.ply").read_bytes() == (pipeline / "raw.ply").read_bytes()


def test_prep_split_depends_on_seed(pipeline, tmp_path):
    scene = pipeline / "scene"
    args = [str(scene / "sparse" / "0"), str(scene / "images"), str(scene / "masks")]
    assert main(["prep", *args, "-o", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (pipeline / "prep" / "manifest.csv").read_bytes()
    assert main(["prep", *args, "-o", str(tmp_path / "b"), "--seed", "4"]) == 0
    assert (tmp_path / "b" / "manifest.csv").read_bytes() != (pipeline / "prep" / "manifest.csv").read_bytes()


def test_numeric_failure_exits_3(pipeline, tmp_path, monkeypatch, capsys):
    from splatkit import cli
    from splatkit.errors import NonFiniteLoss

    def boom(*args, **kwargs):
        raise NonFiniteLoss("loss became nan at iteration 7")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", str(pipeline / "prep"), "-o", str(tmp_path / "run")]) == 3
    assert capsys.readouterr().err.startswith("NonFiniteLoss")
    assert not (tmp_path / "run" / "checkpoint.ply").exists()
