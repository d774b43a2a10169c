import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from bodyfit.body_model import Mesh, load_model, model_to_dict, skin
from bodyfit.camera import load_cameras, project
from bodyfit.cli import main
from bodyfit.pipeline import (
    EXIT_CONFIG,
    EXIT_FIT,
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    EvalReport,
    FrameIoU,
    eval_iou,
    load_run_config,
    merge_reports,
    params_from_json,
    run_fit,
    sha256_file,
    synth_generate,
)
from bodyfit.pose_fit import load_joints, model_joints_3d
from bodyfit.silhouette import load_mask


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, suite_model):
    root = tmp_path_factory.mktemp("synth")
    configs = synth_generate(suite_model, 2, 4, root, seed=5)
    return root, configs


@pytest.fixture(scope="module")
def fitted(dataset):
    _, configs = dataset
    cfg = load_run_config(configs[0])
    return cfg, run_fit(cfg)


def copy_subject(dataset, tmp_path):
    root, configs = dataset
    dst = tmp_path / "data"
    shutil.copytree(root, dst, ignore=shutil.ignore_patterns("fit"))
    return dst / configs[0].parent.name / "config.json"


def test_synth_files_parse(dataset, suite_model):
    root, configs = dataset
    assert len(configs) == 2
    model = load_model((root / "model.json").read_text())
    for c in configs:
        sub = c.parent
        theta, beta, cams, _ = params_from_json((sub / "gt.json").read_text())
        joints = load_joints((sub / "joints.json").read_text())
        cam_file, _ = load_cameras((sub / "cameras.json").read_text())
        assert joints.num_views == 4 and len(cams) == len(cam_file) == 4
        assert np.all(np.abs(beta) <= 2.0)
        j3 = model_joints_3d(model, theta, beta)
        for cam, view in zip(cams, joints.views):
            uv = project(cam, j3)
            written = np.array([[o.u, o.v] for o in view])
            assert np.abs(uv - written).max() <= 1e-8
        for i in range(4):
            mask = load_mask((sub / f"mask_{i}.pgm").read_bytes())
            assert mask.bits.any() and not mask.bits[0].any() and not mask.bits[-1].any()
    assert json.loads((root / "manifest.json").read_text())["artifacts"]


def test_synth_is_deterministic(tmp_path, suite_model):
    a = synth_generate(suite_model, 1, 2, tmp_path / "a", image_size=(128, 128), seed=9)
    b = synth_generate(suite_model, 1, 2, tmp_path / "b", image_size=(128, 128), seed=9)
    for name in ("gt.json", "joints.json", "mask_0.pgm", "mask_1.pgm"):
        assert (a[0].parent / name).read_bytes() == (b[0].parent / name).read_bytes()


def test_run_fit_quality_and_time(fitted):
    _, res = fitted
    assert res.shape_report.mean >= 0.95
    assert res.seconds < 120.0
    assert res.shape_report.mean >= res.pose_report.mean - 0.01


def test_run_outputs_and_manifest(fitted):
    cfg, res = fitted
    out = Path(res.output_dir)
    for name in ("params_pose.json", "params.json", "mesh_pose.obj", "mesh.obj", "traces.json", "report.json", "report.csv"):
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    for rel, digest in manifest["artifacts"].items():
        assert sha256_file(out / rel) == digest
    assert len(manifest["inputs"]) == len(cfg.input_files())
    report = json.loads((out / "report.json").read_text())
    assert report["after_shape"]["mean"] == res.shape_report.mean


def test_run_is_deterministic(dataset, fitted, tmp_path):
    cfg, res = fitted
    cfg2 = load_run_config(cfg.output_dir.parent / "config.json")
    cfg2.output_dir = tmp_path / "again"
    run_fit(cfg2)
    for name in ("params.json", "params_pose.json", "report.json", "report.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (Path(res.output_dir) / name).read_bytes()


def test_eval_iou_examples(dataset):
    root, configs = dataset
    model = load_model((root / "model.json").read_text())
    sub = configs[0].parent
    theta, beta, cams, _ = params_from_json((sub / "gt.json").read_text())
    masks = [load_mask((sub / f"mask_{i}.pgm").read_bytes()) for i in range(4)]
    rep = eval_iou(skin(model, theta, beta), cams, masks)
    assert all(v >= 0.999 for v in rep.frames[0].views)
    behind = Mesh(np.array([[0.0, 0.0, -50.0], [1.0, 0.0, -50.0], [0.0, 1.0, -50.0]]), np.array([[0, 1, 2]]))
    assert eval_iou(behind, cams[:1], masks[:1]).mean == 0.0
    with pytest.raises(ValueError):
        eval_iou(skin(model, theta, beta), cams, masks[:2])


def test_report_means_match_hand_computation():
    rep = merge_reports([EvalReport("after_shape", [FrameIoU("a", [0.9, 0.8, 0.7, 0.95])]), EvalReport("after_shape", [FrameIoU("b", [0.5, 1.0])])])
    fa = (0.9 + 0.8 + 0.7 + 0.95) / 4
    fb = (0.5 + 1.0) / 2
    assert abs(rep.frames[0].mean - fa) <= 1e-12 and abs(rep.mean - (fa + fb) / 2) <= 1e-12
    again = EvalReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert again.mean == rep.mean
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "stage,frame,view,iou" and rows[-1].startswith("after_shape,sequence,mean,")
    with pytest.raises(ValueError):
        merge_reports([EvalReport("pose_only"), EvalReport("after_shape")])


def test_config_errors(dataset, tmp_path):
    cfg_path = copy_subject(dataset, tmp_path)
    (cfg_path.parent / "mask_2.pgm").unlink()
    with pytest.raises(ConfigError, match="mask_2.pgm"):
        load_run_config(cfg_path)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    bad.write_text(json.dumps({"model": "m.json", "joints": "j.json", "masks": [], "cameras": "c.json", "colour": 1}))
    with pytest.raises(ConfigError, match="colour"):
        load_run_config(bad)


def test_cli_missing_mask_exit_code(dataset, tmp_path, capsys):
    cfg_path = copy_subject(dataset, tmp_path)
    (cfg_path.parent / "mask_1.pgm").unlink()
    assert main(["fit", "--config", str(cfg_path)]) == EXIT_CONFIG
    assert "mask_1.pgm" in capsys.readouterr().err


def test_cli_fit_failure_exit_code(dataset, tmp_path, capsys):
    cfg_path = copy_subject(dataset, tmp_path)
    joints = json.loads((cfg_path.parent / "joints.json").read_text())
    torso = {"neck", "pelvis", "left_shoulder", "right_shoulder", "left_hip", "right_hip"}
    joints = [[o for o in view if o["joint_name"] not in torso] for view in joints]
    (cfg_path.parent / "joints.json").write_text(json.dumps(joints))
    assert main(["fit", "--config", str(cfg_path)]) == EXIT_FIT
    assert "init_cameras" in capsys.readouterr().err


def test_cli_io_error_exit_code(dataset, tmp_path):
    cfg_path = copy_subject(dataset, tmp_path)
    blocker = tmp_path / "blocked"
    blocker.write_text("a file where a folder should go")
    assert main(["fit", "--config", str(cfg_path), "--out", str(blocker)]) == EXIT_IO


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--subjects", "2", "--views", "2", "--image-size", "160", "--vertices", "600", "--seed", "3"]) == EXIT_OK
    configs = capsys.readouterr().out.split()
    assert [Path(c).parent.name for c in configs] == ["subject_000", "subject_001"]
    assert main(["check-model", str(data / "model.json")]) == EXIT_OK
    assert "ok" in capsys.readouterr().out
    args = ["fit", "--jobs", "2", "--out", str(tmp_path / "runs")]
    for c in configs:
        args += ["--config", c]
    assert main(args) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert [Path(line.split(":")[0]).name for line in lines] == ["subject_000", "subject_001"]
    for c in configs:
        shutil.copytree(tmp_path / "runs" / Path(c).parent.name, Path(c).parent / "fit")
    assert main(["eval", str(Path(configs[0]).parent), configs[1], "--out", str(tmp_path / "eval")]) == EXIT_OK
    report = json.loads((tmp_path / "eval" / "eval.json").read_text())
    assert len(report["frames"]) == 2 and 0.0 <= report["mean"] <= 1.0
    out_mask = tmp_path / "view1.pgm"
    params = tmp_path / "runs" / "subject_000" / "params.json"
    assert main(["render-mask", "--model", str(data / "model.json"), "--params", str(params), "--view", "1", "--out", str(out_mask)]) == EXIT_OK
    assert load_mask(out_mask.read_bytes()).bits.any()
    assert main(["render-mask", "--model", str(data / "model.json"), "--params", str(params), "--view", "7", "--out", str(out_mask)]) == EXIT_CONFIG


def test_cli_check_model_rejects_broken(tmp_path, suite_model):
    doc = model_to_dict(suite_model)
    doc["parent"] = [0] + list(doc["parent"][1:])
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(doc))
    assert main(["check-model", str(path)]) == EXIT_CONFIG
