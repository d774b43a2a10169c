"""Dataset generation, end-to-end fitting runs and IoU reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .body_model import BodyModel, ModelError, Mesh, load_model, save_model, save_obj, skin
from .camera import CameraParams, dump_cameras, load_cameras
from .correspondence import PairingConfig
from .optim import SolverError, StageSchedule, default_pose_schedule, default_shape_schedule, load_schedules
from .pose_fit import (
    JointObservations,
    PoseFitError,
    PosePriorSpec,
    default_prior_spec,
    dump_joints,
    fit_pose,
    identity_mapping,
    init_cameras,
    load_joints,
    load_mapping,
)
from .shape_fit import ShapeFitError, fit_shape
from .silhouette import MaskFormatError, SilhouetteMask, iou, load_mask, rasterize_silhouette, save_mask
from .synth import a_pose, make_scene, sample_beta

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


class FitFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# reports ---------------------------------------------------------------------


@dataclass
class FrameIoU:
    frame: str
    views: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.views)) if self.views else 0.0


@dataclass
class EvalReport:
    stage: str
    frames: list[FrameIoU] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([f.mean for f in self.frames])) if self.frames else 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "frames": [{"frame": f.frame, "views": [float(v) for v in f.views], "mean": f.mean} for f in self.frames],
            "mean": self.mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["stage"], [FrameIoU(f["frame"], list(f["views"])) for f in d["frames"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "frame", "view", "iou"])
        for f in self.frames:
            for i, v in enumerate(f.views):
                w.writerow([self.stage, f.frame, i, repr(float(v))])
            w.writerow([self.stage, f.frame, "mean", repr(f.mean)])
        w.writerow([self.stage, "sequence", "mean", repr(self.mean)])
        return buf.getvalue()


def eval_iou(mesh: Mesh, cameras: Sequence[CameraParams], masks: Sequence[SilhouetteMask], stage: str = "after_shape", frame: str = "frame") -> EvalReport:
    """Rasterize ``mesh`` in every view and compare with the given masks."""
    if len(cameras) != len(masks):
        raise ValueError(f"{len(cameras)} cameras but {len(masks)} masks")
    views = []
    for i, (cam, mask) in enumerate(zip(cameras, masks)):
        if (mask.width, mask.height) != cam.image_size:
            raise ValueError(f"view {i}: mask is {mask.width}x{mask.height}, camera image is {cam.image_size}")
        views.append(iou(rasterize_silhouette(mesh, cam)[0], mask))
    return EvalReport(stage, [FrameIoU(frame, views)])


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    stages = {r.stage for r in reports}
    if len(stages) > 1:
        raise ValueError(f"cannot merge reports of different stages: {sorted(stages)}")
    return EvalReport(reports[0].stage if reports else "", [f for r in reports for f in r.frames])


# files -----------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_to_json(theta, beta, cameras: Sequence[CameraParams], d=None) -> str:
    doc = {
        "theta": np.asarray(theta, float).reshape(-1, 3).tolist(),
        "beta": np.asarray(beta, float).tolist(),
        "d_norm": float(np.linalg.norm(d)) if d is not None else 0.0,
        "cameras": [c.to_dict() for c in cameras],
    }
    if d is not None and np.any(d):
        doc["d"] = np.asarray(d, float).tolist()
    return json.dumps(doc, indent=1)


def params_from_json(text: str):
    doc = json.loads(text)
    d = np.asarray(doc["d"], float) if "d" in doc else None
    return np.asarray(doc["theta"], float), np.asarray(doc["beta"], float), [CameraParams.from_dict(c) for c in doc["cameras"]], d


def _write(path: Path, data: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)
    return path


def write_manifest(out_dir: Path, artifacts: Sequence[Path], inputs: Sequence[Path] = (), extra: Optional[dict] = None) -> Path:
    out_dir = Path(out_dir)
    doc = {
        "version": __version__,
        "artifacts": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in artifacts},
        "inputs": {os.path.relpath(p, out_dir): sha256_file(p) for p in inputs},
    }
    if extra:
        doc.update(extra)
    return _write(out_dir / "manifest.json", json.dumps(doc, indent=1, sort_keys=True))


# synthetic data ----------------------------------------------------------------


def synth_generate(
    model: BodyModel,
    n_subjects: int,
    n_views: int,
    out_dir: str | Path,
    pose=None,
    radius_factor: float = 3.0,
    image_size: tuple[int, int] = (512, 512),
    seed: int = 0,
) -> list[Path]:
    """Write a seeded synthetic dataset; returns the per-subject run configs."""
    if n_views < 1:
        raise ValueError("n_views must be at least 1")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    model_path = _write(out / "model.json", save_model(model))
    mapping_path = _write(out / "mapping.json", json.dumps(identity_mapping(model), indent=1))
    theta = a_pose(model) if pose is None else np.asarray(pose, float)
    configs, artifacts = [], [model_path, mapping_path]
    for s in range(n_subjects):
        beta = sample_beta(model, rng)
        scene = make_scene(model, beta, n_views, radius_factor, image_size, theta=theta)
        sub = out / f"subject_{s:03d}"
        files = [
            _write(sub / "gt.json", params_to_json(scene.theta, scene.beta, scene.cameras)),
            _write(sub / "joints.json", dump_joints(scene.joints)),
            _write(sub / "cameras.json", dump_cameras(scene.cameras)),
        ]
        masks = []
        for i, m in enumerate(scene.masks):
            masks.append(_write(sub / f"mask_{i}.pgm", save_mask(m)))
        cfg = {
            "model": "../model.json",
            "mapping": "../mapping.json",
            "joints": "joints.json",
            "cameras": "cameras.json",
            "masks": [p.name for p in masks],
            "output_dir": "fit",
            "dataset": "synthetic",
            "seed": seed,
        }
        files.append(_write(sub / "config.json", json.dumps(cfg, indent=1)))
        configs.append(files[-1])
        artifacts += files + masks
    write_manifest(out, artifacts, extra={"seed": seed, "subjects": n_subjects, "views": n_views})
    return configs


# fitting runs ------------------------------------------------------------------


@dataclass
class RunConfig:
    model: Path
    joints: Path
    masks: list[Path]
    cameras: Path
    output_dir: Path
    schedule: Optional[Path] = None
    mapping: Optional[Path] = None
    pairing: PairingConfig = field(default_factory=PairingConfig)
    seed: int = 0
    dataset: str = "synthetic"
    optimize_offsets: bool = False
    rebuilds_per_stage: int = 1
    prior: Optional[PosePriorSpec] = None

    def input_files(self) -> list[Path]:
        files = [self.model, self.joints, self.cameras, *self.masks]
        return files + [p for p in (self.schedule, self.mapping) if p is not None]


_CONFIG_KEYS = {
    "model", "joints", "masks", "cameras", "output_dir", "schedule", "mapping", "pairing", "seed",
    "dataset", "optimize_offsets", "rebuilds_per_stage", "prior",
}


def load_run_config(path: str | Path) -> RunConfig:
    """Read a run config; relative paths resolve against the config's folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = [k for k in ("model", "joints", "masks", "cameras") if k not in doc]
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")
    base = path.parent

    def resolve(p):
        return (base / p) if p is not None else None

    try:
        pairing = PairingConfig.from_dict(doc.get("pairing", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: pairing: {e}") from e
    prior = None
    if "prior" in doc:
        pr = doc["prior"]
        prior = PosePriorSpec(tuple(int(i) for i in pr["indices"]), float(pr.get("alpha", 10.0)),
                              tuple(float(s) for s in pr["signs"]) if "signs" in pr else None)
    if doc.get("dataset", "synthetic") not in ("synthetic", "real"):
        raise ConfigError(f"{path}: dataset must be 'synthetic' or 'real'")
    cfg = RunConfig(
        model=resolve(doc["model"]),
        joints=resolve(doc["joints"]),
        masks=[resolve(m) for m in doc["masks"]],
        cameras=resolve(doc["cameras"]),
        output_dir=resolve(doc.get("output_dir", "fit")),
        schedule=resolve(doc.get("schedule")),
        mapping=resolve(doc.get("mapping")),
        pairing=pairing,
        seed=int(doc.get("seed", 0)),
        dataset=doc.get("dataset", "synthetic"),
        optimize_offsets=bool(doc.get("optimize_offsets", False)),
        rebuilds_per_stage=int(doc.get("rebuilds_per_stage", 1)),
        prior=prior,
    )
    for f in cfg.input_files():
        if not f.is_file():
            raise ConfigError(f"{path}: referenced file does not exist: {f}")
    return cfg


@dataclass
class RunInputs:
    model: BodyModel
    joints: JointObservations
    masks: list[SilhouetteMask]
    intrinsics: list[CameraParams]
    mapping: dict[str, int]
    pose_schedule: StageSchedule
    shape_schedule: StageSchedule


def load_inputs(cfg: RunConfig) -> RunInputs:
    def parse(path, what, fn):
        try:
            return fn(path)
        except (ValueError, KeyError, TypeError, ModelError, MaskFormatError) as e:
            raise ConfigError(f"cannot parse {what} {path}: {e}") from e

    model = parse(cfg.model, "model", lambda p: load_model(p.read_text()))
    joints = parse(cfg.joints, "joints", lambda p: load_joints(p.read_text()))
    masks = [parse(m, "mask", lambda p: load_mask(p.read_bytes())) for m in cfg.masks]
    cams, _ = parse(cfg.cameras, "cameras", lambda p: load_cameras(p.read_text()))
    mapping = parse(cfg.mapping, "mapping", lambda p: load_mapping(p.read_text(), model)) if cfg.mapping else identity_mapping(model)
    if cfg.schedule:
        pose_s, shape_s = parse(cfg.schedule, "schedule", lambda p: load_schedules(p.read_text()))
    else:
        pose_s, shape_s = default_pose_schedule(), default_shape_schedule(cfg.dataset)
    n = {len(cams), len(masks), joints.num_views}
    if len(n) != 1:
        raise ConfigError(f"view counts differ: {len(cams)} cameras, {len(masks)} masks, {joints.num_views} joint views")
    for i, (c, m) in enumerate(zip(cams, masks)):
        if (m.width, m.height) != c.image_size:
            raise ConfigError(f"view {i}: mask {cfg.masks[i]} is {m.width}x{m.height}, camera expects {c.image_size}")
    return RunInputs(model, joints, masks, cams, mapping, pose_s, shape_s)


def _initial_cameras(inp: RunInputs) -> list[CameraParams]:
    cams = []
    for i, c in enumerate(inp.intrinsics):
        single = JointObservations((inp.joints.views[i],))
        cams += init_cameras(inp.model, single, inp.mapping, c.focal, c.image_size, c.principal_point)
    return cams


def _trace_rows(traces) -> list[dict]:
    return [
        {"weights": t.weights, "sigma": t.stage.sigma, "energies": t.energies, "iterations": t.iterations, "accepted": t.accepted}
        for t in traces
    ]


@dataclass
class RunResult:
    output_dir: Path
    pose_report: EvalReport
    shape_report: EvalReport
    seconds: float


def run_fit(cfg: RunConfig, optimize_offsets: Optional[bool] = None) -> RunResult:
    """init_cameras -> fit_pose -> fit_shape, writing all artifacts."""
    start = time.perf_counter()
    inp = load_inputs(cfg)
    offsets = cfg.optimize_offsets if optimize_offsets is None else optimize_offsets
    model = inp.model
    prior = cfg.prior or default_prior_spec(model)
    if any(not 0 <= i < 3 * model.num_joints for i in prior.indices):
        raise ConfigError(f"prior indices must lie in [0, {3 * model.num_joints})")
    try:
        cams0 = _initial_cameras(inp)
    except PoseFitError as e:
        raise FitFailure("init_cameras", str(e)) from e
    try:
        pose = fit_pose(model, inp.joints, inp.mapping, cams0, inp.pose_schedule, prior)
    except (PoseFitError, SolverError, np.linalg.LinAlgError) as e:
        raise FitFailure("fit_pose", str(e)) from e
    try:
        shape = fit_shape(model, pose.theta, pose.cameras, inp.masks, pose.beta, inp.shape_schedule, cfg.pairing,
                          offsets, rebuilds_per_stage=cfg.rebuilds_per_stage)
    except (ShapeFitError, SolverError, np.linalg.LinAlgError) as e:
        raise FitFailure("fit_shape", str(e)) from e

    out = Path(cfg.output_dir)
    d = shape.d if offsets else None
    pose_mesh = skin(model, pose.theta, pose.beta)
    final_mesh = skin(model, pose.theta, shape.beta, d)
    frame = Path(cfg.joints).parent.name or "frame"
    pose_report = eval_iou(pose_mesh, pose.cameras, inp.masks, "pose_only", frame)
    shape_report = eval_iou(final_mesh, pose.cameras, inp.masks, "after_shape", frame)
    artifacts = [
        _write(out / "params_pose.json", params_to_json(pose.theta, pose.beta, pose.cameras)),
        _write(out / "params.json", params_to_json(pose.theta, shape.beta, pose.cameras, d)),
        _write(out / "mesh_pose.obj", save_obj(pose_mesh)),
        _write(out / "mesh.obj", save_obj(final_mesh)),
        _write(out / "traces.json", json.dumps(
            {"pose": _trace_rows(pose.traces), "shape": _trace_rows(shape.traces),
             "shape_pairs": [list(c) for c in shape.pair_counts]}, indent=1)),
        _write(out / "report.json", json.dumps(
            {"pose_only": pose_report.to_dict(), "after_shape": shape_report.to_dict()}, indent=1)),
        _write(out / "report.csv", pose_report.to_csv() + shape_report.to_csv()),
    ]
    write_manifest(out, artifacts, cfg.input_files(), {"seed": cfg.seed, "optimize_offsets": offsets})
    return RunResult(out, pose_report, shape_report, time.perf_counter() - start)


def evaluate_run(cfg: RunConfig, params_path: Optional[Path] = None) -> EvalReport:
    """Recompute the after-shape report of a finished run from its outputs."""
    inp = load_inputs(cfg)
    path = params_path or Path(cfg.output_dir) / "params.json"
    try:
        theta, beta, cams, d = params_from_json(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"no fitted parameters at {path}") from e
    mesh = skin(inp.model, theta, beta, d)
    return eval_iou(mesh, cams, inp.masks, "after_shape", Path(cfg.joints).parent.name or "frame")
