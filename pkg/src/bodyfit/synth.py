"""Synthetic multi-view scenes: A-posed toy subjects seen by a ring of cameras."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .body_model import BodyModel, joints_rest, named_pose, skin
from .camera import CameraParams, project, rodrigues, rodrigues_inv
from .pose_fit import FACING_CAMERA, JointObservation, JointObservations, model_joints_3d
from .silhouette import SilhouetteMask, rasterize_silhouette

A_POSE_ABDUCTION_DEG = 60.0
BETA_RANGE = 2.0


def a_pose(model: BodyModel, abduction_deg: float = A_POSE_ABDUCTION_DEG) -> np.ndarray:
    """Arms lowered from the T-pose to ``abduction_deg`` from vertical, all else zero."""
    drop = np.deg2rad(90.0 - abduction_deg)
    rotations = {}
    if "left_shoulder" in model.joint_names:
        rotations["left_shoulder"] = (0.0, 0.0, -drop)
    if "right_shoulder" in model.joint_names:
        rotations["right_shoulder"] = (0.0, 0.0, drop)
    return named_pose(model, rotations)


def camera_ring(
    model: BodyModel,
    n_views: int,
    beta=None,
    radius_factor: float = 3.0,
    image_size: tuple[int, int] = (512, 512),
    focal: Optional[float] = None,
    fill: float = 0.8,
) -> list[CameraParams]:
    """Cameras evenly spaced on a horizontal circle around the rest-shape
    centroid, at its height, all looking at it. View 0 sits in front (+z).

    The default focal makes the body span ``fill`` of the shorter image side.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    beta = np.zeros(model.num_betas) if beta is None else beta
    verts = skin(model, np.zeros((model.num_joints, 3)), beta).vertices
    center = verts.mean(axis=0)
    height = np.ptp(verts[:, 1])
    radius = radius_factor * height
    if focal is None:
        focal = fill * min(image_size) * radius / height
    pp = np.array([image_size[0] / 2.0, image_size[1] / 2.0])
    cams = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        r = FACING_CAMERA @ rodrigues((0.0, -az, 0.0))
        eye = center + radius * np.array([np.sin(az), 0.0, np.cos(az)])
        cams.append(CameraParams(focal, pp, rodrigues_inv(r), -r @ eye, image_size))
    return cams


def regauge(model: BodyModel, theta, beta, cameras: Sequence[CameraParams]):
    """Re-express a scene so that view 0 has identity rotation.

    The root joint absorbs view 0's rotation; every camera is rotated by its
    inverse about the root, leaving all projections unchanged.
    """
    theta = np.array(theta, dtype=float).reshape(-1, 3)
    r0 = cameras[0].rotation_matrix
    j0 = joints_rest(model, beta)[0]
    theta[0] = rodrigues_inv(r0 @ rodrigues(theta[0]))
    out = []
    for c in cameras:
        r = c.rotation_matrix
        r_new = r @ r0.T
        # the root pivots about j0, which therefore keeps its camera coordinates
        t_new = c.translation + (r - r_new) @ j0
        out.append(c.with_extrinsics(rodrigues_inv(r_new), t_new))
    return theta, out


@dataclass
class Scene:
    model: BodyModel
    theta: np.ndarray
    beta: np.ndarray
    cameras: list[CameraParams]
    joints: JointObservations
    masks: list[SilhouetteMask]


def observe(model: BodyModel, theta, beta, cameras: Sequence[CameraParams]) -> tuple[JointObservations, list[SilhouetteMask]]:
    joints3d = model_joints_3d(model, theta, beta)
    mesh = skin(model, theta, beta)
    views, masks = [], []
    for cam in cameras:
        uv = project(cam, joints3d)
        views.append(tuple(JointObservation(n, float(p[0]), float(p[1]), 1.0) for n, p in zip(model.joint_names, uv)))
        masks.append(rasterize_silhouette(mesh, cam)[0])
    return JointObservations(tuple(views)), masks


def sample_beta(model: BodyModel, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-BETA_RANGE, BETA_RANGE, size=model.num_betas)


def make_scene(
    model: BodyModel,
    beta,
    n_views: int = 4,
    radius_factor: float = 3.0,
    image_size: tuple[int, int] = (512, 512),
    gauge: bool = True,
    theta=None,
) -> Scene:
    """Subject (A-posed unless ``theta`` is given) seen by a camera ring; with
    ``gauge`` the scene is re-expressed so that view 0 has identity rotation."""
    beta = np.asarray(beta, dtype=float)
    theta = a_pose(model) if theta is None else np.asarray(theta, dtype=float).reshape(-1, 3)
    cams = camera_ring(model, n_views, beta, radius_factor, image_size)
    if gauge:
        theta, cams = regauge(model, theta, beta, cams)
    joints, masks = observe(model, theta, beta, cams)
    return Scene(model, theta, beta, cams, joints, masks)
