"""Pinhole cameras, axis-angle rotations and Plücker lines.

Image coordinates have their origin at the top-left corner, +x to the right and
+y down. Pixel ``(u, v)`` covers ``[u, u+1) x [v, v+1)``; its center is at
``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

MIN_DEPTH = 1e-6
_SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 0.05


class BehindCameraError(ValueError):
    """A point sits at or behind the camera plane."""


class NotARotationError(ValueError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


_GENERATORS = np.stack([skew(e) for e in np.eye(3)])


def _coefficients(angle: float) -> tuple[float, float, float, float]:
    """Rodrigues coefficients A = sin t / t, B = (1 - cos t) / t^2 and the
    radial derivatives C = A'/t, D = B'/t, all stable near zero."""
    t2 = angle * angle
    if angle < _SMALL_ANGLE:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = np.sin(angle) / angle
        b = 2.0 * np.sin(0.5 * angle) ** 2 / t2
    if angle < _SERIES_ANGLE:
        c = -1 / 3 + t2 / 30 - t2**2 / 840 + t2**3 / 45360 - t2**4 / 3991680
        d = -1 / 12 + t2 / 180 - t2**2 / 6720 + t2**3 / 453600 - t2**4 / 47900160
    else:
        c = (angle * np.cos(angle) - np.sin(angle)) / (t2 * angle)
        d = (angle * np.sin(angle) - 2.0 * (1.0 - np.cos(angle))) / (t2 * t2)
    return a, b, c, d


def rodrigues(axis_angle: Sequence[float]) -> np.ndarray:
    """Rotation matrix of an axis-angle vector."""
    v = np.asarray(axis_angle, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"axis-angle must be 3 finite reals, got {v!r}")
    a, b, _, _ = _coefficients(float(np.linalg.norm(v)))
    k = skew(v)
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_with_jacobian(axis_angle: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its derivative ``dR[i] = dR / dv_i`` (shape 3x3x3)."""
    v = np.asarray(axis_angle, dtype=float)
    a, b, c, d = _coefficients(float(np.linalg.norm(v)))
    k = skew(v)
    k2 = k @ k
    rot = np.eye(3) + a * k + b * k2
    gk = _GENERATORS @ k
    kg = k @ _GENERATORS
    jac = (
        a * _GENERATORS
        + b * (gk + kg)
        + (c * v)[:, None, None] * k
        + (d * v)[:, None, None] * k2
    )
    return rot, jac


def rodrigues_batch(axis_angles: np.ndarray) -> np.ndarray:
    return np.stack([rodrigues(v) for v in np.asarray(axis_angles, dtype=float).reshape(-1, 3)])


def rodrigues_inv(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle vector (angle in [0, pi]) of a rotation matrix."""
    r = np.asarray(rotation, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise NotARotationError("expected a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(r) - 1.0) > 1e-8:
        raise NotARotationError("matrix is not orthonormal with determinant +1")
    return Rotation.from_matrix(r).as_rotvec()


@dataclass(frozen=True)
class CameraParams:
    focal: float
    principal_point: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_size: tuple[int, int] = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=float).reshape(2))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def rotation_matrix(self) -> np.ndarray:
        return rodrigues(self.rotation)

    def with_extrinsics(self, rotation, translation) -> "CameraParams":
        return replace(self, rotation=np.asarray(rotation, float), translation=np.asarray(translation, float))

    def matrix(self) -> np.ndarray:
        """3x4 homogeneous projection matrix K [R | t]."""
        k = np.array(
            [[self.focal, 0.0, self.principal_point[0]], [0.0, self.focal, self.principal_point[1]], [0.0, 0.0, 1.0]]
        )
        return k @ np.hstack([self.rotation_matrix, self.translation[:, None]])

    def to_dict(self) -> dict:
        return {
            "focal": float(self.focal),
            "principal_point": [float(x) for x in self.principal_point],
            "rotation_axis_angle": [float(x) for x in self.rotation],
            "translation": [float(x) for x in self.translation],
            "image_size": [self.width, self.height],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(
            focal=float(d["focal"]),
            principal_point=d["principal_point"],
            rotation=d.get("rotation_axis_angle") or np.zeros(3),
            translation=d.get("translation") or np.zeros(3),
            image_size=tuple(d["image_size"]),
        )


def load_cameras(text: str) -> tuple[list[CameraParams], list[bool]]:
    """Parse a camera file. Returns cameras and, per view, whether extrinsics were given."""
    doc = json.loads(text)
    if not isinstance(doc, list) or not doc:
        raise ValueError("camera file must be a non-empty JSON array")
    given = ["rotation_axis_angle" in d and "translation" in d for d in doc]
    return [CameraParams.from_dict(d) for d in doc], given


def dump_cameras(cameras: Sequence[CameraParams], extrinsics: bool = True) -> str:
    out = []
    for cam in cameras:
        d = cam.to_dict()
        if not extrinsics:
            del d["rotation_axis_angle"], d["translation"]
        out.append(d)
    return json.dumps(out, indent=1)


def to_camera_frame(camera: CameraParams, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=float) @ camera.rotation_matrix.T + camera.translation


def project(camera: CameraParams, points: np.ndarray) -> np.ndarray:
    """Perspective projection of world points (shape (..., 3)) to pixels."""
    pts = np.asarray(points, dtype=float)
    pc = to_camera_frame(camera, pts)
    if np.any(pc[..., 2] <= MIN_DEPTH):
        raise BehindCameraError("point at or behind the camera plane")
    return camera.focal * pc[..., :2] / pc[..., 2:3] + camera.principal_point


def project_with_jacobian(camera: CameraParams, points: np.ndarray):
    """Project ``(N, 3)`` points and differentiate.

    Returns ``(uv, valid, d_point, d_rotation, d_translation)`` where the
    derivatives have shape ``(N, 2, 3)``. Points with non-positive depth are
    flagged invalid; their entries are left at zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rot, drot = rodrigues_with_jacobian(camera.rotation)
    pc = pts @ rot.T + camera.translation
    z = pc[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    f = camera.focal
    uv = f * pc[:, :2] / zs[:, None] + camera.principal_point
    d_pc = np.zeros((len(pts), 2, 3))
    d_pc[:, 0, 0] = f / zs
    d_pc[:, 1, 1] = f / zs
    d_pc[:, :, 2] = -f * pc[:, :2] / (zs * zs)[:, None]
    d_pc[~valid] = 0.0
    uv[~valid] = 0.0
    d_point = d_pc @ rot
    # d pc / d rotation_i = dR_i @ X
    dpc_drot = np.einsum("iab,nb->nai", drot, pts)
    d_rotation = d_pc @ dpc_drot
    return uv, valid, d_point, d_rotation, d_pc


def camera_center(camera: CameraParams) -> np.ndarray:
    return -camera.rotation_matrix.T @ camera.translation


def pixel_ray(camera: CameraParams, pixel: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Ray (origin, unit direction) in world coordinates through a pixel."""
    u, v = pixel
    d = np.array([(u - camera.principal_point[0]) / camera.focal, (v - camera.principal_point[1]) / camera.focal, 1.0])
    d /= np.linalg.norm(d)
    return camera_center(camera), camera.rotation_matrix.T @ d


@dataclass(frozen=True)
class PluckerLine:
    direction: np.ndarray
    moment: np.ndarray


def plucker_from_ray(origin: Sequence[float], direction: Sequence[float]) -> PluckerLine:
    d = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(d)
    if not norm > 0:
        raise ValueError("ray direction must be nonzero")
    n = d / norm
    m = np.cross(np.asarray(origin, dtype=float), n)
    # remove the round-off component along n so that m . n == 0
    m = m - np.dot(m, n) * n
    return PluckerLine(n, m)


def point_line_residual(point: Sequence[float], line: PluckerLine) -> np.ndarray:
    """Residual vector ``p x n - m``; its norm is the point-to-line distance."""
    return np.cross(np.asarray(point, dtype=float), line.direction) - line.moment
