"""Pairs between model contour vertices and silhouette boundary points.

2D pairs match a vertex's projection to the nearest boundary pixel. 3D pairs
live in the canonical (unposed) frame of the vertex: the camera ray through the
vertex becomes a Plücker line there, and the boundary pixel is backprojected at
the vertex's depth and unposed with the same transform.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .body_model import (
    DEGENERATE_CONDITION,
    BodyModel,
    DegenerateSkinningError,
    Mesh,
    blended_transforms,
    pose_blend,
    skin,
)
from .camera import CameraParams, PluckerLine, camera_center, pixel_ray, plucker_from_ray, project, to_camera_frame
from .silhouette import DepthMap, SilhouetteMask, boundary_crossings, boundary_pixels, boundary_points, rasterize_silhouette

log = logging.getLogger(__name__)

MAX_PIXEL_DISTANCE = 20.0
DEPTH_TOLERANCE = 1e-3


@dataclass(frozen=True)
class PairingConfig:
    distance_threshold: float = 0.02  # fraction of the bounding-box diagonal
    normal_epsilon: float = 0.15
    max_pairs_per_vertex: int = 1
    # keep only contour vertices that project next to the model's own silhouette edge
    require_silhouette_edge: bool = True
    edge_distance_px: float = 1.0
    # pair against points on the half-coverage contour instead of pixel centers
    subpixel_targets: bool = True

    def __post_init__(self):
        if not (self.distance_threshold > 0 and self.normal_epsilon > 0 and self.max_pairs_per_vertex >= 1):
            raise ValueError("pairing thresholds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PairingConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown pairing options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Correspondence3D:
    vertex: int
    view: int
    canonical_line: PluckerLine
    canonical_point: np.ndarray
    canonical_origin: np.ndarray  # camera center in the vertex's canonical frame

    def residual(self) -> np.ndarray:
        return np.cross(self.canonical_point, self.canonical_line.direction) - self.canonical_line.moment


@dataclass(frozen=True)
class Correspondence2D:
    vertex: int
    view: int
    boundary_point: np.ndarray  # pixel center of a boundary pixel
    target: np.ndarray  # point the projection is pulled toward

    @property
    def distance_target(self) -> np.ndarray:
        return self.target


def contour_vertices(mesh: Mesh, camera: CameraParams, depth: DepthMap, cfg: PairingConfig) -> np.ndarray:
    """Vertices whose normal is nearly perpendicular to the viewing ray and that
    are not hidden behind other surfaces."""
    if mesh.normals is None:
        raise ValueError("mesh needs vertex normals")
    view = mesh.vertices - camera_center(camera)
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    facing = np.abs(np.einsum("ij,ij->i", mesh.normals, view))
    cand = np.flatnonzero(facing < cfg.normal_epsilon)
    if cand.size == 0:
        return cand
    pc = to_camera_frame(camera, mesh.vertices[cand])
    ahead = pc[:, 2] > 1e-6
    cand, pc = cand[ahead], pc[ahead]
    uv = camera.focal * pc[:, :2] / pc[:, 2:3] + camera.principal_point
    px = np.floor(uv).astype(np.int64)
    h, w = depth.depth.shape
    # a contour vertex straddles pixels, so test against the farthest surface
    # in its 3x3 neighborhood; background never occludes
    padded = np.pad(np.where(np.isfinite(depth.depth), depth.depth, -np.inf), 1, constant_values=-np.inf)
    far = np.full(len(cand), -np.inf)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            x = np.clip(px[:, 0] + dx, -1, w) + 1
            y = np.clip(px[:, 1] + dy, -1, h) + 1
            far = np.maximum(far, padded[y, x])
    visible = (far == -np.inf) | (pc[:, 2] <= far + DEPTH_TOLERANCE)
    cand, px = cand[visible], px[visible]
    if cfg.require_silhouette_edge and cand.size:
        background = ~np.isfinite(depth.depth)
        r = int(np.ceil(cfg.edge_distance_px))
        near = np.pad(background, r, constant_values=True)
        hit = np.zeros(len(cand), dtype=bool)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dx * dx + dy * dy > cfg.edge_distance_px**2:
                    continue
                x = np.clip(px[:, 0] + dx + r, 0, w + 2 * r - 1)
                y = np.clip(px[:, 1] + dy + r, 0, h + 2 * r - 1)
                hit |= near[y, x]
        cand = cand[hit]
    return cand


def _unposing(model: BodyModel, theta, beta, vertices: np.ndarray):
    """Inverse blended linear parts, translations and pose-blend rows of ``vertices``."""
    a = blended_transforms(model, theta, beta)[vertices]
    lin = a[:, :3, :3]
    cond = np.linalg.cond(lin)
    ok = np.isfinite(cond) & (cond <= DEGENERATE_CONDITION)
    inv = np.zeros_like(lin)
    if np.any(ok):
        inv[ok] = np.linalg.inv(lin[ok])
    return inv, a[:, :3, 3], pose_blend(model, theta)[vertices], ok


def backproject_boundary(model, theta, beta, camera: CameraParams, boundary_point, matched_vertex: int, posed_mesh: Mesh) -> np.ndarray:
    """Canonical point of a boundary pixel at the matched vertex's distance
    from the camera."""
    c = camera_center(camera)
    dist = np.linalg.norm(posed_mesh.vertices[matched_vertex] - c)
    if to_camera_frame(camera, posed_mesh.vertices[matched_vertex : matched_vertex + 1])[0, 2] <= 0:
        raise ValueError("matched vertex is behind the camera")
    _, ray = pixel_ray(camera, boundary_point)
    world = c + dist * ray
    inv, trans, bp, ok = _unposing(model, theta, beta, np.array([matched_vertex]))
    if not ok[0]:
        raise DegenerateSkinningError(f"vertex {matched_vertex} has a degenerate skinning transform")
    return inv[0] @ (world - trans[0]) - bp[0]


def _nearest(tree: cKDTree, query: np.ndarray, k: int):
    """k nearest boundary points; equal distances resolve to the lowest index."""
    kk = min(k + 2, tree.n)
    dist, idx = tree.query(query, k=kk)
    dist = dist.reshape(len(query), kk)
    idx = idx.reshape(len(query), kk)
    out_d = np.empty((len(query), min(k, kk)))
    out_i = np.empty((len(query), min(k, kk)), dtype=np.int64)
    for q in range(len(query)):
        o = np.lexsort((idx[q], dist[q]))[: out_d.shape[1]]
        out_d[q], out_i[q] = dist[q, o], idx[q, o]
    return out_d, out_i


def build_view(model: BodyModel, theta, beta, camera: CameraParams, mask: SilhouetteMask, view: int, cfg: PairingConfig, bbox_diagonal: float, mesh: Mesh | None = None):
    if (mask.width, mask.height) != camera.image_size:
        raise ValueError(f"view {view}: mask is {mask.width}x{mask.height} but camera expects {camera.image_size}")
    mesh = skin(model, theta, beta, normals=True) if mesh is None else mesh
    if cfg.subpixel_targets:
        centers, targets = boundary_crossings(mask)
    else:
        centers = boundary_points(mask)
        targets = centers
    if len(centers) == 0:
        log.warning("view %d: empty mask, no correspondences", view)
        return [], []
    _, depth = rasterize_silhouette(mesh, camera)
    verts = contour_vertices(mesh, camera, depth, cfg)
    if verts.size == 0:
        return [], []
    uv = project(camera, mesh.vertices[verts])
    dist, idx = _nearest(cKDTree(targets), uv, cfg.max_pairs_per_vertex)
    c = camera_center(camera)
    inv, trans, bp, ok = _unposing(model, theta, beta, verts)
    rot = camera.rotation_matrix
    p3, p2 = [], []
    limit = cfg.distance_threshold * bbox_diagonal
    for row, v in enumerate(verts):
        if not ok[row]:
            log.debug("view %d: vertex %d has a degenerate transform, skipped", view, v)
            continue
        vw = mesh.vertices[v]
        reach = np.linalg.norm(vw - c)
        origin = inv[row] @ (c - trans[row]) - bp[row]
        line = plucker_from_ray(origin, inv[row] @ (vw - c))
        for dd, b in zip(dist[row], idx[row]):
            if not dd <= MAX_PIXEL_DISTANCE:
                continue
            p2.append(Correspondence2D(int(v), view, centers[b].copy(), targets[b].copy()))
            t = targets[b]
            ray = rot.T @ np.array([(t[0] - camera.principal_point[0]) / camera.focal, (t[1] - camera.principal_point[1]) / camera.focal, 1.0])
            world = c + reach * ray / np.linalg.norm(ray)
            point = inv[row] @ (world - trans[row]) - bp[row]
            if np.linalg.norm(np.cross(point, line.direction) - line.moment) <= limit:
                p3.append(Correspondence3D(int(v), view, line, point, origin))
    return p3, p2


def bounding_box_diagonal(model: BodyModel, beta) -> float:
    verts = skin(model, np.zeros((model.num_joints, 3)), beta).vertices
    return float(np.linalg.norm(np.ptp(verts, axis=0)))


def build_correspondences(model: BodyModel, theta, beta, cameras: Sequence[CameraParams], masks: Sequence[SilhouetteMask], cfg: PairingConfig | None = None, d=None):
    """3D pairs P and 2D pairs Q over all views, ordered by (view, vertex)."""
    cfg = cfg or PairingConfig()
    if len(cameras) != len(masks):
        raise ValueError(f"{len(cameras)} cameras but {len(masks)} masks")
    diag = bounding_box_diagonal(model, beta)
    mesh = skin(model, theta, beta, d, normals=True)
    big_p, big_q = [], []
    for i, (cam, mask) in enumerate(zip(cameras, masks)):
        p3, p2 = build_view(model, theta, beta, cam, mask, i, cfg, diag, mesh)
        big_p += p3
        big_q += p2
    return big_p, big_q


def pairs_to_json(pairs3d: Sequence[Correspondence3D], pairs2d: Sequence[Correspondence2D], cameras: Sequence[CameraParams], mesh: Mesh) -> str:
    """Debug dump of pairs with their current residuals."""
    rows = []
    for p in pairs2d:
        uv = project(cameras[p.view], mesh.vertices[p.vertex : p.vertex + 1])[0]
        rows.append({"kind": "2d", "view": p.view, "vertex": p.vertex, "boundary_uv": [float(x) for x in p.boundary_point],
                     "residual": float(np.linalg.norm(p.target - uv))})
    for p in pairs3d:
        rows.append({"kind": "3d", "view": p.view, "vertex": p.vertex, "boundary_uv": None,
                     "residual": float(np.linalg.norm(p.residual()))})
    return json.dumps(rows, indent=1)


def boundary_membership(pairs2d: Sequence[Correspondence2D], masks: Sequence[SilhouetteMask]) -> bool:
    """True if every 2D pair's boundary point is a boundary pixel center of its view."""
    for p in pairs2d:
        b = boundary_pixels(masks[p.view])
        col, row = int(np.floor(p.boundary_point[0])), int(np.floor(p.boundary_point[1]))
        if not (0 <= row < b.shape[0] and 0 <= col < b.shape[1] and b[row, col]):
            return False
        if not np.allclose(p.boundary_point, (col + 0.5, row + 0.5)):
            return False
    return True
