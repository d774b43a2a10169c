"""Silhouette-driven shape fitting with pose and cameras held fixed.

The energy combines robust 2D and 3D contour correspondences with a Laplacian
smoothness term and a body term on optional per-vertex offsets ``d``.
Correspondences are rebuilt before every stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .body_model import BodyModel, Mesh, linearize_skin, rest_vertices, skin
from .camera import CameraParams, camera_center, project_with_jacobian
from .correspondence import Correspondence2D, Correspondence3D, PairingConfig, build_correspondences
from .optim import DEFAULT_SIGMA_2D, LeastSquaresProblem, ParameterBlock, SolveResult, Stage, StageSchedule, dogleg_minimize, robust_groups
from .silhouette import SilhouetteMask, iou, rasterize_silhouette

log = logging.getLogger(__name__)

BEHIND_CAMERA_RESIDUAL = 10.0  # in units of sigma_2d


class ShapeFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeEnergyWeights:
    w_L: float
    w_B: float
    sigma_3d: float
    sigma_2d: float = DEFAULT_SIGMA_2D

    def __post_init__(self):
        if min(self.w_L, self.w_B, self.sigma_3d, self.sigma_2d) <= 0:
            raise ValueError("shape energy weights must be positive")

    @classmethod
    def from_stage(cls, stage: Stage) -> "ShapeEnergyWeights":
        return cls(stage.weight("w_L"), stage.weight("w_B"), stage.sigma, stage.weight("sigma_2d", DEFAULT_SIGMA_2D))


def build_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Uniform graph Laplacian: ``(L x)_i = x_i - mean of neighbors``."""
    n = len(mesh.vertices)
    f = np.asarray(mesh.faces, dtype=np.int64)
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    adj = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    adj.data[:] = 1.0  # duplicate edges collapse to one
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        log.warning("%d isolated vertices get zero Laplacian rows", int(np.sum(deg == 0)))
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    lap = sp.diags((deg > 0).astype(float)) - sp.diags(inv) @ adj
    return sp.csr_matrix(lap)


def laplacian_term(model: BodyModel, beta, d, lap: sp.spmatrix) -> float:
    """``sum_i |L(t(beta, d))_i - L(t(beta, 0))_i|^2``."""
    diff = lap @ rest_vertices(model, beta, d) - lap @ rest_vertices(model, beta)
    return float(np.sum(diff * diff))


def body_term(model: BodyModel, beta, d) -> float:
    diff = rest_vertices(model, beta, d) - rest_vertices(model, beta)
    return float(np.sum(diff * diff))


@dataclass
class _Pairs:
    """Array form of the correspondence sets."""

    v3: np.ndarray
    view3: np.ndarray
    point3: np.ndarray
    origin3: np.ndarray
    v2: np.ndarray
    view2: np.ndarray
    target2: np.ndarray

    @classmethod
    def pack(cls, p3: Sequence[Correspondence3D], p2: Sequence[Correspondence2D]) -> "_Pairs":
        return cls(
            np.array([p.vertex for p in p3], dtype=np.int64),
            np.array([p.view for p in p3], dtype=np.int64),
            np.array([p.canonical_point for p in p3]).reshape(-1, 3),
            np.array([p.canonical_origin for p in p3]).reshape(-1, 3),
            np.array([p.vertex for p in p2], dtype=np.int64),
            np.array([p.view for p in p2], dtype=np.int64),
            np.array([p.target for p in p2]).reshape(-1, 2),
        )


class ShapeProblem:
    """Residuals over ``x = [beta | d (3V, optional)]`` at a fixed pose.

    Residual layout: 3D pairs (3 each) | 2D pairs (2 each) | Laplacian (3V) |
    body (3V); the last two only when offsets are optimized.
    """

    def __init__(self, model: BodyModel, theta, cameras: Sequence[CameraParams], optimize_offsets: bool = False):
        self.model = model
        self.theta = np.asarray(theta, dtype=float)
        self.cameras = list(cameras)
        self.offsets = optimize_offsets
        self.v0, self.m, self.a = linearize_skin(model, self.theta)
        self.a_inv = np.linalg.inv(self.a)
        self.lap = build_laplacian(Mesh(model.template_vertices, model.faces))
        self.s = model.num_betas
        self.nv = model.num_vertices
        self.n = self.s + (3 * self.nv if optimize_offsets else 0)
        self.pairs = _Pairs.pack([], [])
        self.d_fixed = np.zeros((self.nv, 3))

    def set_pairs(self, p3, p2):
        self.pairs = _Pairs.pack(p3, p2)

    def split(self, x):
        beta = x[: self.s]
        d = x[self.s :].reshape(-1, 3) if self.offsets else self.d_fixed
        return beta, d

    def posed(self, beta, d) -> np.ndarray:
        return self.v0 + self.m @ beta + np.einsum("vab,vb->va", self.a, d)

    def canonical(self, beta, d) -> np.ndarray:
        return rest_vertices(self.model, beta, d)

    # terms -----------------------------------------------------------------

    def silhouette_3d(self, x, sigma_3d, jacobian=True):
        beta, d = self.split(x)
        p = self.pairs
        if len(p.v3) == 0:
            return np.zeros(0), (np.zeros((0, self.n)) if jacobian else None)
        # the canonical frame of a vertex follows its joints as beta moves them,
        # so the ray origin is re-derived from the camera center each evaluation
        inv = self.a_inv[p.v3]
        centers = np.array([camera_center(c) for c in self.cameras])[p.view3]
        u = np.einsum("pab,pb->pa", inv, self.posed(beta, d)[p.v3] - centers)
        norm = np.linalg.norm(u, axis=1)
        n = u / norm[:, None]
        a = p.point3 - p.origin3
        e = np.cross(a, n)
        de = None
        if jacobian:
            # d(a x n)/du = [a]_x (I - n n^T) / |u|
            skew = np.zeros((len(a), 3, 3))
            skew[:, 0, 1], skew[:, 0, 2] = -a[:, 2], a[:, 1]
            skew[:, 1, 0], skew[:, 1, 2] = a[:, 2], -a[:, 0]
            skew[:, 2, 0], skew[:, 2, 1] = -a[:, 1], a[:, 0]
            proj = (np.eye(3)[None] - n[:, :, None] * n[:, None, :]) / norm[:, None, None]
            du = skew @ proj
            de = np.zeros((len(a), 3, self.n))
            de[:, :, : self.s] = du @ inv @ self.m[p.v3]
            if self.offsets:
                # u depends on d_i through A^{-1} A = I
                for c in range(3):
                    de[np.arange(len(a)), :, self.s + 3 * p.v3 + c] = du[:, :, c]
        return robust_groups(e, de, sigma_3d)

    def silhouette_2d(self, x, sigma_2d, jacobian=True):
        beta, d = self.split(x)
        p = self.pairs
        if len(p.v2) == 0:
            return np.zeros(0), (np.zeros((0, self.n)) if jacobian else None)
        verts = self.posed(beta, d)
        e = np.empty((len(p.v2), 2))
        de = np.zeros((len(p.v2), 2, self.n)) if jacobian else None
        for i, cam in enumerate(self.cameras):
            sel = np.flatnonzero(p.view2 == i)
            if not sel.size:
                continue
            vid = p.v2[sel]
            uv, valid, d_pt, _, _ = project_with_jacobian(cam, verts[vid])
            ei = p.target2[sel] - uv
            ei[~valid] = (BEHIND_CAMERA_RESIDUAL * sigma_2d, 0.0)
            e[sel] = ei
            if jacobian:
                d_pt = np.where(valid[:, None, None], d_pt, 0.0)
                de[sel, :, : self.s] = -d_pt @ self.m[vid]
                if self.offsets:
                    dd = -d_pt @ self.a[vid]
                    for c in range(3):
                        de[sel, :, self.s + 3 * vid + c] = dd[:, :, c]
        return robust_groups(e, de, sigma_2d)

    def laplacian_residuals(self, x, w_l, jacobian=True):
        beta, d = self.split(x)
        c = np.sqrt(w_l)
        r = c * (self.lap @ self.canonical(beta, d) - self.lap @ self.canonical(beta, np.zeros_like(d))).reshape(-1)
        if not jacobian:
            return r, None
        jd = c * sp.kron(self.lap, sp.identity(3), format="csr")
        # the beta dependence cancels between the two Laplacian evaluations
        jb = sp.csr_matrix((3 * self.nv, self.s))
        return r, sp.hstack([jb, jd] if self.offsets else [jb], format="csr")

    def body_residuals(self, x, w_b, jacobian=True):
        beta, d = self.split(x)
        c = np.sqrt(w_b)
        r = c * (self.canonical(beta, d) - self.canonical(beta, np.zeros_like(d))).reshape(-1)
        if not jacobian:
            return r, None
        jb = sp.csr_matrix((3 * self.nv, self.s))
        jd = c * sp.identity(3 * self.nv, format="csr")
        return r, sp.hstack([jb, jd] if self.offsets else [jb], format="csr")

    # solver interface ------------------------------------------------------

    def _evaluate(self, x, stage: Stage, jacobian: bool):
        w = ShapeEnergyWeights.from_stage(stage)
        parts = [self.silhouette_3d(x, w.sigma_3d, jacobian), self.silhouette_2d(x, w.sigma_2d, jacobian)]
        if self.offsets:
            parts += [self.laplacian_residuals(x, w.w_L, jacobian), self.body_residuals(x, w.w_B, jacobian)]
        r = np.concatenate([q[0] for q in parts])
        if not jacobian:
            return r, None
        if self.offsets:
            return r, sp.vstack([sp.csr_matrix(q[1]) for q in parts], format="csr")
        return r, np.vstack([q[1] for q in parts])

    def residual(self, x, stage):
        return self._evaluate(x, stage, False)[0]

    def jacobian(self, x, stage):
        return self._evaluate(x, stage, True)[1]


def silhouette_term(model, theta, beta, d, pairs3d, pairs2d, cameras, weights: ShapeEnergyWeights) -> tuple[float, np.ndarray, np.ndarray]:
    """Robust correspondence energy with its per-group values (3D groups, 2D groups)."""
    prob = ShapeProblem(model, theta, cameras, optimize_offsets=d is not None)
    prob.set_pairs(pairs3d, pairs2d)
    x = np.concatenate([np.asarray(beta, float), np.zeros(0) if d is None else np.asarray(d, float).reshape(-1)])
    r3, _ = prob.silhouette_3d(x, weights.sigma_3d, False)
    r2, _ = prob.silhouette_2d(x, weights.sigma_2d, False)
    g3 = np.sum(r3.reshape(-1, 3) ** 2, axis=1)
    g2 = np.sum(r2.reshape(-1, 2) ** 2, axis=1)
    return float(g3.sum() + g2.sum()), g3, g2


def mask_ious(model, theta, beta, cameras, masks, d=None) -> list[float]:
    mesh = skin(model, theta, beta, d)
    return [iou(rasterize_silhouette(mesh, c)[0], m) for c, m in zip(cameras, masks)]


@dataclass
class ShapeFitResult:
    beta: np.ndarray
    d: np.ndarray
    solve: SolveResult
    iou_before: list[float]
    iou_after: list[float]
    pair_counts: list[tuple[int, int]] = field(default_factory=list)

    @property
    def traces(self):
        return self.solve.traces


def fit_shape(
    model: BodyModel,
    theta,
    cameras: Sequence[CameraParams],
    masks: Sequence[SilhouetteMask],
    beta0,
    schedule: StageSchedule,
    cfg: Optional[PairingConfig] = None,
    optimize_offsets: bool = False,
    d0=None,
    rebuilds_per_stage: int = 1,
) -> ShapeFitResult:
    """Fit shape (and optionally offsets) to silhouettes at a fixed pose.

    Correspondences are rebuilt ``rebuilds_per_stage`` times per stage, each
    followed by a solve with that stage's weights.
    """
    cfg = cfg or PairingConfig()
    if rebuilds_per_stage < 1:
        raise ValueError("rebuilds_per_stage must be at least 1")
    if len(cameras) != len(masks):
        raise ShapeFitError(f"{len(cameras)} cameras but {len(masks)} masks")
    if len(schedule) == 0:
        raise ShapeFitError("empty schedule")
    theta = np.asarray(theta, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    d_in = np.zeros((model.num_vertices, 3)) if d0 is None else np.asarray(d0, dtype=float).reshape(-1, 3)
    prob = ShapeProblem(model, theta, cameras, optimize_offsets)
    prob.d_fixed = d_in
    counts: list[tuple[int, int]] = []

    def rebuild(k, x):
        beta, d = prob.split(x)
        p3, p2 = build_correspondences(model, theta, beta, cameras, masks, cfg, d)
        if not p3 and not p2:
            raise ShapeFitError(f"stage {k}: no correspondences in any view; check that masks overlap the posed model")
        prob.set_pairs(p3, p2)
        counts.append((len(p3), len(p2)))
        log.debug("stage %d: %d 3D and %d 2D pairs", k, len(p3), len(p2))

    x0 = np.concatenate([beta0, d_in.reshape(-1)]) if optimize_offsets else beta0.copy()
    blocks = [ParameterBlock("beta", model.num_betas)] + ([ParameterBlock("d", 3 * model.num_vertices)] if optimize_offsets else [])
    rounds = StageSchedule(tuple(st for st in schedule for _ in range(rebuilds_per_stage)))
    result = dogleg_minimize(LeastSquaresProblem(prob.residual, prob.jacobian, blocks), x0, rounds, stage_callback=rebuild)
    beta, d = prob.split(result.x)
    d_out = d.copy() if optimize_offsets else d_in
    before = mask_ious(model, theta, beta0, cameras, masks, d_in)
    after = mask_ious(model, theta, beta, cameras, masks, d_out)
    return ShapeFitResult(beta.copy(), d_out, result, before, after, counts)
