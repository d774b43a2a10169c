"""Multi-view pose fitting from 2D joint detections.

Minimizes a robust reprojection term over all views plus an exponential
hyperextension prior on elbows/knees and a squared-norm shape prior, jointly
over pose ``theta``, shape ``beta`` and every camera's extrinsics. View 0's
rotation is held fixed to remove the global rotation gauge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .body_model import BodyModel, joints_rest, kinematics, model_joints_with_jacobian
from .camera import CameraParams, project_with_jacobian, rodrigues, rodrigues_inv
from .optim import (
    LeastSquaresProblem,
    ParameterBlock,
    SolveResult,
    Stage,
    StageSchedule,
    dogleg_minimize,
    geman_mcclure,
    robust_groups,
)

BEHIND_CAMERA_RESIDUAL = 10.0  # in units of sigma
# flip between the model frame (y up, facing +z) and a camera looking at it (y down)
FACING_CAMERA = np.diag([1.0, -1.0, -1.0])


class PoseFitError(ValueError):
    pass


@dataclass(frozen=True)
class JointObservation:
    joint_name: str
    u: float
    v: float
    confidence: float = 1.0


@dataclass(frozen=True)
class JointObservations:
    views: tuple[tuple[JointObservation, ...], ...]

    @property
    def num_views(self) -> int:
        return len(self.views)


def load_joints(text: str) -> JointObservations:
    doc = json.loads(text)
    views = []
    for entries in doc:
        views.append(
            tuple(
                JointObservation(str(e["joint_name"]), float(e["u"]), float(e["v"]), float(e.get("confidence", 1.0)))
                for e in entries
            )
        )
    return JointObservations(tuple(views))


def dump_joints(obs: JointObservations) -> str:
    return json.dumps(
        [[{"joint_name": o.joint_name, "u": o.u, "v": o.v, "confidence": o.confidence} for o in view] for view in obs.views],
        indent=1,
    )


def identity_mapping(model: BodyModel) -> dict[str, int]:
    return {name: k for k, name in enumerate(model.joint_names)}


def load_mapping(text: str, model: BodyModel) -> dict[str, int]:
    mapping = {str(k): int(v) for k, v in json.loads(text).items()}
    bad = {k: v for k, v in mapping.items() if not 0 <= v < model.num_joints}
    if bad:
        raise PoseFitError(f"mapping references joints outside the model: {bad}")
    return mapping


@dataclass(frozen=True)
class PosePriorSpec:
    """Flat pose-vector indices penalized by ``alpha * exp(sign * theta[i])``."""

    indices: tuple[int, ...]
    alpha: float = 10.0
    signs: Optional[tuple[float, ...]] = None

    def sign_array(self) -> np.ndarray:
        return np.ones(len(self.indices)) if self.signs is None else np.asarray(self.signs, dtype=float)

    @classmethod
    def smpl_indices(cls) -> "PosePriorSpec":
        """Elbow and knee entries of a 24-joint SMPL pose vector, all positive."""
        return cls((55, 58, 15, 12))


# (joint, axis, sign): natural flexion of the rest T-pose makes sign * theta negative
_BEND_AXES = (("left_elbow", 1, 1.0), ("right_elbow", 1, -1.0), ("left_knee", 0, -1.0), ("right_knee", 0, -1.0))


def default_prior_spec(model: BodyModel, alpha: float = 10.0) -> PosePriorSpec:
    idx, signs = [], []
    for name, axis, sign in _BEND_AXES:
        if name in model.joint_names:
            idx.append(3 * model.joint_index(name) + axis)
            signs.append(sign)
    return PosePriorSpec(tuple(idx), alpha, tuple(signs))


def model_joints_3d(model: BodyModel, theta, beta) -> np.ndarray:
    return kinematics(model, theta, joints_rest(model, beta))[1]


def pose_prior_term(theta, spec: PosePriorSpec) -> float:
    th = np.asarray(theta, dtype=float).reshape(-1)
    idx = np.asarray(spec.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= th.size):
        raise ValueError(f"prior indices must lie in [0, {th.size})")
    return float(spec.alpha * np.sum(np.exp(spec.sign_array() * th[idx])))


def shape_prior_term(beta) -> float:
    b = np.asarray(beta, dtype=float)
    return float(b @ b)


@dataclass
class _Groups:
    view: np.ndarray
    joint: np.ndarray
    uv: np.ndarray
    confidence: np.ndarray
    names: list


def _observation_groups(obs: JointObservations, mapping: dict[str, int]) -> _Groups:
    rows = []
    for i, view in enumerate(obs.views):
        for o in view:
            if o.joint_name in mapping and o.confidence > 0:
                rows.append((i, mapping[o.joint_name], o.joint_name, o.u, o.v, o.confidence))
    if not rows:
        raise PoseFitError("no observation maps to a model joint")
    # canonical order keeps sums independent of the input order
    rows.sort(key=lambda t: (t[0], t[1], t[2], t[3], t[4], t[5]))
    return _Groups(
        np.array([r[0] for r in rows]),
        np.array([r[1] for r in rows]),
        np.array([[r[3], r[4]] for r in rows], dtype=float),
        np.array([r[5] for r in rows], dtype=float),
        [r[2] for r in rows],
    )


@dataclass
class JointTermResult:
    energy: float
    values: np.ndarray  # per group: confidence * rho
    views: np.ndarray
    joints: np.ndarray
    errors: np.ndarray  # observed minus projected, (G, 2)


def joint_term(model, theta, beta, cameras: Sequence[CameraParams], obs, mapping, sigma: float) -> JointTermResult:
    """Robust reprojection energy, one group per (view, mapped joint)."""
    groups = _observation_groups(obs, mapping)
    joints = model_joints_3d(model, theta, beta)
    errors = np.empty_like(groups.uv)
    for i, cam in enumerate(cameras):
        sel = groups.view == i
        if not np.any(sel):
            continue
        uv, valid, *_ = project_with_jacobian(cam, joints[groups.joint[sel]])
        e = groups.uv[sel] - uv
        e[~valid] = (BEHIND_CAMERA_RESIDUAL * sigma, 0.0)
        errors[sel] = e
    values = groups.confidence * geman_mcclure(np.sum(errors**2, axis=1), sigma)
    return JointTermResult(float(values.sum()), values, groups.view, groups.joint, errors)


def init_cameras(
    model: BodyModel,
    obs: JointObservations,
    mapping: dict[str, int],
    focal: float,
    image_size: tuple[int, int],
    principal_point=None,
    theta=None,
) -> list[CameraParams]:
    """Identity rotations; translation from the ratio of model to image torso length."""
    pp = np.array([image_size[0] / 2.0, image_size[1] / 2.0]) if principal_point is None else np.asarray(principal_point, float)
    th = initial_theta(model) if theta is None else theta
    joints = model_joints_3d(model, th, np.zeros(model.num_betas))
    inverse = {}
    for name, k in mapping.items():
        inverse.setdefault(k, []).append(name)
    cams = []
    for i, view in enumerate(obs.views):
        seen = {o.joint_name: np.array([o.u, o.v]) for o in view if o.confidence > 0 and o.joint_name in mapping}

        def locate(joint_name):
            """(model point, image point) of a model joint, if observed."""
            if joint_name not in model.joint_names:
                return None
            k = model.joint_index(joint_name)
            for n in inverse.get(k, []):
                if n in seen:
                    return joints[k], seen[n]
            return None

        def pair(names):
            found = [locate(n) for n in names]
            if any(f is None for f in found):
                return None
            return np.mean([f[0] for f in found], axis=0), np.mean([f[1] for f in found], axis=0)

        ends = None
        for top, bottom in ((("neck",), ("pelvis",)), (("left_shoulder", "right_shoulder"), ("left_hip", "right_hip"))):
            a, b = pair(top), pair(bottom)
            if a is not None and b is not None:
                ends = (a, b)
                break
        if ends is None:
            raise PoseFitError(
                f"view {i}: torso joints missing; need neck+pelvis or left/right shoulder+hip, "
                f"observed {sorted(seen)}"
            )
        (m_top, p_top), (m_bot, p_bot) = ends
        model_len = np.linalg.norm(m_top - m_bot)
        pix_len = np.linalg.norm(p_top - p_bot)
        if pix_len <= 0:
            raise PoseFitError(f"view {i}: degenerate torso in the image")
        depth = focal * model_len / pix_len
        mid_model = 0.5 * (m_top + m_bot)
        mid_pix = 0.5 * (p_top + p_bot)
        t = np.empty(3)
        t[2] = depth - mid_model[2]
        t[:2] = (mid_pix - pp) * depth / focal - mid_model[:2]
        cams.append(CameraParams(focal, pp, np.zeros(3), t, image_size))
    return cams


def initial_theta(model: BodyModel, view0_rotation=None) -> np.ndarray:
    """Zero pose with the root turned to stand upright facing camera 0."""
    r0 = np.eye(3) if view0_rotation is None else rodrigues(view0_rotation)
    theta = np.zeros((model.num_joints, 3))
    theta[0] = rodrigues_inv(r0.T @ FACING_CAMERA)
    return theta


class PoseProblem:
    """Residuals and Jacobians of the pose-fitting energy.

    Parameter layout: ``theta`` (3K) | ``beta`` (S) | per view rotation (3) and
    translation (3). Residual layout: joint groups (2 per group) | pose prior |
    shape prior.
    """

    def __init__(self, model, obs, mapping, cameras: Sequence[CameraParams], prior: PosePriorSpec, data_scale: str = "sigma2"):
        self.model = model
        self.groups = _observation_groups(obs, mapping)
        self.cameras = list(cameras)
        self.prior = prior
        self.prior_idx = np.asarray(prior.indices, dtype=np.int64)
        self.prior_sign = prior.sign_array()
        if data_scale not in ("sigma2", "unit"):
            raise ValueError("data_scale must be 'sigma2' or 'unit'")
        self.data_scale = data_scale
        k, s = model.num_joints, model.num_betas
        self.n_theta, self.n_beta = 3 * k, s
        self.n = 3 * k + s + 6 * len(self.cameras)

    def blocks(self, frozen: Sequence[str] = ("cam0_rot",), frozen_theta: Sequence[int] = ()) -> list[ParameterBlock]:
        """One block per pose coordinate (``theta{k}``), then ``beta`` and the cameras."""
        out = [ParameterBlock(f"theta{k}", 1, k in frozen_theta) for k in range(self.n_theta)]
        out.append(ParameterBlock("beta", self.n_beta))
        for i in range(len(self.cameras)):
            out += [ParameterBlock(f"cam{i}_rot", 3), ParameterBlock(f"cam{i}_trans", 3)]
        for b in out:
            b.frozen = b.frozen or b.name in frozen
        return out

    def pack(self, theta, beta, cameras: Sequence[CameraParams]) -> np.ndarray:
        parts = [np.asarray(theta, float).reshape(-1), np.asarray(beta, float).reshape(-1)]
        for c in cameras:
            parts += [c.rotation, c.translation]
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray):
        theta = x[: self.n_theta].reshape(-1, 3)
        beta = x[self.n_theta : self.n_theta + self.n_beta]
        cams = []
        off = self.n_theta + self.n_beta
        for i, c in enumerate(self.cameras):
            cams.append(c.with_extrinsics(x[off + 6 * i : off + 6 * i + 3], x[off + 6 * i + 3 : off + 6 * i + 6]))
        return theta, beta, cams

    def angle_limit(self, limit: float):
        """Feasibility test: no non-root joint rotates by more than ``limit``."""

        def ok(x):
            th = x[3 : self.n_theta].reshape(-1, 3)
            return bool(np.all(np.linalg.norm(th, axis=1) <= limit))

        return ok

    # individual terms ------------------------------------------------------

    def joint_residuals(self, x, sigma: float, jacobian: bool = True):
        theta, beta, cams = self.unpack(x)
        g = self.groups
        if jacobian:
            joints, dj_theta, dj_beta = model_joints_with_jacobian(self.model, theta, beta)
        else:
            joints = model_joints_3d(self.model, theta, beta)
        n_groups = len(g.view)
        errors = np.empty((n_groups, 2))
        de = np.zeros((n_groups, 2, self.n)) if jacobian else None
        off = self.n_theta + self.n_beta
        for i, cam in enumerate(cams):
            sel = np.flatnonzero(g.view == i)
            if not sel.size:
                continue
            jid = g.joint[sel]
            uv, valid, d_pt, d_rot, d_tr = project_with_jacobian(cam, joints[jid])
            e = g.uv[sel] - uv
            e[~valid] = (BEHIND_CAMERA_RESIDUAL * sigma, 0.0)
            errors[sel] = e
            if jacobian:
                # residual is observed - projected
                de[sel, :, : self.n_theta] = -np.einsum("gab,gbn->gan", d_pt, dj_theta[jid])
                de[sel, :, self.n_theta : off] = -np.einsum("gab,gbn->gan", d_pt, dj_beta[jid])
                de[sel, :, off + 6 * i : off + 6 * i + 3] = -d_rot
                de[sel, :, off + 6 * i + 3 : off + 6 * i + 6] = -d_tr
                de[sel[~valid]] = 0.0
        scale = sigma * sigma if self.data_scale == "sigma2" else 1.0
        return robust_groups(errors, de, sigma, g.confidence * scale)

    def pose_prior_residuals(self, x, weight: float, jacobian: bool = True):
        th = x[self.prior_idx]
        r = np.sqrt(max(weight, 0.0) * self.prior.alpha) * np.exp(0.5 * self.prior_sign * th)
        if not jacobian:
            return r, None
        jac = np.zeros((len(r), self.n))
        jac[np.arange(len(r)), self.prior_idx] = 0.5 * self.prior_sign * r
        return r, jac

    def shape_prior_residuals(self, x, weight: float, jacobian: bool = True):
        sl = slice(self.n_theta, self.n_theta + self.n_beta)
        c = np.sqrt(max(weight, 0.0))
        r = c * x[sl]
        if not jacobian:
            return r, None
        jac = np.zeros((self.n_beta, self.n))
        jac[:, sl] = c * np.eye(self.n_beta)
        return r, jac

    # solver interface ------------------------------------------------------

    def residual(self, x, stage: Stage) -> np.ndarray:
        return self._evaluate(x, stage, False)[0]

    def jacobian(self, x, stage: Stage) -> np.ndarray:
        return self._evaluate(x, stage, True)[1]

    def _evaluate(self, x, stage: Stage, jacobian: bool):
        parts = [
            self.joint_residuals(x, stage.sigma, jacobian),
            self.pose_prior_residuals(x, stage.weight("w_theta"), jacobian),
            self.shape_prior_residuals(x, stage.weight("w_beta"), jacobian),
        ]
        r = np.concatenate([p[0] for p in parts])
        jac = np.vstack([p[1] for p in parts]) if jacobian else None
        return r, jac

    def energy(self, x, stage: Stage) -> float:
        r = self.residual(x, stage)
        return float(r @ r)


@dataclass
class PoseFitOptions:
    data_scale: str = "sigma2"
    orientation_search: bool = True
    yaw_candidates_deg: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    warmup_iterations: int = 20
    # the exp prior rewards winding a joint a full turn; small steps keep the
    # solver from jumping to such equivalent poses
    max_step: float = 1.0
    # rotation vectors stay inside the ball of radius pi, where they are unique
    max_joint_angle: float = np.pi
    # hold fixed the spin of single-child joints about their bone; joint
    # positions cannot observe it
    freeze_twist: bool = True


@dataclass
class PoseFitResult:
    theta: np.ndarray
    beta: np.ndarray
    cameras: list[CameraParams]
    solve: SolveResult
    warmup: list[SolveResult] = field(default_factory=list)

    @property
    def traces(self):
        return self.solve.traces


def twist_coordinates(model: BodyModel, alignment: float = 0.95) -> tuple[int, ...]:
    """Flat pose indices of bone-axis spin for joints with exactly one child
    whose rest bone is within ``acos(alignment)`` of a coordinate axis."""
    j = joints_rest(model, np.zeros(model.num_betas))
    out = []
    for k in range(1, model.num_joints):
        children = np.flatnonzero(model.parent == k)
        if len(children) != 1:
            continue
        bone = j[children[0]] - j[k]
        norm = np.linalg.norm(bone)
        if norm == 0:
            continue
        axis = int(np.argmax(np.abs(bone)))
        if abs(bone[axis]) / norm >= alignment:
            out.append(3 * k + axis)
    return tuple(out)


def _yawed(cam: CameraParams, axis_world: np.ndarray, center: np.ndarray, angle: float) -> CameraParams:
    """Move a camera around ``center`` by ``angle`` about ``axis_world``."""
    r = cam.rotation_matrix
    r_new = r @ rodrigues(axis_world * angle)
    t_new = cam.translation + r @ center - r_new @ center
    return cam.with_extrinsics(rodrigues_inv(r_new), t_new)


def fit_pose(
    model: BodyModel,
    obs: JointObservations,
    mapping: dict[str, int],
    cameras0: Sequence[CameraParams],
    schedule: StageSchedule,
    prior: Optional[PosePriorSpec] = None,
    theta0=None,
    beta0=None,
    options: Optional[PoseFitOptions] = None,
) -> PoseFitResult:
    """Estimate pose, shape and camera extrinsics from multi-view joints."""
    opts = options or PoseFitOptions()
    if obs.num_views != len(cameras0):
        raise PoseFitError(f"{obs.num_views} views of joints but {len(cameras0)} cameras")
    if len(schedule) == 0:
        raise PoseFitError("empty schedule")
    prior = default_prior_spec(model) if prior is None else prior
    problem = PoseProblem(model, obs, mapping, cameras0, prior, opts.data_scale)
    theta = initial_theta(model, cameras0[0].rotation) if theta0 is None else np.asarray(theta0, float)
    beta = np.zeros(model.num_betas) if beta0 is None else np.asarray(beta0, float)
    x = problem.pack(theta, beta, cameras0)
    warmups = []
    if opts.orientation_search and opts.warmup_iterations > 0:
        x, warmups = _warm_up(problem, x, schedule.stages[0].sigma, opts)
    twist = twist_coordinates(model) if opts.freeze_twist else ()
    lsq = LeastSquaresProblem(problem.residual, problem.jacobian, problem.blocks(frozen_theta=twist))
    result = dogleg_minimize(lsq, x, schedule, max_radius=opts.max_step, feasible=problem.angle_limit(opts.max_joint_angle))
    theta, beta, cams = problem.unpack(result.x)
    return PoseFitResult(theta.copy(), beta.copy(), cams, result, warmups)


def _warm_up(problem: PoseProblem, x: np.ndarray, sigma: float, opts: PoseFitOptions):
    """Rigidly place the body in view 0, then orient each other camera by
    trying yaw offsets about the body's vertical axis."""
    data_only = StageSchedule((Stage({}, sigma, opts.warmup_iterations, 1e-6),))
    names = [b.name for b in problem.blocks()]
    n_views = len(problem.cameras)

    def solve(x_start, free):
        blocks = problem.blocks(frozen=[n for n in names if n not in free])
        return dogleg_minimize(LeastSquaresProblem(problem.residual, problem.jacobian, blocks), x_start, data_only)

    results = []
    # only the root rotation moves in the theta block: freeze the rest by masking
    root = _RootOnly(problem)
    res = dogleg_minimize(
        LeastSquaresProblem(root.residual, root.jacobian, root.blocks()), root.pack(x), data_only
    )
    x = root.unpack(res.x)
    results.append(res)

    for i in range(1, n_views):
        theta, beta, cams = problem.unpack(x)
        j = model_joints_3d(problem.model, theta, beta)
        center = j.mean(axis=0)
        up = rodrigues(theta[0]) @ np.array([0.0, 1.0, 0.0])
        best = None
        for deg in opts.yaw_candidates_deg:
            cand = list(cams)
            if deg != 0.0:
                cand[i] = _yawed(cams[i], up, center, np.deg2rad(deg))
            xc = problem.pack(theta, beta, cand)
            res = solve(xc, (f"cam{i}_rot", f"cam{i}_trans"))
            if best is None or res.energy < best.energy:
                best = res
        x = best.x
        results.append(best)
    return x, results


class _RootOnly:
    """View of a PoseProblem where only the root rotation and view-0 translation vary."""

    def __init__(self, problem: PoseProblem):
        self.problem = problem
        off = problem.n_theta + problem.n_beta
        self.index = np.r_[0:3, off + 3 : off + 6]
        self.base = None

    def blocks(self):
        return [ParameterBlock("root", 3), ParameterBlock("cam0_trans", 3)]

    def pack(self, x):
        self.base = x.copy()
        return x[self.index].copy()

    def unpack(self, z):
        x = self.base.copy()
        x[self.index] = z
        return x

    def residual(self, z, stage):
        return self.problem.residual(self.unpack(z), stage)

    def jacobian(self, z, stage):
        return self.problem.jacobian(self.unpack(z), stage)[:, self.index]
