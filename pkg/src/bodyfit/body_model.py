"""SMPL-style parametric body: blendshapes, joint regression and linear blend skinning.

Pose is an axis-angle rotation per joint (``theta``, shape ``(K, 3)``, joint 0 is
the global root). Shape is a coefficient vector ``beta`` of length ``S`` and
``d`` is an optional ``(V, 3)`` free-form offset applied in the zero-pose space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import rodrigues, rodrigues_with_jacobian

MODEL_FORMAT_VERSION = 1
ROOT_PARENT = -1
DEGENERATE_CONDITION = 1e8


class ModelError(ValueError):
    """A model document violates the schema or a model invariant."""


class DegenerateSkinningError(ValueError):
    """The blended skinning transform of a vertex is (near) singular."""


@dataclass(frozen=True, eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    shape_dirs: np.ndarray  # (V, 3, S)
    pose_dirs: np.ndarray  # (V, 3, 9 * (K - 1)), zeros when the document has none
    joint_regressor: np.ndarray  # (K, V)
    skin_weights: np.ndarray  # (V, K)
    parent: np.ndarray  # (K,), ROOT_PARENT for joint 0
    joint_names: tuple[str, ...]

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def num_betas(self) -> int:
        return self.shape_dirs.shape[2]

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"model has no joint named {name!r}") from None


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None

    def with_normals(self) -> "Mesh":
        return Mesh(self.vertices, self.faces, vertex_normals(self.vertices, self.faces))


def model_problems(model: BodyModel) -> list[str]:
    """Every violated model invariant, as human-readable messages."""
    problems = []
    v, k = model.num_vertices, model.num_joints
    if model.template_vertices.shape != (v, 3):
        problems.append(f"template has shape {model.template_vertices.shape}, expected ({v}, 3)")
    if model.shape_dirs.ndim != 3 or model.shape_dirs.shape[:2] != (v, 3):
        problems.append(f"shape_dirs has shape {model.shape_dirs.shape}, expected ({v}, 3, S)")
    if model.pose_dirs.shape != (v, 3, 9 * (k - 1)):
        problems.append(f"pose_dirs has shape {model.pose_dirs.shape}, expected ({v}, 3, {9 * (k - 1)})")
    if model.joint_regressor.shape != (k, v):
        problems.append(f"joint_regressor has shape {model.joint_regressor.shape}, expected ({k}, {v})")
    if model.skin_weights.shape != (v, k):
        problems.append(f"skin_weights has shape {model.skin_weights.shape}, expected ({v}, {k})")
    if model.parent.shape != (k,) or len(model.joint_names) != k:
        problems.append("parent and joint_names must have one entry per joint")
    if problems:
        return problems
    for name, arr in [
        ("template", model.template_vertices),
        ("shape_dirs", model.shape_dirs),
        ("pose_dirs", model.pose_dirs),
        ("joint_regressor", model.joint_regressor),
        ("skin_weights", model.skin_weights),
    ]:
        if not np.all(np.isfinite(arr)):
            problems.append(f"{name} contains non-finite values")
    neg = np.argwhere(model.skin_weights < 0)
    if len(neg):
        problems.append(f"skin_weights row {neg[0][0]} has a negative entry")
    sums = model.skin_weights.sum(axis=1)
    for i in np.flatnonzero(np.abs(sums - 1.0) > 1e-6)[:5]:
        problems.append(f"skin_weights row {i} sums to {sums[i]:.9g}, expected 1")
    rsums = model.joint_regressor.sum(axis=1)
    for i in np.flatnonzero(np.abs(rsums - 1.0) > 1e-6)[:5]:
        problems.append(f"joint_regressor row {i} sums to {rsums[i]:.9g}, expected 1")
    faces = model.faces
    if faces.ndim != 2 or faces.shape[1] != 3:
        problems.append(f"faces has shape {faces.shape}, expected (F, 3)")
    elif faces.size and (faces.min() < 0 or faces.max() >= v):
        bad = np.argwhere((faces < 0) | (faces >= v))[0]
        problems.append(f"face {bad[0]} references vertex {faces[bad[0], bad[1]]} outside [0, {v})")
    problems.extend(_tree_problems(model.parent))
    return problems


def _tree_problems(parent: np.ndarray) -> list[str]:
    k = len(parent)
    if k == 0:
        return ["model has no joints"]
    if parent[0] != ROOT_PARENT:
        return [f"joint 0 must be the root (parent {ROOT_PARENT}), got parent {parent[0]}"]
    out = []
    for j in range(1, k):
        p = int(parent[j])
        if p == ROOT_PARENT:
            out.append(f"joint {j} is a second root")
        elif not 0 <= p < k:
            out.append(f"joint {j} has invalid parent {p}")
        elif p >= j:
            # forward kinematics relies on parents preceding children
            out.append(f"joint {j} has parent {p} which does not precede it")
    return out


def validate(model: BodyModel) -> BodyModel:
    problems = model_problems(model)
    if problems:
        raise ModelError("; ".join(problems))
    return model


def _check_theta(model: BodyModel, theta) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    if th.size != 3 * model.num_joints:
        raise ValueError(f"theta has {th.size} entries, model needs {3 * model.num_joints}")
    return th.reshape(model.num_joints, 3)


def _check_beta(model: BodyModel, beta) -> np.ndarray:
    b = np.asarray(beta, dtype=float).reshape(-1)
    if b.size != model.num_betas:
        raise ValueError(f"beta has {b.size} entries, model needs {model.num_betas}")
    return b


def _check_offsets(model: BodyModel, d) -> np.ndarray:
    if d is None:
        return np.zeros((model.num_vertices, 3))
    out = np.asarray(d, dtype=float)
    if out.shape != (model.num_vertices, 3):
        raise ValueError(f"offsets have shape {out.shape}, expected ({model.num_vertices}, 3)")
    return out


def shape_blend(model: BodyModel, beta) -> np.ndarray:
    return model.shape_dirs @ _check_beta(model, beta)


def pose_features(theta: np.ndarray) -> np.ndarray:
    """Vectorized ``R(theta_k) - I`` for the non-root joints."""
    th = np.asarray(theta, dtype=float).reshape(-1, 3)
    if len(th) < 2:
        return np.zeros(0)
    rots = np.stack([rodrigues(v) for v in th[1:]])
    return (rots - np.eye(3)).reshape(-1)


def pose_blend(model: BodyModel, theta) -> np.ndarray:
    th = _check_theta(model, theta)
    if model.pose_dirs.shape[2] == 0:
        return np.zeros((model.num_vertices, 3))
    return model.pose_dirs @ pose_features(th)


def joints_rest(model: BodyModel, beta) -> np.ndarray:
    return model.joint_regressor @ (model.template_vertices + shape_blend(model, beta))


def joint_shape_jacobian(model: BodyModel) -> np.ndarray:
    """d joints_rest / d beta, shape (K, 3, S)."""
    return np.einsum("kv,vcs->kcs", model.joint_regressor, model.shape_dirs)


def kinematics(model: BodyModel, theta, joints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Global joint rotations ``(K, 3, 3)`` and posed joint positions ``(K, 3)``."""
    th = _check_theta(model, theta)
    k = model.num_joints
    rg = np.empty((k, 3, 3))
    for j in range(k):
        r = rodrigues(th[j])
        p = model.parent[j]
        rg[j] = r if p == ROOT_PARENT else rg[p] @ r
    return rg, np.einsum("kab,kb->ka", rg, joints) + _translations(model, rg, joints)


def _translations(model: BodyModel, rg: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Translation part of the rest-relative transforms; linear in ``joints``.

    Uses ``t_k = t_parent + (R_parent - R_k) j_k`` so that every translation is
    exactly zero when all rotations are the identity.
    """
    out = np.empty_like(joints)
    for j in range(model.num_joints):
        p = model.parent[j]
        if p == ROOT_PARENT:
            out[j] = joints[j] - np.einsum("ab,b...->a...", rg[j], joints[j])
        else:
            out[j] = out[p] + np.einsum("ab,b...->a...", rg[p] - rg[j], joints[j])
    return out


def global_transforms(model: BodyModel, theta, beta) -> np.ndarray:
    """Rest-relative world transforms ``G'_k`` as ``(K, 4, 4)`` matrices.

    ``G'_k`` maps a rest-pose point rigidly attached to joint ``k`` to its posed
    location, so every transform is the identity at ``theta = 0``.
    """
    joints = joints_rest(model, beta)
    rg, _ = kinematics(model, theta, joints)
    out = np.zeros((model.num_joints, 4, 4))
    out[:, :3, :3] = rg
    out[:, :3, 3] = _translations(model, rg, joints)
    out[:, 3, 3] = 1.0
    return out


def rest_vertices(model: BodyModel, beta, d=None) -> np.ndarray:
    """Zero-pose vertices ``template + B_S(beta) + d``."""
    return model.template_vertices + shape_blend(model, beta) + _check_offsets(model, d)


def blended_transforms(model: BodyModel, theta, beta) -> np.ndarray:
    """Per-vertex skinning transforms ``sum_k w_ik G'_k``, shape (V, 4, 4)."""
    g = global_transforms(model, theta, beta)
    return np.einsum("vk,kab->vab", model.skin_weights, g)


def skin(model: BodyModel, theta, beta, d=None, normals: bool = False) -> Mesh:
    th = _check_theta(model, theta)
    x = rest_vertices(model, beta, d) + pose_blend(model, th)
    a = blended_transforms(model, th, beta)
    verts = np.einsum("vab,vb->va", a[:, :3, :3], x) + a[:, :3, 3]
    mesh = Mesh(verts, model.faces)
    return mesh.with_normals() if normals else mesh


def linearize_skin(model: BodyModel, theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact affine form of skinning at fixed pose.

    Returns ``(v0, m, a)`` with ``skin(theta, beta, d) == v0 + m @ beta + a @ d_i``
    per vertex: ``v0`` is (V, 3), ``m`` is (V, 3, S) and ``a`` the blended
    rotations (V, 3, 3).
    """
    th = _check_theta(model, theta)
    w = model.skin_weights
    j0 = joints_rest(model, np.zeros(model.num_betas))
    rg, _ = kinematics(model, th, j0)
    a = np.einsum("vk,kab->vab", w, rg)
    trans0 = _translations(model, rg, j0)
    x0 = model.template_vertices + pose_blend(model, th)
    v0 = np.einsum("vab,vb->va", a, x0) + w @ trans0
    dj = joint_shape_jacobian(model)
    dtrans = _translations(model, rg, dj)
    m = np.einsum("vab,vbs->vas", a, model.shape_dirs) + np.einsum("vk,kas->vas", w, dtrans)
    return v0, m, a


def unpose_ray(model: BodyModel, theta, beta, vertex: int, origin, direction) -> tuple[np.ndarray, np.ndarray]:
    """Map a world ray into the canonical (zero-pose) frame of ``vertex``.

    Both ray origin and direction go through the inverse blended transform of the
    vertex; the vertex's pose-blend displacement is then removed from the origin.
    The returned direction has unit length.
    """
    th = _check_theta(model, theta)
    g = global_transforms(model, th, beta)
    a = np.einsum("k,kab->ab", model.skin_weights[vertex], g)
    rot_inv = invert_blended(a[:3, :3])
    bp = pose_blend(model, th)[vertex]
    o = rot_inv @ (np.asarray(origin, float) - a[:3, 3]) - bp
    dvec = rot_inv @ np.asarray(direction, float)
    return o, dvec / np.linalg.norm(dvec)


def invert_blended(linear: np.ndarray) -> np.ndarray:
    """Inverse of a blended 3x3 linear part, rejecting near-singular blends."""
    cond = np.linalg.cond(linear)
    if not np.isfinite(cond) or cond > DEGENERATE_CONDITION:
        raise DegenerateSkinningError(f"blended transform has condition number {cond:.3g}")
    return np.linalg.inv(linear)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals; vertices without faces get a zero normal."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def model_joints_with_jacobian(model: BodyModel, theta, beta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posed joints ``(K, 3)`` with derivatives w.r.t. flat theta ``(K, 3, 3K)``
    and beta ``(K, 3, S)``."""
    th = _check_theta(model, theta)
    k = model.num_joints
    joints = joints_rest(model, beta)
    dj = joint_shape_jacobian(model)
    n = 3 * k
    rg = np.empty((k, 3, 3))
    pos = np.empty((k, 3))
    drg = np.zeros((k, n, 3, 3))
    dpos = np.zeros((k, n, 3))
    dpos_b = np.empty((k, 3, model.num_betas))
    for j in range(k):
        r, dr = rodrigues_with_jacobian(th[j])
        p = model.parent[j]
        cols = slice(3 * j, 3 * j + 3)
        if p == ROOT_PARENT:
            rg[j] = r
            pos[j] = joints[j]
            drg[j, cols] = dr
            dpos_b[j] = dj[j]
        else:
            bone = joints[j] - joints[p]
            rg[j] = rg[p] @ r
            pos[j] = pos[p] + rg[p] @ bone
            drg[j] = drg[p] @ r
            drg[j, cols] = rg[p] @ dr
            dpos[j] = dpos[p] + drg[p] @ bone
            dpos_b[j] = dpos_b[p] + rg[p] @ (dj[j] - dj[p])
    # positions from the same formula as kinematics, so both agree bit for bit
    pos = np.einsum("kab,kb->ka", rg, joints) + _translations(model, rg, joints)
    return pos, dpos.transpose(0, 2, 1), dpos_b


# --- model file -------------------------------------------------------------------

_REQUIRED = (
    "version", "V", "K", "S", "template", "faces", "shape_dirs", "pose_dirs",
    "joint_regressor", "skin_weights", "parent", "joint_names",
)


def load_model(document: str | dict) -> BodyModel:
    doc = json.loads(document) if isinstance(document, str) else document
    missing = [key for key in _REQUIRED if key not in doc]
    if missing:
        raise ModelError(f"model document lacks fields: {', '.join(missing)}")
    if doc["version"] != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model version {doc['version']!r}")
    v, k, s = int(doc["V"]), int(doc["K"]), int(doc["S"])
    try:
        template = np.asarray(doc["template"], dtype=float).reshape(v, 3)
        faces = np.asarray(doc["faces"], dtype=np.int64).reshape(-1, 3)
        shape_dirs = np.asarray(doc["shape_dirs"], dtype=float).reshape(v, 3, s)
        pose_flat = np.asarray(doc["pose_dirs"], dtype=float)
        p = 9 * (k - 1)
        pose_dirs = np.zeros((v, 3, p)) if pose_flat.size == 0 else pose_flat.reshape(v, 3, p)
        regressor = np.asarray(doc["joint_regressor"], dtype=float).reshape(k, v)
        weights = np.asarray(doc["skin_weights"], dtype=float).reshape(v, k)
        parent = np.asarray(doc["parent"], dtype=np.int64).reshape(k)
    except ValueError as exc:
        raise ModelError(f"array has the wrong size: {exc}") from None
    names = tuple(str(n) for n in doc["joint_names"])
    model = BodyModel(template, faces, shape_dirs, pose_dirs, regressor, weights, parent, names)
    return validate(model)


def model_to_dict(model: BodyModel) -> dict:
    pose = model.pose_dirs
    return {
        "version": MODEL_FORMAT_VERSION,
        "V": model.num_vertices,
        "K": model.num_joints,
        "S": model.num_betas,
        "template": model.template_vertices.reshape(-1).tolist(),
        "faces": model.faces.reshape(-1).tolist(),
        "shape_dirs": model.shape_dirs.reshape(-1).tolist(),
        "pose_dirs": [] if not np.any(pose) else pose.reshape(-1).tolist(),
        "joint_regressor": model.joint_regressor.reshape(-1).tolist(),
        "skin_weights": model.skin_weights.reshape(-1).tolist(),
        "parent": [int(p) for p in model.parent],
        "joint_names": list(model.joint_names),
    }


def save_model(model: BodyModel) -> str:
    # json emits the shortest repr that round-trips, i.e. up to 17 significant digits
    return json.dumps(model_to_dict(model))


def save_obj(mesh: Mesh) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def zero_pose(model: BodyModel) -> np.ndarray:
    return np.zeros((model.num_joints, 3))


def named_pose(model: BodyModel, rotations: dict[str, Sequence[float]]) -> np.ndarray:
    """Pose with the given per-joint rotations; joints absent from the model are skipped."""
    theta = zero_pose(model)
    for name, rot in rotations.items():
        if name in model.joint_names:
            theta[model.joint_index(name)] = rot
    return theta
