"""Seeded low-poly humanoid used in place of a licensed body model.

The body is a set of generalized cylinders (torso, head, arms, legs) swept along
polylines through an SMPL-like skeleton in T-pose (y up, z forward, +x is the
body's left). Joints are taken from the SMPL joint list in a fixed priority
order so every prefix forms a tree rooted at the pelvis.
"""

from __future__ import annotations

import numpy as np

from .body_model import ROOT_PARENT, BodyModel, validate

SMPL_JOINTS = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Joints kept for a K-joint toy model are the first K of this list.
JOINT_PRIORITY = (
    "pelvis", "left_hip", "right_hip", "left_knee", "right_knee", "spine1",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "neck",
    "left_ankle", "right_ankle", "left_wrist", "right_wrist", "head",
    "spine2", "spine3", "left_collar", "right_collar", "left_foot", "right_foot",
    "left_hand", "right_hand",
)

_POINTS = {
    "pelvis": (0.0, 0.95, 0.0),
    "left_hip": (0.09, 0.88, 0.0),
    "spine1": (0.0, 1.06, -0.02),
    "spine2": (0.0, 1.19, -0.025),
    "spine3": (0.0, 1.31, -0.015),
    "neck": (0.0, 1.48, 0.0),
    "head": (0.0, 1.57, 0.025),
    "head_crown": (0.0, 1.69, 0.02),
    "head_top": (0.0, 1.77, 0.015),
    "left_collar": (0.07, 1.41, -0.01),
    "left_shoulder": (0.19, 1.42, -0.01),
    "left_elbow": (0.46, 1.42, -0.025),
    "left_wrist": (0.71, 1.42, -0.005),
    "left_hand": (0.79, 1.42, 0.0),
    "left_fingertip": (0.88, 1.42, 0.0),
    "left_knee": (0.10, 0.51, 0.015),
    "left_ankle": (0.10, 0.09, -0.015),
    "left_foot": (0.10, 0.025, 0.11),
    "left_toe": (0.10, 0.025, 0.18),
}
for _name, (_x, _y, _z) in list(_POINTS.items()):
    if _name.startswith("left_"):
        _POINTS["right_" + _name[5:]] = (-_x, _y, _z)

# (name, polyline points, cross-section radii (width, depth) per ring point); the
# last point of each polyline is the end pole.
_CHAINS = (
    ("torso", ("pelvis", "spine1", "spine2", "spine3", "neck", None),
     ((0.165, 0.115), (0.15, 0.105), (0.155, 0.105), (0.175, 0.11), (0.065, 0.06))),
    ("head", ("neck", "head", "head_crown", "head_top"), ((0.055, 0.055), (0.085, 0.1), (0.07, 0.085))),
    ("left_arm", ("left_collar", "left_shoulder", "left_elbow", "left_wrist", "left_hand", "left_fingertip"),
     ((0.05, 0.05), (0.055, 0.055), (0.042, 0.045), (0.032, 0.03), (0.04, 0.018))),
    ("right_arm", ("right_collar", "right_shoulder", "right_elbow", "right_wrist", "right_hand", "right_fingertip"),
     ((0.05, 0.05), (0.055, 0.055), (0.042, 0.045), (0.032, 0.03), (0.04, 0.018))),
    ("left_leg", ("left_hip", "left_knee", "left_ankle", "left_foot", "left_toe"),
     ((0.085, 0.085), (0.055, 0.055), (0.04, 0.04), (0.04, 0.028))),
    ("right_leg", ("right_hip", "right_knee", "right_ankle", "right_foot", "right_toe"),
     ((0.085, 0.085), (0.055, 0.055), (0.04, 0.04), (0.04, 0.028))),
)
_TORSO_BOTTOM = (0.0, 0.84, 0.0)

_CHAIN_MIN = np.array([3 * (len(p) - 1) + 2 for _, p, _ in _CHAINS])
MIN_HUMANOID_VERTICES = int(_CHAIN_MIN.sum())


def toy_skeleton(num_joints: int) -> tuple[tuple[str, ...], np.ndarray]:
    """Joint names and parents of a ``num_joints`` toy model, in SMPL order."""
    if not 1 <= num_joints <= len(SMPL_JOINTS):
        raise ValueError(f"K must be in [1, {len(SMPL_JOINTS)}], got {num_joints}")
    keep = set(JOINT_PRIORITY[:num_joints])
    names = tuple(n for n in SMPL_JOINTS if n in keep)
    parents = []
    for n in names:
        p = SMPL_PARENTS[SMPL_JOINTS.index(n)]
        while p != -1 and SMPL_JOINTS[p] not in keep:
            p = SMPL_PARENTS[p]
        parents.append(ROOT_PARENT if p == -1 else names.index(SMPL_JOINTS[p]))
    return names, np.array(parents, dtype=np.int64)


def _effective(name: str, names: tuple[str, ...]) -> int:
    """Index of the nearest kept ancestor-or-self of an SMPL joint."""
    i = SMPL_JOINTS.index(name)
    while SMPL_JOINTS[i] not in names:
        i = SMPL_PARENTS[i]
    return names.index(SMPL_JOINTS[i])


def _smpl_parent(name: str) -> str | None:
    p = SMPL_PARENTS[SMPL_JOINTS.index(name)]
    return None if p == -1 else SMPL_JOINTS[p]


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _stitch(a: list[int], b: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate the band between two closed rings of possibly different sizes."""
    tris = []
    i = j = 0
    na, nb = len(a), len(b)
    while i < na or j < nb:
        if j == nb or (i < na and (i + 1) / na <= (j + 1) / nb):
            tris.append((a[i % na], b[j % nb], a[(i + 1) % na]))
            i += 1
        else:
            tris.append((a[i % na], b[j % nb], b[(j + 1) % nb]))
            j += 1
    return tris


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.axis: list[np.ndarray] = []  # axis point of each vertex's ring
        self.radial: list[np.ndarray] = []  # unit-ish radial direction (zero on poles)
        self.faces: list[tuple[int, int, int]] = []
        self.tags: list[tuple] = []  # (chain, segment, s) per vertex

    def add(self, p, axis, radial, tag) -> int:
        self.verts.append(np.asarray(p, float))
        self.axis.append(np.asarray(axis, float))
        self.radial.append(np.asarray(radial, float))
        self.tags.append(tag)
        return len(self.verts) - 1


def _sweep(builder: _Builder, chain: str, points: np.ndarray, radii, budget: int, start_pole: np.ndarray):
    """Sweep a generalized cylinder along ``points[:-1]`` with poles at
    ``start_pole`` and ``points[-1]``. Returns the vertex ids of the ring at
    every polyline point (used by the joint regressor)."""
    rings_at = points[:-1]
    nseg = len(rings_at) - 1
    lengths = np.linalg.norm(np.diff(rings_at, axis=0), axis=1) if nseg else np.zeros(0)
    n_ring_pts = budget - 2
    # nominal ring size grows with the mean circumference
    circ = np.mean([r[0] + r[1] for r in radii])
    nominal = int(np.clip(round(circ * 80), 6, 14))
    n_rings = max(len(rings_at), min(n_ring_pts // 3, round(n_ring_pts / nominal)))
    extra = n_rings - len(rings_at)
    # distribute the extra rings over segments by length
    per_seg = [0] * nseg
    if nseg and extra > 0:
        share = lengths / lengths.sum() * extra
        per_seg = list(np.floor(share).astype(int))
        for idx in np.argsort(-(share - np.floor(share)), kind="stable")[: extra - sum(per_seg)]:
            per_seg[idx] += 1
    elif extra > 0:
        raise ValueError("single-ring chains cannot take extra rings")

    # ring stations: (segment index, local parameter s in [0, 1])
    stations = []
    for sgm in range(nseg):
        stations.append((sgm, 0.0))
        for q in range(per_seg[sgm]):
            stations.append((sgm, (q + 1) / (per_seg[sgm] + 1)))
    stations.append((max(nseg - 1, 0), 1.0 if nseg else 0.0))
    sizes = _split(n_ring_pts, len(stations))

    def tangent_at(sgm, s):
        if nseg == 0:
            return points[-1] - points[0]
        seg_dir = rings_at[sgm + 1] - rings_at[sgm]
        seg_dir = seg_dir / np.linalg.norm(seg_dir)
        if s == 0.0 and sgm > 0:
            prev = rings_at[sgm] - rings_at[sgm - 1]
            return seg_dir + prev / np.linalg.norm(prev)
        if s == 1.0 and sgm + 1 < nseg:
            nxt = rings_at[sgm + 2] - rings_at[sgm + 1]
            return seg_dir + nxt / np.linalg.norm(nxt)
        return seg_dir

    ring_ids = []
    frame_u = None
    joint_rings = []
    for (sgm, s), size in zip(stations, sizes):
        if nseg:
            center = (1 - s) * rings_at[sgm] + s * rings_at[sgm + 1]
            rad = (1 - s) * np.asarray(radii[sgm]) + s * np.asarray(radii[sgm + 1])
        else:
            center, rad = rings_at[0], np.asarray(radii[0])
        t = tangent_at(sgm, s)
        t = t / np.linalg.norm(t)
        ref = frame_u if frame_u is not None else (np.array([0.0, 0.0, 1.0]) if abs(t[2]) < 0.9 else np.array([0.0, 1.0, 0.0]))
        u = ref - np.dot(ref, t) * t
        u /= np.linalg.norm(u)
        frame_u = u
        w = np.cross(t, u)
        ids = []
        for q in range(size):
            phi = 2 * np.pi * q / size
            offset = np.cos(phi) * rad[0] * w + np.sin(phi) * rad[1] * u
            ids.append(builder.add(center + offset, center, offset / np.mean(rad), (chain, sgm, s)))
        ring_ids.append(ids)
        if s == 0.0 or s == 1.0:
            joint_rings.append(ids)
    # rings at polyline points, in order (end ring of segment k == start of k+1)
    point_rings = [ring_ids[0]]
    idx = 0
    for sgm in range(nseg):
        idx += per_seg[sgm] + 1
        point_rings.append(ring_ids[idx])

    first = stations[0]
    last = stations[-1]
    p0 = builder.add(start_pole, start_pole, np.zeros(3), (chain, first[0], first[1]))
    p1 = builder.add(points[-1], points[-1], np.zeros(3), (chain, last[0], last[1]))
    for a, b in zip(ring_ids[:-1], ring_ids[1:]):
        builder.faces.extend(_stitch(a, b))
    r0, r1 = ring_ids[0], ring_ids[-1]
    builder.faces.extend((p0, r0[(q + 1) % len(r0)], r0[q]) for q in range(len(r0)))
    builder.faces.extend((p1, r1[q], r1[(q + 1) % len(r1)]) for q in range(len(r1)))
    return point_rings


def _orient_outward(verts: np.ndarray, faces: np.ndarray, axis: np.ndarray) -> np.ndarray:
    f = faces.copy()
    n = np.cross(verts[f[:, 1]] - verts[f[:, 0]], verts[f[:, 2]] - verts[f[:, 0]])
    out = verts[f].mean(axis=1) - axis[f].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, out) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return f


def _box_model(num_vertices: int, num_betas: int, rng: np.random.Generator) -> BodyModel:
    """Rigid single-joint body: one generalized cylinder."""
    b = _Builder()
    pts = np.array([[0.0, 0.5, 0.0], [0.0, 1.2, 0.0], [0.0, 1.5, 0.0]])
    rings = _sweep(b, "body", pts, ((0.2, 0.12), (0.2, 0.12)), num_vertices, np.array([0.0, 0.3, 0.0]))
    verts = np.array(b.verts)
    faces = _orient_outward(verts, np.array(b.faces, dtype=np.int64), np.array(b.axis))
    radial = np.array(b.radial)
    dirs = np.zeros((num_vertices, 3, num_betas))
    for s in range(num_betas):
        amp = rng.uniform(0.8, 1.2)
        dirs[:, :, s] = 0.01 * amp * (radial if s % 2 == 0 else (verts - verts.mean(0)))
    reg = np.zeros((1, num_vertices))
    reg[0, rings[0]] = 1.0 / len(rings[0])
    return validate(BodyModel(verts, faces, dirs, np.zeros((num_vertices, 3, 0)), reg,
                              np.ones((num_vertices, 1)), np.array([ROOT_PARENT]), ("pelvis",)))


def make_toy_model(seed: int = 0, V: int = 600, K: int = 16, S: int = 10) -> BodyModel:
    """Deterministic toy humanoid with ``V`` vertices, ``K`` joints and ``S`` shape directions."""
    if K < 1 or S < 1 or V < K:
        raise ValueError(f"need V >= K >= 1 and S >= 1, got V={V}, K={K}, S={S}")
    rng = np.random.default_rng(seed)
    if K == 1 and V < MIN_HUMANOID_VERTICES:
        return _box_model(V, S, rng)
    if V < MIN_HUMANOID_VERTICES:
        raise ValueError(f"a humanoid needs V >= {MIN_HUMANOID_VERTICES}, got {V}")
    names, parents = toy_skeleton(K)

    # vertex budget per chain proportional to length x circumference
    cost = []
    for _, pnames, radii in _CHAINS:
        pts = np.array([_POINTS[n] if n else _POINTS["neck"] for n in pnames])
        length = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
        cost.append(length * np.mean([r[0] + r[1] for r in radii]))
    cost = np.array(cost)
    budgets = np.maximum(_CHAIN_MIN, np.floor(cost / cost.sum() * V).astype(int))
    while budgets.sum() > V:
        budgets[np.argmax(budgets - _CHAIN_MIN)] -= 1
    budgets[0] += V - budgets.sum()

    b = _Builder()
    joint_ring: dict[str, list[int]] = {}
    for (chain, pnames, radii), budget in zip(_CHAINS, budgets):
        if chain == "torso":
            pts = np.array([_POINTS[n] for n in pnames[:-1]] + [[0.0, 1.53, 0.0]])
            start = np.array(_TORSO_BOTTOM)
        else:
            pts = np.array([_POINTS[n] for n in pnames])
            first, second = pts[0], pts[1]
            start = first - 0.6 * radii[0][0] * (second - first) / np.linalg.norm(second - first)
        rings = _sweep(b, chain, pts, radii, int(budget), start)
        for n, ids in zip(pnames, rings):
            if n in SMPL_JOINTS and n not in joint_ring:
                joint_ring[n] = ids

    verts = np.array(b.verts)
    axis = np.array(b.axis)
    radial = np.array(b.radial)
    faces = _orient_outward(verts, np.array(b.faces, dtype=np.int64), axis)
    nv = len(verts)
    assert nv == V, (nv, V)

    weights = _skin_weights(b.tags, names)
    regressor = np.zeros((K, V))
    for k, n in enumerate(names):
        ids = joint_ring[n]
        regressor[k, ids] = 1.0 / len(ids)

    shape_dirs = _shape_dirs(verts, axis, radial, b.tags, S, rng)
    pose_dirs = np.zeros((V, 3, 9 * (K - 1)))
    if K > 1:
        gains = rng.normal(size=(9 * (K - 1),))
        for p in range(9 * (K - 1)):
            k = 1 + p // 9
            pose_dirs[:, :, p] = 0.002 * gains[p] * weights[:, k:k + 1] * radial
    return validate(BodyModel(verts, faces, shape_dirs, pose_dirs, regressor, weights, parents, names))


def _segment_joints(chain: str, sgm: int) -> tuple[str, str | None]:
    """Joint driving a segment (the last joint at or before its start) and the
    joint at its far end, if that point is a joint."""
    pnames = next(p for c, p, _ in _CHAINS if c == chain)
    a = next(n for n in reversed(pnames[: sgm + 1]) if n in SMPL_JOINTS)
    b = pnames[sgm + 1] if sgm + 1 < len(pnames) - 1 else None
    return a, (b if b in SMPL_JOINTS else None)


def _skin_weights(tags, names) -> np.ndarray:
    """Each ring follows its segment's proximal joint, blending half-way with the
    neighboring segment's joint over the outer quarter of the segment."""
    k = len(names)
    w = np.zeros((len(tags), k))
    for i, (chain, sgm, s) in enumerate(tags):
        a, b = _segment_joints(chain, sgm)
        own = _effective(a, names)
        w[i, own] += 1.0
        if s < 0.25:
            prev = _smpl_parent(a) if sgm == 0 else _segment_joints(chain, sgm - 1)[0]
            if prev is not None and prev != a:
                amount = 0.5 * (0.25 - s) / 0.25
                w[i, own] -= amount
                w[i, _effective(prev, names)] += amount
        elif s > 0.75 and b is not None:
            amount = 0.5 * (s - 0.75) / 0.25
            w[i, own] -= amount
            w[i, _effective(b, names)] += amount
    return w


def _shape_dirs(verts, axis, radial, tags, num_betas, rng) -> np.ndarray:
    """Shape directions that change stature, girth and limb proportions."""
    chain = np.array([t[0] for t in tags])
    arm = np.char.endswith(chain, "_arm")
    leg = np.char.endswith(chain, "_leg")
    torso = chain == "torso"
    head = chain == "head"
    side = np.sign(verts[:, 0])
    pelvis = np.array(_POINTS["pelvis"])
    neck = np.array(_POINTS["neck"])
    shoulder_x = _POINTS["left_shoulder"][0]
    hip_y = _POINTS["left_hip"][1]

    basis = []
    basis.append(0.03 * (verts - pelvis))  # stature
    basis.append(0.009 * radial)  # overall girth
    tw = np.zeros_like(verts)
    tw[torso, 0] = 0.015 * radial[torso, 0]
    basis.append(tw)  # torso width
    td = np.zeros_like(verts)
    td[torso, 2] = 0.015 * radial[torso, 2]
    basis.append(td)  # torso depth
    al = np.zeros_like(verts)
    reach = np.clip((np.abs(verts[:, 0]) - shoulder_x) / 0.6, 0.0, None)
    al[arm, 0] = 0.03 * side[arm] * reach[arm]
    basis.append(al)  # arm length
    ll = np.zeros_like(verts)
    drop = np.clip((hip_y - verts[:, 1]) / 0.8, 0.0, None)
    ll[leg, 1] = -0.035 * drop[leg]
    basis.append(ll)  # leg length
    sw = np.zeros_like(verts)
    sw[arm, 0] = 0.02 * side[arm]
    basis.append(sw)  # shoulder width
    ag = np.zeros_like(verts)
    ag[arm] = 0.007 * radial[arm]
    basis.append(ag)  # arm girth
    lg = np.zeros_like(verts)
    lg[leg] = 0.011 * radial[leg]
    basis.append(lg)  # leg girth
    hs = np.zeros_like(verts)
    hs[head] = 0.07 * (verts[head] - neck)
    basis.append(hs)  # head size

    dirs = np.zeros((len(verts), 3, num_betas))
    for s in range(num_betas):
        if s < len(basis):
            dirs[:, :, s] = rng.uniform(0.85, 1.15) * basis[s]
        else:
            mix = rng.normal(size=len(basis)) / np.sqrt(len(basis))
            dirs[:, :, s] = sum(c * d for c, d in zip(mix, basis))
    return dirs
