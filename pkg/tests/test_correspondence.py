import json

import numpy as np
import pytest

from bodyfit.body_model import Mesh, blended_transforms, pose_blend, rest_vertices, skin
from bodyfit.camera import CameraParams, camera_center, pixel_ray, project
from bodyfit.correspondence import (
    PairingConfig,
    backproject_boundary,
    bounding_box_diagonal,
    boundary_membership,
    build_correspondences,
    contour_vertices,
    pairs_to_json,
)
from bodyfit.silhouette import DepthMap, SilhouetteMask, boundary_points, rasterize_silhouette

from conftest import rigid_model, uv_sphere

SPHERE_CAM = CameraParams(400.0, (128.0, 128.0), np.zeros(3), np.array([0.0, 0.0, 5.0]), (256, 256))


def plain(eps=0.15):
    return PairingConfig(normal_epsilon=eps, require_silhouette_edge=False)


@pytest.fixture(scope="module")
def pairs(scene):
    return build_correspondences(scene.model, scene.theta, scene.beta, scene.cameras, scene.masks)


def test_sphere_contour_near_great_circle():
    s = uv_sphere(24, 48, 1.0)
    # distant camera: the perspective contour shifts toward the eye by r^2 / distance
    cam = CameraParams(8000.0, (128.0, 128.0), np.zeros(3), np.array([0.0, 0.0, 100.0]), (256, 256))
    _, depth = rasterize_silhouette(s, cam)
    for cfg in (plain(), PairingConfig()):
        idx = contour_vertices(s, cam, depth, cfg)
        assert len(idx) > 0
        p = s.vertices[idx]
        to_circle = np.hypot(p[:, 2], 1.0 - np.hypot(p[:, 0], p[:, 1]))
        assert np.all(to_circle <= 2 * cfg.normal_epsilon * 1.0)


def test_occluded_vertex_excluded():
    s = uv_sphere(24, 48, 1.0)
    plane = np.array([[-3.0, -3.0, -2.0], [3.0, -3.0, -2.0], [3.0, 3.0, -2.0], [-3.0, 3.0, -2.0]])
    both_v = np.vstack([s.vertices, plane])
    n = len(s.vertices)
    both_f = np.vstack([s.faces, [[n, n + 1, n + 2], [n, n + 2, n + 3]]])
    both = Mesh(both_v, both_f).with_normals()
    _, open_depth = rasterize_silhouette(s, SPHERE_CAM)
    _, blocked_depth = rasterize_silhouette(both, SPHERE_CAM)
    seen = contour_vertices(both, SPHERE_CAM, open_depth, plain())
    assert np.any(seen < n)
    hidden = contour_vertices(both, SPHERE_CAM, blocked_depth, plain())
    assert not np.any(hidden < n)


def test_permissive_epsilon_selects_every_visible_vertex():
    s = uv_sphere(12, 24, 1.0)
    trivial = DepthMap(np.full((256, 256), np.inf))
    idx = contour_vertices(s, SPHERE_CAM, trivial, plain(2.0))
    assert np.array_equal(idx, np.arange(len(s.vertices)))


def test_backproject_own_projection(scene):
    m, theta, beta = scene.model, scene.theta, scene.beta
    mesh = skin(m, theta, beta, normals=True)
    cam = scene.cameras[1]
    canon = rest_vertices(m, beta)
    for v in (10, 500, 1500):
        uv = project(cam, mesh.vertices[v])
        got = backproject_boundary(m, theta, beta, cam, uv, v, mesh)
        assert np.abs(got - canon[v]).max() <= 1e-9


def test_backproject_zero_pose_lies_on_ray(toy):
    theta = np.zeros((toy.num_joints, 3))
    beta = np.zeros(toy.num_betas)
    mesh = skin(toy, theta, beta, normals=True)
    cam = CameraParams(300.0, (128.0, 128.0), np.array([np.pi, 0.0, 0.0]), np.array([0.0, 0.0, 4.0]), (256, 256))
    v = 42
    got = backproject_boundary(toy, theta, beta, cam, (100.0, 140.0), v, mesh)
    o, d = pixel_ray(cam, (100.0, 140.0))
    off = got - o
    assert np.linalg.norm(off - (off @ d) * d) <= 1e-9
    assert abs(np.linalg.norm(off) - np.linalg.norm(mesh.vertices[v] - camera_center(cam))) <= 1e-9


def test_backproject_round_trip(scene):
    m, theta, beta = scene.model, scene.theta, scene.beta
    mesh = skin(m, theta, beta, normals=True)
    a = blended_transforms(m, theta, beta)
    bp = pose_blend(m, theta)
    rng = np.random.default_rng(0)
    for view, cam in enumerate(scene.cameras):
        for v in rng.integers(0, m.num_vertices, 5):
            uv = project(cam, mesh.vertices[v]) + rng.uniform(-5, 5, 2)
            canon = backproject_boundary(m, theta, beta, cam, uv, v, mesh)
            world = a[v, :3, :3] @ (canon + bp[v]) + a[v, :3, 3]
            assert np.abs(project(cam, world) - uv).max() <= 1e-6


def test_self_correspondence_2d(scene, pairs):
    _, p2 = pairs
    mesh = skin(scene.model, scene.theta, scene.beta)
    assert len(p2) > 0
    for p in p2:
        assert np.linalg.norm(p.target - project(scene.cameras[p.view], mesh.vertices[p.vertex])) < 1.0


@pytest.mark.xfail(strict=True, reason="boundary targets sit on the pixel grid, so a rendered contour vertex misses its target by up to about one pixel and the 3D residual is of order 1e-3, not 1e-6")
def test_self_correspondence_3d(pairs):
    p3, _ = pairs
    assert max(np.linalg.norm(p.residual()) for p in p3) < 1e-6


def test_3d_pairs_within_threshold(scene, pairs):
    p3, _ = pairs
    limit = PairingConfig().distance_threshold * bounding_box_diagonal(scene.model, scene.beta)
    assert all(np.linalg.norm(p.residual()) <= limit for p in p3)


def test_empty_mask_view_has_no_pairs(scene, pairs):
    masks = list(scene.masks)
    masks[2] = SilhouetteMask.empty(*scene.cameras[2].image_size)
    p3, p2 = build_correspondences(scene.model, scene.theta, scene.beta, scene.cameras, masks)
    assert not any(p.view == 2 for p in p3) and not any(p.view == 2 for p in p2)
    _, full2 = pairs
    assert [(p.view, p.vertex) for p in p2] == [(p.view, p.vertex) for p in full2 if p.view != 2]


def test_sphere_pair_count():
    s = uv_sphere(24, 48, 1.0)
    model = rigid_model(s.vertices, s.faces)
    mask, depth = rasterize_silhouette(s, SPHERE_CAM)
    n = len(contour_vertices(s, SPHERE_CAM, depth, PairingConfig()))
    _, p2 = build_correspondences(model, np.zeros((1, 3)), np.zeros(1), [SPHERE_CAM], [mask])
    assert abs(len(p2) - n) <= 0.2 * n


def test_boundary_membership_and_lines(scene, pairs):
    p3, p2 = pairs
    assert boundary_membership(p2, scene.masks)
    for p in p2:
        pts = boundary_points(scene.masks[p.view])
        assert np.any(np.all(pts == p.boundary_point, axis=1))
    for p in p3:
        n, mo = p.canonical_line.direction, p.canonical_line.moment
        assert abs(np.linalg.norm(n) - 1.0) < 1e-12 and abs(n @ mo) < 1e-10


def test_deterministic_and_ordered(scene, pairs):
    again = build_correspondences(scene.model, scene.theta, scene.beta, scene.cameras, scene.masks)
    for a, b in zip(pairs, again):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert (x.view, x.vertex) == (y.view, y.vertex)
    keys = [(p.view, p.vertex) for p in pairs[1]]
    assert keys == sorted(keys)


def test_pairing_is_local(scene, pairs):
    _, p2 = pairs
    mesh = skin(scene.model, scene.theta, scene.beta)
    view = 0
    cam = scene.cameras[view]
    mine = [p for p in p2 if p.view == view]
    # a blob in a corner of the image; only pairs more than 40 px away are checked
    bits = scene.masks[view].bits.copy()
    bits[5:15, 5:15] = True
    uv = project(cam, mesh.vertices[[p.vertex for p in mine]])
    far = np.hypot(uv[:, 0] - 10, uv[:, 1] - 10) > 40
    assert far.sum() > 10
    masks = list(scene.masks)
    masks[view] = SilhouetteMask(bits)
    _, q2 = build_correspondences(scene.model, scene.theta, scene.beta, scene.cameras, masks)
    after = {p.vertex: p for p in q2 if p.view == view}
    for p, keep in zip(mine, far):
        if keep:
            assert np.array_equal(after[p.vertex].boundary_point, p.boundary_point)


def test_pairs_to_json(scene, pairs):
    p3, p2 = pairs
    mesh = skin(scene.model, scene.theta, scene.beta)
    rows = json.loads(pairs_to_json(p3, p2, scene.cameras, mesh))
    assert len(rows) == len(p3) + len(p2)
    assert {"view", "vertex", "boundary_uv", "residual"} <= set(rows[0])


def test_mask_size_mismatch_raises(scene):
    masks = list(scene.masks)
    masks[0] = SilhouetteMask.empty(10, 10)
    with pytest.raises(ValueError):
        build_correspondences(scene.model, scene.theta, scene.beta, scene.cameras, masks)


def test_pairing_config_validation():
    with pytest.raises(ValueError):
        PairingConfig(distance_threshold=0.0)
    with pytest.raises(ValueError):
        PairingConfig.from_dict({"bogus": 1})
