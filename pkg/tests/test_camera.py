import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from bodyfit.camera import (
    BehindCameraError,
    CameraParams,
    NotARotationError,
    camera_center,
    dump_cameras,
    load_cameras,
    pixel_ray,
    plucker_from_ray,
    point_line_residual,
    project,
    project_with_jacobian,
    rodrigues,
    rodrigues_inv,
    rodrigues_with_jacobian,
)
from bodyfit.optim import numeric_jacobian

from conftest import simple_camera

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3).map(np.array)


def random_camera(rng, size=(640, 480)):
    return CameraParams(rng.uniform(200, 800), rng.uniform(100, 400, 2), rng.normal(scale=0.5, size=3), rng.normal(scale=0.3, size=3) + (0, 0, 4), size)


def test_project_optical_axis():
    cam = simple_camera()
    assert np.allclose(project(cam, [0, 0, 1]), (50, 50))
    assert np.allclose(project(cam, [0.1, 0, 1]), (60, 50))


def test_project_matches_homogeneous_matrix():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cam = random_camera(rng)
        p = rng.normal(size=3)
        h = cam.matrix() @ np.append(p, 1.0)
        assert np.allclose(project(cam, p), h[:2] / h[2], atol=1e-10, rtol=0)


def test_project_behind_camera_raises():
    cam = simple_camera()
    with pytest.raises(BehindCameraError):
        project(cam, [0, 0, -1])
    with pytest.raises(BehindCameraError):
        project(cam, camera_center(cam))


def test_focal_scale_covariance():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    cam2 = CameraParams(2 * cam.focal, cam.principal_point, cam.rotation, cam.translation, cam.image_size)
    p = rng.normal(size=(10, 3)) * 0.3
    # bit-exact when the offset is the projected coordinate itself
    c0 = CameraParams(cam.focal, (0.0, 0.0), cam.rotation, cam.translation, cam.image_size)
    c1 = CameraParams(2 * cam.focal, (0.0, 0.0), cam.rotation, cam.translation, cam.image_size)
    assert np.array_equal(project(c1, p), 2 * project(c0, p))
    # adding then removing a principal point rounds at the ulp level
    assert np.allclose(project(cam2, p) - cam.principal_point, 2 * (project(cam, p) - cam.principal_point), rtol=1e-12, atol=1e-12)


def test_camera_center():
    assert np.allclose(camera_center(simple_camera(translation=(0, 0, -5))), (0, 0, 5))
    cam = simple_camera(rotation=(0, np.pi, 0), translation=(0, 0, -5))
    assert np.allclose(camera_center(cam), (0, 0, -5))
    ahead = camera_center(cam) + 1e-3 * cam.rotation_matrix.T @ np.array([0.1, 0.0, 1.0])
    assert np.all(np.isfinite(project(cam, ahead)))


def test_pixel_ray_principal_point_and_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(50):
        cam = random_camera(rng)
        o, d = pixel_ray(cam, cam.principal_point)
        assert np.allclose(cam.rotation_matrix @ d, (0, 0, 1))
        p = rng.normal(size=3) * 0.5
        uv = project(cam, p)
        o, d = pixel_ray(cam, uv)
        assert np.allclose(project(cam, o + np.linalg.norm(p - o) * d), uv, atol=1e-8, rtol=0)
        for s in (0.5, 3.0, 40.0):
            assert np.allclose(project(cam, o + s * d), uv, atol=1e-8, rtol=0)
    cam = simple_camera()
    assert abs(pixel_ray(cam, (10, 10))[1] @ pixel_ray(cam, (80, 30))[1]) < 1 - 1e-6


def test_plucker_examples():
    line = plucker_from_ray((0, 0, 0), (0, 0, 1))
    assert np.allclose(line.direction, (0, 0, 1)) and np.allclose(line.moment, 0)
    line = plucker_from_ray((1, 0, 0), (0, 0, 1))
    assert np.allclose(line.moment, (0, -1, 0))
    with pytest.raises(ValueError):
        plucker_from_ray((1, 0, 0), (0, 0, 0))


@given(vec3, vec3.filter(lambda d: np.linalg.norm(d) > 1e-3))
def test_plucker_invariants(origin, direction):
    line = plucker_from_ray(origin, direction)
    assert abs(np.linalg.norm(line.direction) - 1) < 1e-12
    assert abs(line.moment @ line.direction) < 1e-12


def test_point_line_residual_examples():
    line = plucker_from_ray((0, 0, 0), (0, 0, 1))
    assert np.linalg.norm(point_line_residual((3, 4, 7), line)) == pytest.approx(5.0)
    line = plucker_from_ray((1, 2, 3), (1, -1, 0.5))
    assert np.linalg.norm(point_line_residual(np.array((1, 2, 3)) + 2.5 * line.direction, line)) < 1e-12


def brute_distance(p, o, d):
    d = d / np.linalg.norm(d)
    res = minimize_scalar(lambda s: np.sum((o + s * d - p) ** 2), bracket=(-10, 10), tol=1e-14)
    return np.linalg.norm(o + res.x * d - p)


def test_point_line_residual_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p, o, d = rng.normal(size=(3, 3))
        line = plucker_from_ray(o, d)
        assert abs(np.linalg.norm(point_line_residual(p, line)) - brute_distance(p, o, d)) < 1e-9


@given(vec3, vec3, vec3.filter(lambda d: np.linalg.norm(d) > 1e-2), st.floats(-5, 5))
@settings(max_examples=50)
def test_residual_invariant_to_sliding_origin(p, o, d, s):
    a = np.linalg.norm(point_line_residual(p, plucker_from_ray(o, d)))
    b = np.linalg.norm(point_line_residual(p, plucker_from_ray(o + s * d, d)))
    assert abs(a - b) < 1e-9


def test_rodrigues_examples():
    assert np.array_equal(rodrigues((0, 0, 0)), np.eye(3))
    assert np.allclose(rodrigues((0, 0, np.pi / 2)) @ (1, 0, 0), (0, 1, 0))
    with pytest.raises(NotARotationError):
        rodrigues_inv(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotARotationError):
        rodrigues_inv(2 * np.eye(3))


@given(vec3)
def test_rodrigues_orthonormal(v):
    r = rodrigues(v)
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_rodrigues_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(500):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        v = axis * rng.uniform(1e-6, np.pi - 1e-3)
        assert np.allclose(rodrigues_inv(rodrigues(v)), v, atol=1e-10, rtol=0)
    tiny = np.array([1e-10, -2e-10, 3e-11])
    assert np.allclose(rodrigues(tiny), np.eye(3) + np.array([[0, -3e-11, -2e-10], [3e-11, 0, -1e-10], [2e-10, 1e-10, 0]]), atol=1e-18)


def test_rodrigues_jacobian():
    rng = np.random.default_rng(5)
    for v in [np.zeros(3), 1e-9 * rng.normal(size=3), 1e-3 * rng.normal(size=3)] + list(rng.normal(size=(20, 3))):
        _, jac = rodrigues_with_jacobian(v)
        num = numeric_jacobian(lambda x: rodrigues(x).reshape(-1), v, 1e-6)
        assert np.allclose(np.stack([jac[i].reshape(-1) for i in range(3)], axis=1), num, atol=1e-8)


def test_project_jacobian():
    rng = np.random.default_rng(6)
    cam = random_camera(rng)
    pts = rng.normal(size=(5, 3)) * 0.3
    uv, valid, d_pt, d_rot, d_tr = project_with_jacobian(cam, pts)
    assert valid.all()
    for i, p in enumerate(pts):
        assert np.allclose(d_pt[i], numeric_jacobian(lambda x: project(cam, x), p), rtol=1e-6, atol=1e-6)
        assert np.allclose(d_rot[i], numeric_jacobian(lambda r: project(cam.with_extrinsics(r, cam.translation), p), cam.rotation), rtol=1e-5, atol=1e-5)
        assert np.allclose(d_tr[i], numeric_jacobian(lambda t: project(cam.with_extrinsics(cam.rotation, t), p), cam.translation), rtol=1e-6, atol=1e-6)


def test_camera_file_round_trip():
    rng = np.random.default_rng(7)
    cams = [random_camera(rng) for _ in range(3)]
    back, given_ = load_cameras(dump_cameras(cams))
    assert all(given_)
    for a, b in zip(cams, back):
        assert a.focal == b.focal and np.array_equal(a.translation, b.translation) and np.array_equal(a.rotation, b.rotation)
    bare, given_ = load_cameras(dump_cameras(cams, extrinsics=False))
    assert not any(given_) and np.array_equal(bare[0].translation, np.zeros(3))


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraParams(0.0, (1, 1))
    with pytest.raises(ValueError):
        CameraParams(10.0, (1, 1), image_size=(0, 5))
