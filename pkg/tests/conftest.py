import numpy as np
import pytest

from bodyfit.body_model import BodyModel, Mesh
from bodyfit.camera import CameraParams
from bodyfit.synth import make_scene
from bodyfit.toy_model import make_toy_model


@pytest.fixture(scope="session")
def toy():
    return make_toy_model(seed=1, V=600, K=16, S=10)


@pytest.fixture(scope="session")
def suite_model():
    return make_toy_model(seed=0, V=2000, K=16, S=10)


@pytest.fixture(scope="session")
def scene(suite_model):
    beta = np.random.default_rng(7).uniform(-2, 2, suite_model.num_betas)
    return make_scene(suite_model, beta, n_views=4)


@pytest.fixture(scope="session")
def small_scene(toy):
    beta = np.random.default_rng(3).uniform(-1, 1, toy.num_betas)
    return make_scene(toy, beta, n_views=4, image_size=(256, 256))


def random_theta(rng, k, scale=0.3):
    return rng.normal(scale=scale, size=(k, 3))


def simple_camera(focal=100.0, pp=(50.0, 50.0), rotation=(0, 0, 0), translation=(0, 0, 0), size=(100, 100)):
    return CameraParams(focal, np.asarray(pp, float), np.asarray(rotation, float), np.asarray(translation, float), size)


def uv_sphere(n_lat=24, n_lon=48, radius=1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    verts = [(0.0, radius, 0.0)]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            lam = 2 * np.pi * j / n_lon
            verts.append((radius * np.sin(phi) * np.cos(lam), radius * np.cos(phi), radius * np.sin(phi) * np.sin(lam)))
    verts.append((0.0, -radius, 0.0))
    verts = np.array(verts) + np.asarray(center)
    faces = []
    for j in range(n_lon):
        faces.append((0, 1 + (j + 1) % n_lon, 1 + j))
    for i in range(n_lat - 2):
        a, b = 1 + i * n_lon, 1 + (i + 1) * n_lon
        for j in range(n_lon):
            j2 = (j + 1) % n_lon
            faces += [(a + j, a + j2, b + j), (a + j2, b + j2, b + j)]
    last = len(verts) - 1
    base = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append((last, base + j, base + (j + 1) % n_lon))
    return Mesh(verts, np.array(faces)).with_normals()


def rigid_model(vertices, faces, s=1) -> BodyModel:
    v = len(vertices)
    return BodyModel(
        np.asarray(vertices, float),
        np.asarray(faces),
        np.zeros((v, 3, s)),
        np.zeros((v, 3, 0)),
        np.full((1, v), 1.0 / v),
        np.ones((v, 1)),
        np.array([-1]),
        ("pelvis",),
    )


def chain_model(s=2, seed=0) -> BodyModel:
    """Two-joint chain along x with a box of vertices around each bone."""
    rng = np.random.default_rng(seed)
    verts = np.array([[x, y, z] for x in (0.0, 0.5, 1.0, 1.5, 2.0) for y in (-0.1, 0.1) for z in (-0.1, 0.1)])
    v = len(verts)
    w = np.clip(verts[:, 0] / 2.0, 0, 1)
    weights = np.column_stack([1 - w, w])
    reg = np.zeros((2, v))
    reg[0, verts[:, 0] == 0.0] = 0.25
    reg[1, verts[:, 0] == 1.0] = 0.25
    faces = np.array([[0, 1, 2], [1, 3, 2], [4, 5, 6], [5, 7, 6], [8, 9, 10], [9, 11, 10], [12, 13, 14], [13, 15, 14], [16, 17, 18], [17, 19, 18]])
    return BodyModel(
        verts,
        faces,
        0.05 * rng.normal(size=(v, 3, s)),
        0.01 * rng.normal(size=(v, 3, 9)),
        reg,
        weights,
        np.array([-1, 0]),
        ("pelvis", "left_hip"),
    )
