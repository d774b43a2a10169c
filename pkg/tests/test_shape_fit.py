import numpy as np
import pytest
import scipy.sparse as sp

from bodyfit.body_model import Mesh, skin
from bodyfit.camera import project
from bodyfit.correspondence import Correspondence2D, build_correspondences
from bodyfit.optim import Stage, default_shape_schedule, numeric_jacobian
from bodyfit.shape_fit import (
    ShapeEnergyWeights,
    ShapeFitError,
    ShapeProblem,
    body_term,
    build_laplacian,
    fit_shape,
    laplacian_term,
    silhouette_term,
)
from bodyfit.silhouette import SilhouetteMask

W = ShapeEnergyWeights(6.5, 0.9, 0.05, 10.0)


def grid(n=6):
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces += [(a, a + 1, a + n + 1), (a, a + n + 1, a + n)]
    return Mesh(verts, np.array(faces))


@pytest.fixture(scope="module")
def perturbed(scene):
    b0 = scene.beta + 0.5 * np.random.default_rng(3).choice([-1.0, 1.0], scene.model.num_betas)
    return b0, fit_shape(scene.model, scene.theta, scene.cameras, scene.masks, b0, default_shape_schedule())


def test_laplacian_constants_and_rows(toy):
    lap = build_laplacian(Mesh(toy.template_vertices, toy.faces))
    assert np.abs(lap @ np.full((toy.num_vertices, 3), 2.5)).max() <= 1e-12
    assert np.abs(np.asarray(lap.sum(axis=1))).max() <= 1e-12
    pattern = (lap != 0).astype(int)
    assert (pattern != pattern.T).nnz == 0


def test_laplacian_tetrahedron():
    v = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    lap = build_laplacian(Mesh(v, np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])))
    x = np.array([[0.3, -1.0, 2.0], [1.0, 0.5, 0.0], [-2.0, 4.0, 1.0], [0.0, 0.0, 3.0]])
    assert np.allclose((lap @ x)[0], x[0] - x[1:].mean(axis=0), atol=1e-15)


def test_laplacian_linear_field_on_flat_grid():
    g = grid()
    lap = build_laplacian(g)
    field = g.vertices @ np.array([[0.7, -1.2, 0.1], [2.0, 0.3, -0.5], [0.0, 0.0, 0.0]]) + (1.0, 2.0, 3.0)
    out = lap @ field
    interior = [r * 6 + c for r in range(1, 5) for c in range(1, 5)]
    assert np.abs(out[interior]).max() < 1e-9


def test_laplacian_isolated_vertex_gives_zero_row(caplog):
    v = np.vstack([np.eye(3), [[5.0, 5.0, 5.0]]])
    lap = build_laplacian(Mesh(v, np.array([[0, 1, 2]])))
    assert lap[3].nnz == 0
    assert "isolated" in caplog.text


def test_regularizer_examples(toy):
    lap = build_laplacian(Mesh(toy.template_vertices, toy.faces))
    rng = np.random.default_rng(0)
    beta = rng.normal(size=toy.num_betas)
    zero = np.zeros((toy.num_vertices, 3))
    assert laplacian_term(toy, beta, zero, lap) == 0.0 and body_term(toy, beta, zero) == 0.0
    assert laplacian_term(toy, beta, np.tile([0.2, -0.1, 0.4], (toy.num_vertices, 1)), lap) <= 1e-20
    one = zero.copy()
    one[7] = (0.1, 0.0, 0.0)
    assert body_term(toy, beta, one) == pytest.approx(0.01, rel=1e-12)
    for _ in range(5):
        d = rng.normal(scale=0.05, size=(toy.num_vertices, 3))
        b = rng.normal(size=toy.num_betas)
        assert abs(laplacian_term(toy, b, d, lap) - np.sum((lap @ d) ** 2)) <= 1e-10
        assert abs(body_term(toy, b, d) - np.sum(d * d)) <= 1e-12


def test_silhouette_term_examples(scene):
    m = scene.model
    mesh = skin(m, scene.theta, scene.beta)
    uv = project(scene.cameras[0], mesh.vertices[100])
    pair = Correspondence2D(100, 0, uv, uv + (3.0, 4.0))
    energy, g3, g2 = silhouette_term(m, scene.theta, scene.beta, None, [], [pair], scene.cameras, W)
    assert len(g3) == 0 and g2[0] == pytest.approx(0.2, rel=1e-9)
    assert silhouette_term(m, scene.theta, scene.beta, None, [], [], scene.cameras, W)[0] == 0.0


@pytest.mark.xfail(strict=True, reason="targets are quantized to the pixel grid, so self-built pairs keep residuals of up to about one pixel and the energy stays near 0.5")
def test_silhouette_term_self_consistent(scene):
    p3, p2 = build_correspondences(scene.model, scene.theta, scene.beta, scene.cameras, scene.masks)
    assert silhouette_term(scene.model, scene.theta, scene.beta, None, p3, p2, scene.cameras, W)[0] < 1e-6


def dense(j):
    return j.toarray() if sp.issparse(j) else j


@pytest.mark.parametrize("seed", range(3))
def test_analytic_jacobians(small_scene, seed):
    sc = small_scene
    m = sc.model
    rng = np.random.default_rng(seed)
    prob = ShapeProblem(m, sc.theta, sc.cameras, optimize_offsets=True)
    prob.set_pairs(*build_correspondences(m, sc.theta, sc.beta, sc.cameras, sc.masks))
    assert len(prob.pairs.v3) and len(prob.pairs.v2)
    x = np.concatenate([sc.beta + rng.normal(scale=0.3, size=m.num_betas), rng.normal(scale=0.01, size=3 * m.num_vertices)])
    for term, arg in ((prob.silhouette_3d, 0.05), (prob.silhouette_2d, 10.0), (prob.laplacian_residuals, 6.5), (prob.body_residuals, 0.9)):
        _, jac = term(x, arg)
        num = numeric_jacobian(lambda y: term(y, arg, False)[0], x)
        jac = dense(jac)
        assert np.abs(jac - num).max() <= 1e-4 * max(np.abs(num).max(), 1e-8)


def test_offsets_off_leaves_d_bit_identical(small_scene):
    sc = small_scene
    d0 = np.random.default_rng(0).normal(scale=1e-3, size=(sc.model.num_vertices, 3))
    res = fit_shape(sc.model, sc.theta, sc.cameras, sc.masks, sc.beta * 0.5, default_shape_schedule(), d0=d0)
    assert res.d is d0 or np.array_equal(res.d, d0)


def test_traces_monotone(perturbed):
    _, res = perturbed
    assert len(res.traces) == 3
    for t in res.traces:
        assert all(b <= a for a, b in zip(t.energies, t.energies[1:]))


def test_offsets_mode_monotone_and_regularized(small_scene):
    sc = small_scene
    res = fit_shape(sc.model, sc.theta, sc.cameras, sc.masks, sc.beta * 0.5, default_shape_schedule(), optimize_offsets=True)
    for t in res.traces:
        assert all(b <= a for a, b in zip(t.energies, t.energies[1:]))
    assert np.abs(res.d).max() < 0.2


def test_perturbed_start_improves_iou(perturbed):
    _, res = perturbed
    assert np.mean(res.iou_after) >= np.mean(res.iou_before) + 0.02
    assert np.mean(res.iou_after) >= 0.95


@pytest.mark.xfail(strict=True, reason="boundary pixels quantize the data, so the ground truth is not a zero-residual optimum; the fit drifts by about 0.17 in beta")
def test_fixed_point_at_truth(scene):
    res = fit_shape(scene.model, scene.theta, scene.cameras, scene.masks, scene.beta, default_shape_schedule())
    assert np.abs(res.beta - scene.beta).max() <= 1e-6


@pytest.mark.xfail(strict=True, reason="contours constrain only some shape directions at toy resolution; per-coefficient error stays near 0.6")
def test_perturbed_recovers_beta(scene, perturbed):
    _, res = perturbed
    assert np.abs(res.beta - scene.beta).max() <= 0.1


def test_no_correspondences_raises(scene):
    empty = [SilhouetteMask.empty(*c.image_size) for c in scene.cameras]
    with pytest.raises(ShapeFitError, match="no correspondences"):
        fit_shape(scene.model, scene.theta, scene.cameras, empty, scene.beta, default_shape_schedule())


def test_weights_validation():
    with pytest.raises(ValueError):
        ShapeEnergyWeights(0.0, 1.0, 0.05)
    st = Stage({"w_L": 4.0, "w_B": 0.6}, 0.01)
    assert ShapeEnergyWeights.from_stage(st) == ShapeEnergyWeights(4.0, 0.6, 0.01, 10.0)
