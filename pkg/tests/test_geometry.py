import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfff import geometry as G
from mfff.exceptions import DegenerateInput, OffManifold

MANIFOLDS = [G.Sphere(1), G.Sphere(2), G.Torus(2), G.SpecialOrthogonal3(), G.PoincareBall(2)]
IDS = [repr(m) for m in MANIFOLDS]


def random_ambient(man, count, rng):
    """Projectable points near (but mostly off) the manifold."""
    x = man.sample_uniform(count, rng)
    return x + 0.1 * rng.standard_normal(x.shape)


# -- projections -----------------------------------------------------------

def test_sphere_projection_normalises():
    np.testing.assert_allclose(G.Sphere(2).project([0.0, 0.0, 2.0]), [0.0, 0.0, 1.0])


def test_sphere_projection_rejects_zero():
    with pytest.raises(DegenerateInput):
        G.Sphere(2).project(np.zeros(3))


def test_torus_projection_rejects_zero_block():
    with pytest.raises(DegenerateInput):
        G.Torus(2).project([1.0, 1.0, 0.0, 0.0])


def test_so3_projection_of_reflected_diagonal_is_identity():
    y = np.diag([3.0, 2.0, -1.0]).ravel()
    np.testing.assert_allclose(G.SpecialOrthogonal3().project(y), np.eye(3).ravel(), atol=1e-14)


def test_so3_projection_rejects_tied_minimiser():
    # flipped input whose two smallest singular values coincide
    with pytest.raises(DegenerateInput):
        G.SpecialOrthogonal3().project(np.diag([2.0, 1.0, -1.0]).ravel())


def test_poincare_clamps_to_radius():
    out = G.PoincareBall(2, epsilon=1e-5).project([3.0, 4.0])
    np.testing.assert_allclose(out, [0.599994, 0.799992], rtol=0, atol=1e-12)


def test_poincare_interior_unchanged():
    y = np.array([0.3, -0.2])
    np.testing.assert_array_equal(G.PoincareBall(2).project(y), y)


@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_projection_idempotent(man):
    rng = np.random.default_rng(0)
    p = man.project(random_ambient(man, 10_000, rng))
    assert np.max(np.linalg.norm(man.project(p) - p, axis=-1)) <= 1e-10


@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_projection_lands_on_manifold(man):
    rng = np.random.default_rng(1)
    man.check_on_manifold(man.project(random_ambient(man, 500, rng)))


def test_so3_projection_beats_random_rotations():
    man = G.SpecialOrthogonal3()
    rng = np.random.default_rng(2)
    rots = man.sample_uniform(20_000, rng).reshape(-1, 3, 3)
    for _ in range(10):
        m = rng.standard_normal((3, 3))
        q = man.project(m.ravel()).reshape(3, 3)
        best = np.min(np.linalg.norm(rots - m, axis=(1, 2)))
        assert np.linalg.norm(q - m) <= best


# -- derivatives -----------------------------------------------------------

def test_sphere_jvp_examples():
    s = G.Sphere(1)
    np.testing.assert_allclose(s.project_jvp([1.0, 0.0], [0.0, 1.0]), [0.0, 1.0])
    np.testing.assert_allclose(s.project_jvp([1.0, 0.0], [1.0, 0.0]), [0.0, 0.0])


def test_so3_jvp_at_identity_fixes_skew():
    man = G.SpecialOrthogonal3()
    w = np.array([[0.0, 0.3, -0.2], [-0.3, 0.0, 0.5], [0.2, -0.5, 0.0]]).ravel()
    eye = np.eye(3).ravel()
    np.testing.assert_allclose(man.project_jvp(eye, w), w, atol=1e-14)
    h = 1e-6
    fd = (man.project(eye + h * w) - man.project(eye - h * w)) / (2 * h)
    np.testing.assert_allclose(fd, w, atol=1e-8)


@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_jvp_matches_finite_differences(man):
    rng = np.random.default_rng(3)
    y = random_ambient(man, 1000, rng)
    if isinstance(man, G.PoincareBall):
        y = y * 1.3  # mix of clamped and interior points
    v = rng.standard_normal(y.shape)
    h = 1e-6
    fd = (man.project(y + h * v) - man.project(y - h * v)) / (2 * h)
    err = np.linalg.norm(man.project_jvp(y, v) - fd, axis=-1) / np.maximum(np.linalg.norm(fd, axis=-1), 1.0)
    assert err.max() <= 1e-7


@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_hvp_matches_finite_differences(man):
    rng = np.random.default_rng(4)
    y = random_ambient(man, 200, rng)
    t, u = rng.standard_normal(y.shape), rng.standard_normal(y.shape)
    h = 1e-5
    fd = np.zeros_like(y)
    for i in range(man.m):
        e = np.zeros(man.m)
        e[i] = h
        plus = np.sum(u * man.project_jvp(y + e, t), axis=-1)
        minus = np.sum(u * man.project_jvp(y - e, t), axis=-1)
        fd[:, i] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(man.project_hvp(y, t, u), fd, atol=1e-7 * max(1.0, np.abs(fd).max()))


@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_jvp_is_symmetric(man):
    rng = np.random.default_rng(5)
    y = random_ambient(man, 100, rng)
    a, b = rng.standard_normal(y.shape), rng.standard_normal(y.shape)
    lhs = np.sum(a * man.project_jvp(y, b), axis=-1)
    rhs = np.sum(b * man.project_jvp(y, a), axis=-1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# -- tangent frames --------------------------------------------------------

def test_circle_frame_at_pole():
    frame = G.Sphere(1).tangent_frame(np.array([0.0, 1.0]))
    np.testing.assert_allclose(frame.projector, [[1.0, 0.0], [0.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(np.abs(frame.basis[:, 0]), [1.0, 0.0], atol=1e-15)


def test_poincare_frame_is_identity():
    frame = G.PoincareBall(2).tangent_frame(np.array([0.3, 0.4]))
    np.testing.assert_array_equal(frame.projector, np.eye(2))
    np.testing.assert_allclose(frame.basis.T @ frame.basis, np.eye(2), atol=1e-15)


def test_so3_projector_at_identity_splits_skew_and_symmetric():
    man = G.SpecialOrthogonal3()
    proj = man.tangent_projector(np.eye(3).ravel())
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 3))
    skew, sym = (a - a.T).ravel(), (a + a.T).ravel()
    np.testing.assert_allclose(proj @ skew, skew, atol=1e-14)
    np.testing.assert_allclose(proj @ sym, 0.0, atol=1e-14)
    assert np.linalg.matrix_rank(proj) == 3


@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_frame_invariants(man):
    rng = np.random.default_rng(7)
    x = man.sample_uniform(50, rng)
    frame = man.tangent_frame(x)
    q, p = frame.basis, frame.projector
    np.testing.assert_allclose(np.swapaxes(q, -1, -2) @ q, np.broadcast_to(np.eye(man.n), (50, man.n, man.n)), atol=1e-10)
    np.testing.assert_allclose(p, np.swapaxes(p, -1, -2), atol=1e-10)
    np.testing.assert_allclose(p @ p, p, atol=1e-10)
    s = np.linalg.svd(p, compute_uv=False)
    assert np.all(np.abs(s[:, : man.n] - 1.0) <= 1e-8)
    assert np.all(s[:, man.n:] <= 1e-8)
    v = rng.standard_normal(x.shape)
    np.testing.assert_allclose(man.project_jvp(x, v), np.einsum("bij,bj->bi", p, v), atol=1e-8)


# -- metrics, distances, volumes ------------------------------------------

def test_metrics():
    np.testing.assert_array_equal(G.Sphere(2).metric(np.array([0.0, 0.0, 1.0])), np.eye(3))
    ball = G.PoincareBall(2)
    np.testing.assert_allclose(ball.metric(np.zeros(2)), 4.0 * np.eye(2))
    x = np.array([0.5, 0.5])  # |x|^2 = 0.5
    np.testing.assert_allclose(ball.metric(x), 16.0 * np.eye(2))
    assert ball.half_log_metric_det(x) == pytest.approx(2.0 * math.log(4.0))


def test_geodesic_distance_examples():
    assert G.Sphere(2).geodesic_distance(np.array([1.0, 0, 0]), np.array([-1.0, 0, 0])) == pytest.approx(math.pi)
    torus = G.Torus(1)
    a, b = torus.from_angles(np.array([0.0])), torus.from_angles(np.array([1.5 * math.pi]))
    assert torus.geodesic_distance(a, b) == pytest.approx(0.5 * math.pi)
    x = np.array([0.2, -0.1])
    assert G.PoincareBall(2).geodesic_distance(x, x) == 0.0


def test_so3_distance_is_rotation_angle():
    man = G.SpecialOrthogonal3()
    c, s = math.cos(0.7), math.sin(0.7)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    assert man.geodesic_distance(np.eye(3).ravel(), rot.ravel()) == pytest.approx(0.7)


def test_volumes():
    assert G.Sphere(1).volume == pytest.approx(2 * math.pi)
    assert G.Sphere(2).volume == pytest.approx(4 * math.pi)
    assert G.Torus(2).volume == pytest.approx(4 * math.pi**2)
    assert G.SpecialOrthogonal3().volume == pytest.approx(8 * math.pi**2)
    assert G.PoincareBall(2).volume == math.inf


# -- sampling --------------------------------------------------------------

def test_sphere_uniform_mean_is_zero():
    x = G.Sphere(2).sample_uniform(100_000, np.random.default_rng(8))
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_so3_haar_trace_moments():
    # Haar invariance gives E[tr X] = 0 and E[(tr X)^2] = 1; a quaternion sampler is the oracle
    rng = np.random.default_rng(9)
    x = G.SpecialOrthogonal3().sample_uniform(100_000, rng).reshape(-1, 3, 3)
    assert np.all(np.abs(np.linalg.det(x) - 1.0) < 1e-10)
    q = rng.standard_normal((100_000, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    oracle = 4.0 * q[:, 0] ** 2 - 1.0
    tr = np.trace(x, axis1=1, axis2=2)
    for sample in (tr, oracle):
        assert abs(sample.mean()) < 0.05
        assert abs(np.mean(sample**2) - 1.0) < 0.05
    assert abs(tr.mean() - oracle.mean()) < 0.05


def test_torus_angles_uniform():
    from scipy.stats import chisquare

    torus = G.Torus(2)
    ang = torus.to_angles(torus.sample_uniform(100_000, np.random.default_rng(10)))
    for k in range(2):
        counts, _ = np.histogram(np.mod(ang[:, k], 2 * math.pi), bins=20, range=(0, 2 * math.pi))
        assert chisquare(counts).pvalue > 0.01


def test_samples_are_reproducible():
    a = G.SpecialOrthogonal3().sample_uniform(5, np.random.default_rng(11))
    b = G.SpecialOrthogonal3().sample_uniform(5, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_check_on_manifold():
    s = G.Sphere(2)
    s.check_on_manifold(np.array([0.0, 0.0, 1.0]))
    with pytest.raises(OffManifold):
        s.check_on_manifold(np.array([0.0, 0.0, 1.1]))


# -- exponential map -------------------------------------------------------

def test_exp0_examples():
    np.testing.assert_array_equal(G.exp0_poincare(np.zeros(2)), np.zeros(2))
    assert G.logdet_jac_exp0(np.zeros(2)) == 0.0
    np.testing.assert_allclose(G.exp0_poincare(np.array([1.0, 0.0])), [math.tanh(1.0), 0.0])
    # log(tanh 1) - 2 log(cosh 1)
    assert G.logdet_jac_exp0(np.array([1.0, 0.0])) == pytest.approx(-1.139904, abs=1e-6)


@pytest.mark.parametrize("v", [[1.0, 0.0], [0.3, -1.2], [2.5, 1.0], [1e-3, 2e-3]])
def test_logdet_exp0_matches_numerical_jacobian(v):
    v = np.array(v)
    h = 1e-6
    jac = np.column_stack([(G.exp0_poincare(v + h * e) - G.exp0_poincare(v - h * e)) / (2 * h)
                           for e in np.eye(2)])
    assert G.logdet_jac_exp0(v) == pytest.approx(math.log(abs(np.linalg.det(jac))), abs=1e-6)


def test_logdet_exp0_general_dimension():
    v = np.array([0.4, -0.3, 0.9])
    h = 1e-6
    jac = np.column_stack([(G.exp0_poincare(v + h * e) - G.exp0_poincare(v - h * e)) / (2 * h)
                           for e in np.eye(3)])
    assert G.logdet_jac_exp0(v) == pytest.approx(math.log(abs(np.linalg.det(jac))), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(-5, 5)))
def test_log0_inverts_exp0(v):
    np.testing.assert_allclose(G.log0_poincare(G.exp0_poincare(v)), v, atol=1e-6 * (1 + np.abs(v).max() ** 4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-10, 10)).filter(lambda y: np.linalg.norm(y) > 1e-3))
def test_sphere_projection_property(y):
    p = G.Sphere(2).project(y)
    assert abs(np.linalg.norm(p) - 1.0) < 1e-12
    np.testing.assert_allclose(G.Sphere(2).project(p), p, atol=1e-12)


# -- descriptors -----------------------------------------------------------

@pytest.mark.parametrize("man", MANIFOLDS, ids=IDS)
def test_description_round_trip(man):
    assert G.manifold_from_description(man.describe()) == man


def test_make_manifold_aliases():
    assert G.make_manifold("Poincare-Ball", 2) == G.PoincareBall(2)
    assert G.make_manifold("so3") == G.SpecialOrthogonal3()
    with pytest.raises(ValueError):
        G.make_manifold("klein", 2)
    with pytest.raises(ValueError):
        G.PoincareBall(2, epsilon=1.5)


def test_distances_are_accurate_for_tiny_separations():
    eps = 1e-9
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([math.cos(eps), math.sin(eps), 0.0])
    assert G.Sphere(2).geodesic_distance(a, b) == pytest.approx(eps, rel=1e-6)
    assert G.Sphere(2).geodesic_distance(a, -a) == pytest.approx(math.pi, rel=1e-15)
    c, s = math.cos(eps), math.sin(eps)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    assert G.SpecialOrthogonal3().geodesic_distance(np.eye(3).ravel(), rot.ravel()) == pytest.approx(eps, rel=1e-6)
    ball = G.PoincareBall(2)
    # near the origin the ball metric is 2x the Euclidean one
    assert ball.geodesic_distance(np.zeros(2), np.array([eps, 0.0])) == pytest.approx(2 * eps, rel=1e-6)
