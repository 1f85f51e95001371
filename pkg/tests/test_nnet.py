import numpy as np
import pytest

from mfff import nnet
from mfff.exceptions import DimensionMismatch


def small_net(activation="silu", dim=3, seed=0, scale=0.5, depth=1, width=6, blocks=2):
    spec = nnet.NetworkSpec(dim, residual_blocks=blocks, inner_depth=depth, inner_width=width,
                            activation=activation, init_scale=scale)
    return nnet.init_near_identity(spec, np.random.default_rng(seed))


def affine_net(w, b):
    spec = nnet.NetworkSpec(len(b), residual_blocks=1, inner_depth=0, residual=False)
    params = nnet.NetworkParams(spec)
    params.layers[0][0][0][...] = w
    params.layers[0][0][1][...] = b
    return params


W = np.array([[1.0, 2.0], [-0.5, 3.0]])
B = np.array([0.1, -0.2])


def test_identity_at_zero_scale():
    params = small_net(scale=0.0)
    x = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_array_equal(nnet.forward(params, x), x)
    y, yd = nnet.jvp(params, x[0], np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(yd, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(nnet.jacobian(params, x[0]), np.eye(3))


def test_affine_case():
    params = affine_net(W, B)
    x, w, u = np.array([0.3, -1.0]), np.array([1.0, 0.5]), np.array([2.0, -1.0])
    np.testing.assert_allclose(nnet.forward(params, x), W @ x + B)
    np.testing.assert_allclose(nnet.jvp(params, x, w)[1], W @ w)
    np.testing.assert_allclose(nnet.jacobian(params, x), W)
    xb, g = nnet.vjp(params, x, u)
    np.testing.assert_allclose(xb, W.T @ u)
    np.testing.assert_allclose(g[:4].reshape(2, 2), np.outer(u, x))
    np.testing.assert_allclose(g[4:], u)
    g = nnet.grad_of_jvp(params, x, w, u)
    np.testing.assert_allclose(g[:4].reshape(2, 2), np.outer(u, w))
    np.testing.assert_array_equal(g[4:], 0.0)


def test_relu_positive_homogeneity_at_zero():
    params = small_net("relu", scale=1.0)
    assert np.all(params.layers[0][0][1] == 0)
    np.testing.assert_array_equal(nnet.forward(params, np.zeros(3)), np.zeros(3))


def test_zero_cotangent_and_zero_tangent_give_zero_gradients():
    params = small_net()
    x = np.array([0.1, 0.2, 0.3])
    _, g = nnet.vjp(params, x, np.zeros(3))
    assert np.all(g == 0)
    g = nnet.grad_of_jvp(params, x, np.zeros(3), np.ones(3))
    assert np.all(g == 0)


@pytest.mark.parametrize("act", ["silu", "sin", "tanh", "relu"])
def test_jvp_matches_finite_differences(act):
    params = small_net(act, scale=1.0, seed=2)
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal(3), rng.standard_normal(3)
    h = 1e-5
    fd = (nnet.forward(params, x + h * w) - nnet.forward(params, x - h * w)) / (2 * h)
    _, yd = nnet.jvp(params, x, w)
    assert np.linalg.norm(yd - fd) <= 1e-6 * np.linalg.norm(fd)


@pytest.mark.parametrize("act", ["silu", "sin", "tanh"])
def test_grad_of_jvp_matches_finite_differences(act):
    params = small_net(act, scale=1.0, seed=4)
    assert params.size <= 200
    rng = np.random.default_rng(5)
    x, w, u = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3)
    g = nnet.grad_of_jvp(params, x, w, u)
    h = 1e-5
    fd = np.zeros(params.size)
    for i in range(params.size):
        orig = params.flat[i]
        params.flat[i] = orig + h
        plus = u @ nnet.jvp(params, x, w)[1]
        params.flat[i] = orig - h
        minus = u @ nnet.jvp(params, x, w)[1]
        params.flat[i] = orig
        fd[i] = (plus - minus) / (2 * h)
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_vjp_param_grads_at_identity_match_finite_differences():
    params = small_net(scale=0.0, seed=6)
    rng = np.random.default_rng(7)
    x, u = rng.standard_normal(3), rng.standard_normal(3)
    xb, g = nnet.vjp(params, x, u)
    np.testing.assert_allclose(xb, u)
    h = 1e-5
    for i in rng.choice(params.size, 10, replace=False):
        orig = params.flat[i]
        params.flat[i] = orig + h
        plus = u @ nnet.forward(params, x)
        params.flat[i] = orig - h
        minus = u @ nnet.forward(params, x)
        params.flat[i] = orig
        fd = (plus - minus) / (2 * h)
        assert abs(g[i] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_adjoint_identity_and_jacobian_consistency():
    params = small_net("sin", scale=1.0, seed=8)
    rng = np.random.default_rng(9)
    x, w, u = (rng.standard_normal((4, 3)) for _ in range(3))
    _, yd = nnet.jvp(params, x, w)
    xb, _ = nnet.vjp(params, x, u)
    np.testing.assert_allclose(np.sum(u * yd, 1), np.sum(xb * w, 1), atol=1e-10)
    jac = nnet.jacobian(params, x)
    np.testing.assert_allclose(np.einsum("bij,bj->bi", jac, w), yd, atol=1e-12)


def test_per_example_gradients_sum_to_batch_gradient():
    params = small_net(seed=10, scale=1.0)
    rng = np.random.default_rng(11)
    x, w, u = (rng.standard_normal((5, 3)) for _ in range(3))
    per = nnet.grad_of_jvp(params, x, w, u, per_example=True)
    assert per.shape == (5, params.size)
    np.testing.assert_allclose(per.sum(axis=0), nnet.grad_of_jvp(params, x, w, u), atol=1e-12)
    single = nnet.grad_of_jvp(params, x[2], w[2], u[2])
    np.testing.assert_allclose(per[2], single, atol=1e-14)


def test_near_identity_deviation_bound():
    spec = nnet.NetworkSpec(3, init_scale=1e-2)
    params = nnet.init_near_identity(spec, np.random.default_rng(12))
    x = np.random.default_rng(13).standard_normal((1000, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    assert np.max(np.linalg.norm(nnet.forward(params, x) - x, axis=1)) < 0.1


def test_init_is_deterministic():
    spec = nnet.NetworkSpec(4)
    a = nnet.init_near_identity(spec, np.random.default_rng(14))
    b = nnet.init_near_identity(spec, np.random.default_rng(14))
    np.testing.assert_array_equal(a.flat, b.flat)


def test_flat_view_aliases_layers():
    params = small_net()
    params.flat[:] = 0.0
    assert all(np.all(w == 0) and np.all(b == 0) for block in params.layers for w, b in block)
    assert params.size == params.spec.n_params
    clone = nnet.NetworkParams(params.spec, params.flat.copy())
    np.testing.assert_array_equal(clone.flat, params.flat)


def test_dimension_checks():
    params = small_net()
    with pytest.raises(DimensionMismatch):
        nnet.forward(params, np.zeros(4))
    with pytest.raises(DimensionMismatch):
        nnet.NetworkParams(params.spec, np.zeros(3))
    with pytest.raises(ValueError):
        nnet.NetworkSpec(3, activation="gelu")
