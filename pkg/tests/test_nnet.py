"""Tests for the dense MLP kernel: shapes, exact values, finite differences."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from iia import nnet


def finite_difference_jacobian(fn, point, eps=1e-6):
    """Central-difference Jacobian of a vector function at one point."""
    point = np.asarray(point, dtype=np.float64)
    cols = []
    for j in range(point.size):
        bumped = point.copy()
        bumped[j] += eps
        up = fn(bumped)
        bumped[j] = point[j] - eps
        down = fn(bumped)
        cols.append((up - down) / (2.0 * eps))
    return np.stack(cols, axis=1)


# ----------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------

def test_init_deterministic_in_seed():
    a = nnet.mlp_init([3, 5, 2], "leaky_relu", seed=7)
    b = nnet.mlp_init([3, 5, 2], "leaky_relu", seed=7)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(a.biases, b.biases):
        assert np.array_equal(ba, bb)


def test_init_shapes_and_zero_bias():
    params = nnet.mlp_init([4, 4], "linear", seed=0)
    assert len(params.weights) == 1
    assert params.weights[0].shape == (4, 4)
    npt.assert_array_equal(params.biases[0], np.zeros(4))


def test_init_seeds_differ():
    a = nnet.mlp_init([3, 3], "linear", seed=1)
    b = nnet.mlp_init([3, 3], "linear", seed=2)
    assert np.any(a.weights[0] != b.weights[0])


def test_init_uniform_bound():
    params = nnet.mlp_init([9, 50, 2], "leaky_relu", seed=3)
    assert np.max(np.abs(params.weights[0])) <= 1.0 / 3.0


def test_init_maxout_doubles_hidden_rows():
    params = nnet.mlp_init([4, 6, 2], "maxout", seed=0)
    assert params.weights[0].shape == (12, 4)
    assert params.biases[0].shape == (12,)
    assert params.weights[1].shape == (2, 6)


def test_init_rejects_bad_dims_and_activation():
    with pytest.raises(ValueError):
        nnet.mlp_init([4], "linear", seed=0)
    with pytest.raises(ValueError):
        nnet.mlp_init([4, 0], "linear", seed=0)
    with pytest.raises(ValueError):
        nnet.mlp_init([4, 4], "softplus", seed=0)
    with pytest.raises(ValueError):
        nnet.mlp_init([4, 4, 4], "leaky_relu", seed=0, leak=1.5)


# ----------------------------------------------------------------------
# Forward
# ----------------------------------------------------------------------

def test_forward_identity_linear():
    params = nnet.mlp_init([3, 3], "linear", seed=0)
    params.weights[0] = np.eye(3)
    v = np.array([[0.5, -1.25, 2.0]])
    out, _ = nnet.mlp_forward(params, v)
    npt.assert_array_equal(out, v)


def test_forward_leaky_relu_negative_branch():
    params = nnet.mlp_init([1, 1, 1], "leaky_relu", seed=0, leak=0.2)
    params.weights = [np.array([[1.0]]), np.array([[1.0]])]
    params.biases = [np.zeros(1), np.zeros(1)]
    out, _ = nnet.mlp_forward(params, np.array([[-1.0]]))
    npt.assert_allclose(out, [[-0.2]])


def test_forward_maxout_two_groups():
    params = nnet.mlp_init([1, 1, 1], "maxout", seed=0)
    params.weights = [np.array([[1.0], [-1.0]]), np.array([[1.0]])]
    params.biases = [np.zeros(2), np.zeros(1)]
    out, _ = nnet.mlp_forward(params, np.array([[3.0]]))
    npt.assert_allclose(out, [[3.0]])


def test_forward_is_pure():
    params = nnet.mlp_init([4, 8, 3], "smooth_leaky_relu", seed=11)
    x = np.random.default_rng(0).normal(size=(5, 4))
    out1, _ = nnet.mlp_forward(params, x)
    out2, _ = nnet.mlp_forward(params, x)
    assert np.array_equal(out1, out2)


def test_forward_rejects_width_mismatch():
    params = nnet.mlp_init([4, 3], "linear", seed=0)
    with pytest.raises(ValueError):
        nnet.mlp_forward(params, np.zeros((2, 5)))


# ----------------------------------------------------------------------
# Backward
# ----------------------------------------------------------------------

def test_backward_single_linear_layer():
    params = nnet.mlp_init([3, 2], "linear", seed=5)
    x = np.array([[0.3, -0.7, 1.1]])
    up = np.array([[2.0, -1.0]])
    _, cache = nnet.mlp_forward(params, x)
    (wg, bg), input_grads = nnet.mlp_backward(params, cache, up)
    npt.assert_allclose(input_grads, up @ params.weights[0])
    npt.assert_allclose(wg[0], up.T @ x)
    npt.assert_allclose(bg[0], up[0])


def test_backward_zero_upstream():
    params = nnet.mlp_init([3, 4, 2], "maxout", seed=1)
    x = np.random.default_rng(2).normal(size=(6, 3))
    _, cache = nnet.mlp_forward(params, x)
    (wg, bg), input_grads = nnet.mlp_backward(params, cache, np.zeros((6, 2)))
    for g in wg + bg:
        npt.assert_array_equal(g, np.zeros_like(g))
    npt.assert_array_equal(input_grads, np.zeros((6, 3)))


@pytest.mark.parametrize("activation", ["leaky_relu", "smooth_leaky_relu", "maxout"])
def test_backward_matches_finite_differences(activation):
    rng = np.random.default_rng(42)
    params = nnet.mlp_init([3, 5, 4, 2], activation, seed=9)
    x = rng.normal(size=(7, 3))
    up = rng.normal(size=(7, 2))

    def closure(theta):
        trial = params.copy()
        nnet.mlp_set_param_vector(trial, theta)
        out, cache = nnet.mlp_forward(trial, x)
        (wg, bg), _ = nnet.mlp_backward(trial, cache, up)
        return float(np.sum(out * up)), nnet.flatten_params(wg + bg)

    err = nnet.grad_check(closure, nnet.mlp_param_vector(params), eps=1e-5)
    assert err < 1e-6


# ----------------------------------------------------------------------
# Input Jacobian
# ----------------------------------------------------------------------

def test_jacobian_linear_net_is_weight_product():
    params = nnet.mlp_init([4, 3, 2], "linear", seed=3)
    jac = nnet.input_jacobian(params, np.zeros(4))
    npt.assert_array_equal(jac, params.weights[1] @ params.weights[0])
    sub = nnet.input_jacobian(params, np.zeros(4), columns=[1, 3])
    npt.assert_array_equal(sub, (params.weights[1] @ params.weights[0])[:, [1, 3]])


def test_smooth_leaky_relu_derivative_at_zero():
    leak = 0.3
    d = nnet._act_derivative(np.zeros(1), "smooth_leaky_relu", leak)
    npt.assert_allclose(d, [(1.0 + leak) / 2.0])


@pytest.mark.parametrize("activation", ["leaky_relu", "smooth_leaky_relu", "maxout"])
def test_jacobian_matches_finite_differences(activation):
    rng = np.random.default_rng(7)
    params = nnet.mlp_init([4, 6, 3], activation, seed=13)
    point = rng.normal(size=4)

    def fn(p):
        out, _ = nnet.mlp_forward(params, p.reshape(1, -1))
        return out[0]

    jac = nnet.input_jacobian(params, point)
    fd = finite_difference_jacobian(fn, point)
    assert np.linalg.norm(jac - fd) / max(1.0, np.linalg.norm(fd)) < 1e-6

    cols = [0, 2]
    npt.assert_array_equal(nnet.input_jacobian(params, point, columns=cols), jac[:, cols])


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------

def test_sgd_zero_momentum_is_vanilla_step():
    params = nnet.mlp_init([2, 2], "linear", seed=0)
    theta0 = params.weights[0].copy()
    g = np.ones((2, 2))
    opt = nnet.OptState.for_params(params, lr=0.05, momentum=0.0)
    nnet.sgd_momentum_step(params, ([g], [np.zeros(2)]), opt)
    npt.assert_allclose(params.weights[0], theta0 - 0.05 * g)


def test_sgd_zero_lr_updates_velocity_only():
    params = nnet.mlp_init([2, 2], "linear", seed=0)
    theta0 = params.weights[0].copy()
    g = np.full((2, 2), 3.0)
    opt = nnet.OptState.for_params(params, lr=0.0, momentum=0.5)
    nnet.sgd_momentum_step(params, ([g], [np.zeros(2)]), opt)
    npt.assert_array_equal(params.weights[0], theta0)
    npt.assert_array_equal(opt.vel_weights[0], g)


def test_sgd_two_steps_hand_iterated():
    # v1 = 1, theta1 = -0.1; v2 = 0.9 + 1 = 1.9, theta2 = -0.1 - 0.19 = -0.29
    params = nnet.mlp_init([1, 1], "linear", seed=0)
    params.weights[0] = np.zeros((1, 1))
    opt = nnet.OptState.for_params(params, lr=0.1, momentum=0.9)
    g = ([np.ones((1, 1))], [np.zeros(1)])
    nnet.sgd_momentum_step(params, g, opt)
    npt.assert_allclose(params.weights[0], [[-0.1]])
    nnet.sgd_momentum_step(params, g, opt)
    npt.assert_allclose(params.weights[0], [[-0.29]])


def test_sgd_rejects_nan_gradient():
    params = nnet.mlp_init([2, 2], "linear", seed=0)
    opt = nnet.OptState.for_params(params, lr=0.1, momentum=0.9)
    bad = np.array([[np.nan, 0.0], [0.0, 0.0]])
    with pytest.raises(nnet.DivergenceError):
        nnet.sgd_momentum_step(params, ([bad], [np.zeros(2)]), opt)


# ----------------------------------------------------------------------
# Gradient checker
# ----------------------------------------------------------------------

def test_grad_check_quadratic():
    theta0 = np.random.default_rng(1).normal(size=20)

    def closure(theta):
        return 0.5 * float(theta @ theta), theta

    assert nnet.grad_check(closure, theta0) < 1e-9


def test_grad_check_flags_wrong_gradient():
    theta0 = np.ones(4)

    def closure(theta):
        return 0.5 * float(theta @ theta), 2.0 * theta

    assert nnet.grad_check(closure, theta0) > 0.1


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------

def test_json_round_trip_exact():
    params = nnet.mlp_init([4, 8, 8, 3], "maxout", seed=21)
    blob = json.loads(json.dumps(nnet.mlp_to_json(params)))
    back = nnet.mlp_from_json(blob)
    assert back.layer_dims == params.layer_dims
    assert back.activation == params.activation
    assert back.leak == params.leak
    for wa, wb in zip(params.weights, back.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(params.biases, back.biases):
        assert np.array_equal(ba, bb)
