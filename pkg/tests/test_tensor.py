import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradsuite
import oracles
from pace import tensor as T


def test_relu_forward_and_backward():
    layer = T.relu()
    tape = T.GradientTape()
    x = np.array([-1.0, 0.0, 2.0])
    assert T.forward(layer, x, tape).tolist() == [0.0, 0.0, 2.0]
    dx, dw = T.backward(layer, np.ones(3), tape)
    assert dx.tolist() == [0.0, 0.0, 1.0]
    assert dw == {}


def test_pointwise_identity_weights_pass_features_through():
    layer = T.pointwise(5, 5)
    layer.weights["w"][...] = np.eye(5)
    f = np.random.default_rng(0).normal(size=(2, 3, 3, 5))
    np.testing.assert_array_equal(T.forward(layer, f), f)


def test_conv_box_sums_on_ramp():
    x = np.arange(25, dtype=float).reshape(1, 5, 5, 1)
    layer = T.conv2d(1, 1)
    layer.weights["w"][...] = 1.0
    out = T.forward(layer, x)[0, :, :, 0]
    # interior cells are plain 3x3 box sums
    for r in range(1, 4):
        for c in range(1, 4):
            assert out[r, c] == x[0, r - 1:r + 2, c - 1:c + 2, 0].sum()
    np.testing.assert_allclose(out, oracles.conv2d_loops(x, layer.weights["w"],
                                                         layer.weights["b"])[0, :, :, 0])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    layer = T.conv2d(3, 4, stride=stride, rng=rng)
    layer.weights["b"][...] = rng.normal(size=4)
    x = rng.normal(size=(2, 6, 6, 3))
    np.testing.assert_allclose(T.forward(layer, x),
                               oracles.conv2d_loops(x, layer.weights["w"], layer.weights["b"], stride),
                               atol=1e-12)


def test_maxpool_matches_loop_oracle():
    x = np.random.default_rng(1).normal(size=(2, 6, 4, 3))
    np.testing.assert_array_equal(T.forward(T.maxpool2d(2), x), oracles.maxpool_loops(x))


def test_fused_softmax_cross_entropy_gradient():
    loss, grad = T.softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad, [[-0.5, 0.5]])


def test_fd_check_on_quadratic():
    err = T.fd_check(lambda x: (float(np.sum(x ** 2)), 2 * x), np.array([1.0, 2.0]))
    assert err < 1e-8


def test_fd_check_rejects_bad_step():
    with pytest.raises(ValueError):
        T.fd_check(lambda x: (0.0, x), np.zeros(2), h=0.0)


def test_fd_check_detects_wrong_gradient():
    assert T.fd_check(lambda x: (float(np.sum(x ** 2)), x), np.array([1.0, 2.0])) > 0.5


@pytest.mark.parametrize("kind", gradsuite.LAYER_KINDS)
def test_layer_gradients(kind):
    for seed in range(5):
        assert gradsuite.layer_error(kind, seed) < 1e-6


def test_tape_rejects_mismatched_backward():
    a, b = T.relu(), T.relu()
    tape = T.GradientTape()
    T.forward(a, np.ones(3), tape)
    with pytest.raises(T.TapeError):
        T.backward(b, np.ones(3), tape)
    with pytest.raises(T.TapeError):
        T.backward(a, np.ones(3), T.GradientTape())


def test_shape_mismatch_is_reported():
    with pytest.raises(T.ShapeError):
        T.forward(T.dense(4, 2), np.ones((3, 5)))
    with pytest.raises(T.ShapeError):
        T.forward(T.conv2d(3, 2), np.ones((1, 4, 4, 2)))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_is_reported():
    layer = T.dense(2, 1)
    layer.weights["w"][...] = 1e308
    with pytest.raises(T.NumericError):
        T.forward(layer, np.array([[1e308, 1e308]]))


def test_pointwise_layers_are_bias_free():
    with pytest.raises(T.ShapeError):
        T.LayerParams(T.LayerKind.POINTWISE, {"w": np.eye(2), "b": np.zeros(2)},
                      {"in_ch": 2, "out_ch": 2})


def test_adam_zero_gradient_no_decay_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    opt = T.Adam(lr=0.1)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0])}
    T.Adam(lr=0.1).step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_converges_on_quadratic():
    p = {"w": np.array([0.0])}
    opt = T.Adam(lr=0.1)
    for _ in range(100):
        opt.step(p, {"w": 2 * (p["w"] - 3.0)})
    assert abs(p["w"][0] - 3.0) < 0.1


def test_adam_weight_decay_is_decoupled():
    # with zero gradient only the decay term acts: w <- w - lr * wd * w
    p = {"w": np.array([2.0])}
    T.Adam(lr=0.1, weight_decay=0.5).step(p, {"w": np.zeros(1)})
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    p = T.softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(z + 7.0), p, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3))
def test_pointwise_is_linear(seed, scale):
    rng = np.random.default_rng(seed)
    layer = T.pointwise(4, 3, rng=rng)
    x = rng.normal(size=(2, 2, 4))
    np.testing.assert_allclose(T.forward(layer, scale * x), scale * T.forward(layer, x),
                               atol=1e-10)
