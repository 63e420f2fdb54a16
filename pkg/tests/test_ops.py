import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viplface import gradcheck
from viplface.errors import (
    BatchSizeError,
    ConfigError,
    DataError,
    ShapeError,
    StateCorruptionError,
    UsageError,
)
from viplface.gradcheck import numeric_grad, rel_error
from viplface.ops import (
    ConvParams,
    DropoutParams,
    FnlState,
    PoolParams,
    conv_backward,
    conv_forward,
    conv_shape,
    dropout_backward,
    dropout_forward,
    fc_backward,
    fc_forward,
    fnl_backward,
    fnl_forward,
    pool_backward,
    pool_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_loss_backward,
    softmax_loss_forward,
)


def conv(x, w, b=None, stride=1, pad=0, group=1):
    w = np.asarray(w, dtype=np.float32)
    b = np.zeros(w.shape[0], np.float32) if b is None else np.asarray(b, np.float32)
    return conv_forward(np.asarray(x, np.float32), ConvParams(w, b, stride, pad, group))


# -- conv --------------------------------------------------------------------

def test_conv_shape_examples():
    assert conv_shape((3, 227, 227), 48, 9, stride=4) == (48, 55, 55)
    assert conv_shape((48, 27, 27), 128, 3, stride=1, pad=1) == (128, 27, 27)
    assert conv_shape((5, 7, 9), 2, 1) == (2, 7, 9)


def test_conv_shape_rejects_empty_output():
    with pytest.raises(ShapeError):
        conv_shape((1, 2, 2), 1, 3)


def test_conv_counts_ones():
    out = conv(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 4.0))


def test_conv_pointwise_identity():
    x = np.random.default_rng(0).standard_normal((1, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(conv(x, np.ones((1, 1, 1, 1))), x)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv(np.ones((2, 3, 3)), np.ones((1, 1, 2, 2)))


def test_conv_gradients_match_finite_differences():
    assert gradcheck.check_conv(np.random.default_rng(3)) < 1e-3


def test_grouped_conv_equals_two_independent_convs():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    w = rng.standard_normal((6, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(6).astype(np.float32)
    out = conv(x, w, b, pad=1, group=2)
    lo = conv(x[:, :2], w[:3], b[:3], pad=1)
    hi = conv(x[:, 2:], w[3:], b[3:], pad=1)
    np.testing.assert_allclose(out, np.concatenate([lo, hi], axis=1), atol=1e-6)


def test_conv_backward_shapes_for_single_image():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    p = ConvParams(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), np.zeros(3, np.float32))
    out = conv_forward(x, p)
    gi, gw, gb = conv_backward(np.ones_like(out), x, p)
    assert gi.shape == x.shape and gw.shape == p.weight.shape and gb.shape == (3,)
    np.testing.assert_allclose(gb, np.full(3, 9.0))


# -- relu --------------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(relu_forward(np.array([-1, 0, 2], np.float32)), [0, 0, 2])
    x = np.array([0.5, 3.0], np.float32)
    np.testing.assert_array_equal(relu_forward(x), x)
    np.testing.assert_array_equal(
        relu_backward(np.array([5, 7], np.float32), np.array([-1, 2], np.float32)), [0, 7])


def test_relu_backward_routes_zero_at_kink():
    np.testing.assert_array_equal(
        relu_backward(np.array([3.0], np.float32), np.array([0.0], np.float32)), [0.0])


# -- pooling -----------------------------------------------------------------

def test_pool_examples():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    out, idx = pool_forward(x, PoolParams("max", 2, 2))
    assert out.reshape(-1).tolist() == [4.0]
    out, _ = pool_forward(x, PoolParams("mean", 2, 2))
    assert out.reshape(-1).tolist() == [2.5]


def test_pool_max_tie_goes_to_first_index():
    x = np.ones((1, 1, 2, 2), np.float32)
    p = PoolParams("max", 2, 2)
    out, idx = pool_forward(x, p)
    g = pool_backward(np.ones_like(out), idx, p, x.shape)
    np.testing.assert_array_equal(g.reshape(-1), [1, 0, 0, 0])


def test_pool_mean_spreads_gradient_uniformly():
    x = np.zeros((1, 1, 2, 2), np.float32)
    p = PoolParams("mean", 2, 2)
    out, idx = pool_forward(x, p)
    g = pool_backward(np.full_like(out, 8.0), idx, p, x.shape)
    np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 2.0))


def test_pool_rejects_empty_output():
    with pytest.raises(ShapeError):
        pool_forward(np.ones((1, 1, 2, 2), np.float32), PoolParams("max", 3, 2))


@pytest.mark.parametrize("kind", ["max", "mean"])
def test_pool_gradients(kind):
    assert gradcheck.check_pool(np.random.default_rng(6), kind) < 1e-3


# -- inner product -----------------------------------------------------------

def test_fc_examples():
    x = np.array([[1.5, -2.0, 0.25]], np.float32)
    np.testing.assert_array_equal(fc_forward(x, np.eye(3, dtype=np.float32), np.zeros(3, np.float32)), x)
    out = fc_forward(np.array([[1, 1]], np.float32), np.array([[1, 2], [3, 4]], np.float32),
                     np.array([0.5, -0.5], np.float32))
    np.testing.assert_allclose(out, [[4.5, 5.5]])


def test_fc_length_mismatch():
    with pytest.raises(ShapeError):
        fc_forward(np.ones((1, 3), np.float32), np.ones((2, 4), np.float32), np.zeros(4, np.float32))


def test_fc_gradients():
    assert gradcheck.check_fc(np.random.default_rng(7)) < 1e-3
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6)).astype(np.float32)
    w = rng.standard_normal((6, 4)).astype(np.float32)
    gi, gw, gb = fc_backward(np.ones((2, 4), np.float32), x, w)
    np.testing.assert_allclose(gb, [2, 2, 2, 2])
    np.testing.assert_allclose(gi, np.tile(w.sum(axis=1), (2, 1)), rtol=1e-6)


# -- dropout -----------------------------------------------------------------

def test_dropout_test_mode_and_zero_ratio_are_identity():
    x = np.random.default_rng(9).standard_normal((4, 5)).astype(np.float32)
    out, _ = dropout_forward(x, DropoutParams(0.5, "test"))
    np.testing.assert_array_equal(out, x)
    out, mask = dropout_forward(x, DropoutParams(0.0, "train"), np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)
    np.testing.assert_array_equal(mask, np.ones_like(x))


def test_dropout_preserves_expectation():
    out, _ = dropout_forward(np.ones(10**5, np.float32), DropoutParams(0.5), np.random.default_rng(1))
    assert 0.97 <= out.mean() <= 1.03
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_backward_uses_forward_mask():
    x = np.arange(1, 9, dtype=np.float32)
    out, mask = dropout_forward(x, DropoutParams(0.5), np.random.default_rng(2))
    g = dropout_backward(np.ones_like(x), mask)
    np.testing.assert_array_equal(g * x, out)


def test_dropout_ratio_one_rejected():
    with pytest.raises(ConfigError):
        DropoutParams(1.0)


# -- softmax loss ------------------------------------------------------------

def test_softmax_loss_examples():
    assert softmax_loss_forward(np.zeros((1, 4), np.float32), [2]) == pytest.approx(math.log(4), abs=1e-6)
    logits = np.zeros((1, 5), np.float32)
    logits[0, 1] = 1000
    assert softmax_loss_forward(logits, [1]) < 1e-6


def test_softmax_loss_label_out_of_range():
    with pytest.raises(DataError):
        softmax_loss_forward(np.zeros((2, 3), np.float32), [0, 3])


def test_softmax_loss_gradient():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((3, 5))
    y = np.array([0, 4, 2])
    num = numeric_grad(lambda v: softmax_loss_forward(v, y), z.copy(), 1e-3)
    assert rel_error(softmax_loss_backward(z, y), num) < 1e-3


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, c, seed):
    z = np.random.default_rng(seed).uniform(-50, 50, (n, c))
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)


# -- fast normalization ------------------------------------------------------

def test_fnl_forward_hand_example():
    x = np.array([[1.0], [2.0], [3.0]])
    state = FnlState.create((1,), eps=0.0)
    out = fnl_forward(x, state, "train")
    s = math.sqrt(1.5)  # 1 / sqrt(2/3)
    np.testing.assert_allclose(out.ravel(), [-s, 0.0, s], atol=1e-12)
    np.testing.assert_allclose(out.ravel(), [-1.22474, 0.0, 1.22474], atol=1e-5)
    np.testing.assert_allclose(state.cache.mean.ravel(), [2.0])
    np.testing.assert_allclose(state.cache.var.ravel(), [2.0 / 3.0])


def test_fnl_running_update_example():
    state = FnlState.create((1,))
    fnl_forward(np.array([[1.0], [2.0], [3.0]]), state, "train")
    assert state.running_mean[0] == pytest.approx(0.02, abs=1e-7)
    assert state.running_var[0] == pytest.approx(0.99 + 0.01 * 2 / 3, abs=1e-7)
    assert state.running_var[0] == pytest.approx(0.99667, abs=1e-5)


def test_fnl_constant_batch_gives_zeros():
    out = fnl_forward(np.full((3, 2), 5.0, np.float32), FnlState.create((2,)), "train")
    np.testing.assert_array_equal(out, np.zeros((3, 2)))


def test_fnl_test_mode_uses_running_stats_without_mutation():
    state = FnlState(np.array([1.0], np.float32), np.array([4.0], np.float32), eps=0.0)
    out = fnl_forward(np.array([[3.0], [5.0]], np.float32), state, "test")
    np.testing.assert_allclose(out.ravel(), [1.0, 2.0])
    assert state.running_mean[0] == 1.0 and state.cache is None


def test_fnl_errors():
    with pytest.raises(BatchSizeError):
        fnl_forward(np.ones((1, 3), np.float32), FnlState.create((3,)), "train")
    bad = FnlState.create((3,))
    bad.running_var[1] = -0.5
    with pytest.raises(StateCorruptionError):
        fnl_forward(np.ones((2, 3), np.float32), bad, "test")
    with pytest.raises(UsageError):
        fnl_backward(np.ones((2, 3)), FnlState.create((3,)))


def test_fnl_single_sample_per_channel_map_is_enough():
    # one image still gives H*W values per channel statistic
    out = fnl_forward(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), FnlState.create((2,)), "train")
    assert out.shape == (1, 2, 3, 3)


def test_fnl_per_channel_vs_per_node_statistics():
    x = np.random.default_rng(11).standard_normal((4, 2, 3, 3))
    ch = FnlState.for_input((2, 3, 3))
    node = FnlState.for_input((2, 3, 3), per_node=True)
    assert ch.running_mean.shape == (2,) and node.running_mean.shape == (2, 3, 3)
    out_c = fnl_forward(x, ch, "train")
    out_n = fnl_forward(x, node, "train")
    np.testing.assert_allclose(out_c.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out_n.mean(axis=0), 0, atol=1e-12)


def test_fnl_backward_on_squared_loss():
    x = np.array([[1.0], [2.0], [3.0]])

    def loss(v):
        o = fnl_forward(v, FnlState.create((1,)), "train")
        return 0.5 * np.sum(o ** 2)

    state = FnlState.create((1,))
    out = fnl_forward(x, state, "train")
    g = fnl_backward(out, state)  # dL/do = o
    num = numeric_grad(loss, x.copy(), 1e-4)
    assert rel_error(g, num) < 1e-4
    assert abs(g.sum() - num.sum()) < 1e-4
    np.testing.assert_array_equal(fnl_backward(np.zeros_like(x), state), np.zeros_like(x))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 8, 32]), st.integers(0, 2**31 - 1))
def test_fnl_normalizes_every_node(n, seed):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((n, 64)) * rng.uniform(0.5, 3, 64) + rng.uniform(-2, 2, 64))
    state = FnlState.create((64,))
    out = fnl_forward(x.astype(np.float32), state, "train")
    var = state.cache.var.ravel()
    target = var / (var + state.eps)
    assert np.abs(out.astype(np.float64).mean(axis=0)).max() < 1e-5
    assert np.abs(out.astype(np.float64).var(axis=0) - target).max() < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_fnl_backward_matches_finite_differences(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d)) * 2 + 1
    r = rng.standard_normal((n, d))
    state = FnlState.create((d,))
    fnl_forward(x, state, "train")
    g = fnl_backward(r, state)

    def loss(v):
        return np.sum(r * fnl_forward(v, FnlState.create((d,)), "train"))

    num = numeric_grad(loss, x.copy(), 1e-5)
    assert rel_error(g, num) < 1e-4
    assert abs(g.sum() - num.sum()) < 1e-4


def test_fnl_running_mean_converges_geometrically():
    x = np.array([[1.0], [3.0]])
    state = FnlState.create((1,))
    for k in range(1, 6):
        fnl_forward(x, state, "train")
        assert state.running_mean[0] == pytest.approx(2.0 * (1 - 0.99 ** k), rel=1e-6)


def test_fnl_float32_shadow_checks():
    rng = np.random.default_rng(12)
    assert gradcheck.check_fnl(rng, np.float64) < 1e-4
    assert gradcheck.check_fnl(rng, np.float64, shape=(3, 2, 4, 4)) < 1e-4
    assert gradcheck.check_fnl(rng, np.float32) < 1e-3


def test_fnl_gradcheck_catches_sign_error():
    err = gradcheck.check_fnl(np.random.default_rng(13), backward=gradcheck.faulty_fnl_backward)
    assert err > 1e-2


# -- full suite --------------------------------------------------------------

def test_gradcheck_suite_passes():
    results = gradcheck.run_all(0)
    assert len(results) == 13
    assert all(r.passed for r in results), [(r.name, r.error) for r in results if not r.passed]
