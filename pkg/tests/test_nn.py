import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import numerical_grad, rel_error
from oracles import conv_flops_closed_form, conv_out, naive_conv3d
from tc3d.errors import LabelError, ShapeError
from tc3d.nn import (Conv3d, Dropout, GlobalAvgPool, Linear, Network, ReLU, Residual,
                     build_reference_net, conv3d_backward, conv3d_forward, count_flops,
                     fc_backward, fc_forward, softmax, softmax_cross_entropy)
from tc3d.optim import OptimState, sgd_momentum_step, step_lr

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def conv(in_ch, out_ch, kernel, stride=1, padding=0, seed=0):
    return Conv3d(in_ch, out_ch, kernel, stride, padding, rng=np.random.default_rng(seed))


def identity_conv(channels=1):
    layer = Conv3d(channels, channels, 1, 1, 0)
    for c in range(channels):
        layer.params["weight"][c, c] = 1.0
    return layer


# -- conv3d ------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(1, 3, 4, 5))
    assert np.array_equal(conv3d_forward(x, identity_conv()), x)


def test_conv_all_ones_sums_to_eight():
    layer = Conv3d(1, 1, 2, 1, 0)
    layer.params["weight"][...] = 1.0
    out = conv3d_forward(np.ones((1, 2, 2, 2)), layer)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 8.0


def test_conv_full_size_input_extent_preserved():
    layer = Conv3d(1, 2, 3, 1, 1)
    assert layer.output_shape((1, 8, 112, 112)) == (2, 8, 112, 112)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), ((1, 2, 2), (0, 1, 1))])
def test_conv_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(3)
    layer = conv(2, 3, (2, 3, 3), stride, padding)
    layer.params["bias"][...] = rng.normal(size=3)
    x = rng.normal(size=(2, 4, 5, 5))
    expected = naive_conv3d(x, layer.params["weight"], layer.params["bias"],
                            layer.stride, layer.padding)
    np.testing.assert_allclose(conv3d_forward(x, layer), expected, rtol=1e-12, atol=1e-12)


def test_conv_batch_equals_per_sample():
    layer = conv(2, 3, 3, 2, 1)
    x = np.random.default_rng(0).normal(size=(4, 2, 4, 6, 6))
    batched = conv3d_forward(x, layer)
    for i in range(4):
        np.testing.assert_allclose(batched[i], conv3d_forward(x[i], layer), atol=1e-13)


def test_conv_channel_mismatch_names_both_shapes():
    layer = conv(3, 2, 3)
    with pytest.raises(ShapeError) as err:
        conv3d_forward(np.zeros((2, 4, 4, 4)), layer)
    assert (2, 4, 4, 4) in err.value.shapes
    assert (2, 3, 3, 3, 3) in err.value.shapes


def test_conv_backward_identity_passes_gradient():
    x = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
    g = np.random.default_rng(2).normal(size=x.shape)
    grad_in, _ = conv3d_backward(g, x, identity_conv())
    assert np.array_equal(grad_in, g)


def test_conv_backward_zero_grad():
    layer = conv(2, 3, 3, 1, 1)
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    grad_in, grads = conv3d_backward(np.zeros((3, 3, 4, 4)), x, layer)
    assert not grad_in.any() and not grads["weight"].any() and not grads["bias"].any()


def test_conv_backward_rejects_wrong_grad_shape():
    layer = conv(1, 2, 3, 1, 1)
    with pytest.raises(ShapeError):
        conv3d_backward(np.zeros((2, 3, 3, 3)), np.zeros((1, 4, 4, 4)), layer)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients_match_finite_differences(stride, padding):
    rng = np.random.default_rng(5)
    layer = conv(2, 2, 3, stride, padding, seed=6)
    layer.params["bias"][...] = rng.normal(size=2)
    x = rng.normal(size=(2, 4, 5, 5))
    g = rng.normal(size=layer.output_shape(x.shape))

    def f():
        return float((conv3d_forward(x, layer) * g).sum())

    grad_in, grads = conv3d_backward(g, x, layer)
    assert rel_error(grad_in, numerical_grad(f, x)) < 1e-6
    assert rel_error(grads["weight"], numerical_grad(f, layer.params["weight"])) < 1e-6
    assert rel_error(grads["bias"], numerical_grad(f, layer.params["bias"])) < 1e-6


# -- fully connected ------------------------------------------------------------

def test_fc_identity():
    layer = Linear(3, 3)
    layer.params["weight"][...] = np.eye(3)
    x = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(fc_forward(x, layer), x)


def test_fc_hand_product():
    layer = Linear(2, 2)
    layer.params["weight"][...] = [[1, 2], [3, 4]]
    assert fc_forward(np.array([1.0, 1.0]), layer).tolist() == [3.0, 7.0]


def test_fc_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        fc_forward(np.zeros(3), Linear(2, 2))


def test_fc_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    layer = Linear(5, 3, rng=rng)
    layer.params["bias"][...] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    g = rng.normal(size=(4, 3))

    def f():
        return float((fc_forward(x, layer) * g).sum())

    grad_in, grads = fc_backward(g, x, layer)
    assert rel_error(grad_in, numerical_grad(f, x)) < 1e-6
    assert rel_error(grads["weight"], numerical_grad(f, layer.params["weight"])) < 1e-6
    assert rel_error(grads["bias"], numerical_grad(f, layer.params["bias"])) < 1e-6


# -- parameter-free layers ------------------------------------------------------

def test_relu_values():
    assert ReLU().forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


def test_gap_constant_input():
    assert GlobalAvgPool().forward(np.full((1, 2, 2, 2), 3.0)).tolist() == [3.0]


@pytest.mark.parametrize("ratio", [0.0, 0.5, 0.8, 0.99])
def test_dropout_eval_is_identity(ratio):
    x = np.random.default_rng(0).normal(size=(3, 7))
    assert np.array_equal(Dropout(ratio).forward(x, train=False), x)


def test_dropout_train_zeroes_and_rescales():
    x = np.ones(100_000)
    out = Dropout(0.8).forward(x, train=True, rng=np.random.default_rng(0))
    kept = out != 0
    assert np.allclose(out[kept], 5.0)
    assert abs(kept.mean() - 0.2) < 0.01


def test_dropout_rejects_ratio_one():
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dropout_train_without_rng_or_mask():
    with pytest.raises(ValueError):
        Dropout(0.5).forward(np.ones(3), train=True)


def _check_layer_grad(layer, x, train=False):
    rng = np.random.default_rng(11)
    g = rng.normal(size=np.shape(layer.forward(x, train=train)))

    def f():
        return float((layer.forward(x, train=train) * g).sum())

    layer.forward(x, train=train)
    analytic = layer.backward(g)
    return rel_error(analytic, numerical_grad(f, x))


def test_relu_gradient():
    x = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    assert _check_layer_grad(ReLU(), x) < 1e-6


def test_gap_gradient():
    x = np.random.default_rng(2).normal(size=(2, 3, 2, 3, 2))
    assert _check_layer_grad(GlobalAvgPool(), x) < 1e-6


def test_dropout_gradient_with_fixed_mask():
    layer = Dropout(0.5)
    layer.mask = (np.random.default_rng(3).random((4, 6)) >= 0.5) / 0.5
    x = np.random.default_rng(4).normal(size=(4, 6))
    assert _check_layer_grad(layer, x, train=True) < 1e-6


def test_residual_gradient():
    rng = np.random.default_rng(9)
    block = Residual([conv(2, 2, 3, 1, 1, seed=1), ReLU()])
    x = rng.normal(size=(2, 3, 4, 4))
    assert _check_layer_grad(block, x) < 1e-6


# -- loss ---------------------------------------------------------------------

def test_cross_entropy_uniform_scores():
    loss, _ = softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(1.3862943611, abs=1e-10)


def test_cross_entropy_confident_score():
    loss, _ = softmax_cross_entropy(np.array([10.0, 0.0, 0.0]), 0)
    assert loss == pytest.approx(9.07957374672444e-05, rel=1e-9)


def test_cross_entropy_large_scores_stay_finite():
    loss, grad = softmax_cross_entropy(np.array([1000.0, -1000.0, 0.0]), 1)
    assert math.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(2000.0)


def test_cross_entropy_gradient():
    s = np.random.default_rng(0).normal(size=5)
    _, grad = softmax_cross_entropy(s, 3)
    assert rel_error(grad, numerical_grad(lambda: softmax_cross_entropy(s, 3)[0], s)) < 1e-6


@pytest.mark.parametrize("label", [-1, 4])
def test_cross_entropy_label_out_of_range(label):
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.zeros(4), label)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(scores):
    assert abs(softmax(scores).sum() - 1.0) <= 1e-12


# -- optimizer ----------------------------------------------------------------

def test_sgd_plain_step():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -0.25])}
    sgd_momentum_step(p, g, OptimState(learning_rate=1.0, momentum=0.0))
    assert p["w"].tolist() == [0.5, 2.25]


def test_sgd_two_momentum_steps():
    p = {"w": np.zeros(1)}
    state = OptimState(learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        sgd_momentum_step(p, {"w": np.ones(1)}, state)
    assert p["w"][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_zero_gradient_is_noop():
    p = {"w": np.array([3.0, -1.0])}
    sgd_momentum_step(p, {"w": np.zeros(2)}, OptimState())
    assert p["w"].tolist() == [3.0, -1.0]


def test_sgd_velocity_mirrors_parameters():
    p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    state = OptimState()
    sgd_momentum_step(p, {k: np.ones_like(v) for k, v in p.items()}, state)
    assert {k: v.shape for k, v in state.velocity.items()} == {k: v.shape for k, v in p.items()}


def test_sgd_mask_freezes_pruned_entries():
    p = {"w": np.array([1.0, 0.0, 2.0])}
    mask = {"w": np.array([True, False, True])}
    sgd_momentum_step(p, {"w": np.ones(3)}, OptimState(0.1, 0.9), masks=mask)
    assert p["w"][1] == 0.0


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState())


def test_step_lr_milestones():
    assert [step_lr(0.005, e, (2, 4)) for e in range(5)] == pytest.approx(
        [0.005, 0.005, 0.0005, 0.0005, 0.00005])


# -- flops ----------------------------------------------------------------------

def test_flops_single_fc():
    assert count_flops([Linear(100, 10)], (100,)) == 2000


def test_flops_single_conv():
    assert count_flops([Conv3d(1, 1, 2, 1, 0)], (1, 2, 2, 2)) == 16


def test_flops_empty_network():
    assert count_flops([], (1, 2, 3, 4)) == 0


@pytest.mark.parametrize("size", [16, 32])
def test_flops_reference_net_closed_form(size):
    net = build_reference_net(4, (1, 8, size, size))
    expected, extent, cin = 0, (8, size, size), 1
    for i, cout in enumerate((8, 16, 32, 32), 1):
        extent = tuple(conv_out(n, 3, 2 if i % 2 == 0 else 1, 1) for n in extent)
        expected += conv_flops_closed_form(cin, cout, 3, extent)
        cin = cout
    expected += 2 * 32 * 4
    assert count_flops(net, (1, 8, size, size)) == expected
    assert count_flops(build_reference_net(4, (1, 8, 16, 16)), (1, 8, 16, 16)) == 11_501_824


def test_flops_additive_over_concatenation():
    a = [Conv3d(1, 4, 3, 1, 1, name="a1"), ReLU(), Conv3d(4, 4, 3, 2, 1, name="a2")]
    b = [GlobalAvgPool(), Linear(4, 3)]
    shape = (1, 4, 8, 8)
    mid = Network(a, 4).output_shape(shape)
    assert count_flops(a + b, shape) == count_flops(a, shape) + count_flops(b, mid)


# -- network ----------------------------------------------------------------

def test_reference_net_shapes_compose():
    net = build_reference_net(5, (1, 8, 16, 16))
    assert net.output_shape((1, 8, 16, 16)) == (5,)
    assert net.forward(np.zeros((3, 1, 8, 16, 16))).shape == (3, 5)


def test_network_rejects_bad_class_count():
    layers = [GlobalAvgPool(), Linear(2, 3)]
    with pytest.raises(ShapeError):
        Network(layers, 4, (2, 2, 2, 2))


def test_same_seed_identical_weights():
    a = build_reference_net(4, (1, 8, 16, 16), seed=3).params()
    b = build_reference_net(4, (1, 8, 16, 16), seed=3).params()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_config_roundtrip_and_copy():
    net = build_reference_net(4, (1, 8, 16, 16), residual=True, seed=1)
    twin = net.copy()
    assert twin.config() == net.config()
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 16, 16))
    assert np.array_equal(twin.forward(x), net.forward(x))


def _toy_net(seed=0, residual=False):
    rng = np.random.default_rng(seed)
    layers = [Conv3d(1, 3, 3, 2, 1, name="c1", rng=rng), ReLU("r1")]
    if residual:
        layers.append(Residual([Conv3d(3, 3, 3, 1, 1, name="rc", rng=rng), ReLU("rr")], "res"))
    layers += [GlobalAvgPool("gap"), Dropout(0.5, "drop"), Linear(3, 4, name="fc", rng=rng)]
    for layer in layers:
        if "bias" in layer.params:
            layer.params["bias"][...] = rng.normal(scale=0.1, size=layer.params["bias"].shape)
    return Network(layers, 4, (1, 4, 6, 6))


@pytest.mark.parametrize("residual", [False, True])
def test_network_gradients_end_to_end(residual):
    net = _toy_net(residual=residual)
    drop = net.layers[-2]
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 1, 4, 6, 6))
    drop.mask = (rng.random((3, 3)) >= 0.5) / 0.5
    labels = [0, 2, 3]

    def loss():
        out = net.forward(x, train=True)
        return sum(softmax_cross_entropy(o, y)[0] for o, y in zip(out, labels))

    out = net.forward(x, train=True)
    grad = np.stack([softmax_cross_entropy(o, y)[1] for o, y in zip(out, labels)])
    net.zero_grads()
    grad_x = net.backward(grad)
    grads = net.grads()
    for name, p in net.params().items():
        assert rel_error(grads[name], numerical_grad(loss, p)) < 1e-5, name
    assert rel_error(grad_x, numerical_grad(loss, x)) < 1e-5


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=finite))
def test_identity_kernel_property(x):
    assert np.array_equal(conv3d_forward(x, identity_conv(2)), x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_finite(seed):
    net = build_reference_net(4, (1, 8, 16, 16), seed=seed % 1000)
    x = np.random.default_rng(seed).normal(size=(1, 8, 16, 16))
    assert np.all(np.isfinite(net.forward(x)))
