import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import gradsuite
import oracles
from soundtag import functional as F
from soundtag import tensor as T
from soundtag.layers import BatchNorm, Conv2d, GroupNorm, MultiHeadSelfAttention
from soundtag.tensor import Tensor

MISH_ONE = 0.8650983882673103  # ((1+e)^2 - 1) / ((1+e)^2 + 1), 40-digit decimal evaluation


# -- convolution ----------------------------------------------------------------

def test_conv_center_tap_is_identity(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_all_ones_on_constant_interior():
    c, n_in = 1.5, 2
    out = F.conv2d(Tensor(np.full((1, n_in, 5, 5), c)), Tensor(np.ones((1, n_in, 3, 3))))
    assert np.allclose(out.data[0, 0, 1:-1, 1:-1], 9 * c * n_in, atol=0, rtol=1e-15)


def test_conv_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(out - oracles.conv2d_oracle(x, w, b))) < 1e-12


def test_conv_preserves_extent_and_checks_channels(rng):
    layer = Conv2d(2, 4, rng)
    assert layer(Tensor(rng.normal(size=(1, 2, 7, 9)))).shape == (1, 4, 7, 9)
    assert layer.weight.shape == (4, 2, 3, 3)
    with pytest.raises(ValueError):
        layer(Tensor(rng.normal(size=(1, 3, 7, 9))))


# -- max pooling -------------------------------------------------------------------

def test_maxpool_constant_halves_freq():
    out = F.maxpool2d(Tensor(np.full((1, 1, 4, 8), 2.0)), F.PoolSpec(1, 2))
    assert out.shape == (1, 1, 4, 4) and np.all(out.data == 2.0)


def test_maxpool_window_maximum():
    out = F.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), F.PoolSpec(2, 2))
    assert out.data.item() == 4.0


def test_maxpool_gradient_routes_to_argmax():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    t = Tensor(x, requires_grad=True)
    T.backward(F.maxpool2d(t, F.PoolSpec(2, 2)).sum())
    assert t.grad.tolist() == [[[[0.0, 0.0], [0.0, 1.0]]]]
    assert T.grad_check(lambda v: F.maxpool2d(v, F.PoolSpec(2, 2)).sum(), x).passed


def test_maxpool_errors():
    with pytest.raises(ValueError):
        F.maxpool2d(Tensor(np.zeros((1, 1, 0, 4))), F.PoolSpec(2, 2))
    with pytest.raises(ValueError):
        F.PoolSpec(3, 2)


# -- batch norm ----------------------------------------------------------------------

def _bn(x, training=True, gamma=None, beta=None):
    C = x.shape[1]
    g = Tensor(np.ones(C) if gamma is None else gamma)
    b = Tensor(np.zeros(C) if beta is None else beta)
    return F.batch_norm(Tensor(x), g, b, np.zeros(C), np.ones(C), training)


def test_bn_constant_batch_gives_zeros():
    assert np.all(_bn(np.full((4, 2, 3, 3), 7.0)).data == 0.0)


def test_bn_standardized_input_is_fixed_point(rng):
    x = rng.normal(size=(8, 3, 4, 4))
    axes = (0, 2, 3)
    x = (x - x.mean(axis=axes, keepdims=True)) / x.std(axis=axes, keepdims=True)
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    tight = F.batch_norm(Tensor(x), ones, zeros, np.zeros(3), np.ones(3), True, eps=1e-8).data
    assert np.max(np.abs(tight - x)) < 1e-6
    # the variance floor shrinks every value by exactly 1/sqrt(1 + eps)
    shrink = 1.0 - 1.0 / np.sqrt(1.0 + 1e-5)
    assert np.max(np.abs((_bn(x).data - x) + x * shrink)) < 1e-12


def test_bn_random_batch_statistics(rng):
    x = rng.normal(3.0, 5.0, size=(6, 4, 5, 5))
    y = _bn(x).data
    assert np.max(np.abs(y.mean(axis=(0, 2, 3)))) < 1e-10
    assert np.max(np.abs(y.var(axis=(0, 2, 3)) - 1.0)) < 1e-6


def test_bn_single_value_per_channel_rejected_in_training():
    with pytest.raises(ValueError):
        _bn(np.ones((1, 3, 1, 1)))
    _bn(np.ones((1, 3, 1, 1)), training=False)


def test_bn_eval_uses_running_statistics(rng):
    layer = BatchNorm(2)
    x = rng.normal(2.0, 3.0, size=(16, 2, 4, 4))
    layer(Tensor(x))
    assert np.allclose(layer.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    count = 16 * 4 * 4
    assert np.allclose(layer.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1))
    layer.eval()
    y = layer(Tensor(x)).data
    expect = (x - layer.running_mean[None, :, None, None]) / np.sqrt(layer.running_var[None, :, None, None] + 1e-5)
    assert np.allclose(y, expect, rtol=0, atol=1e-12)


# -- group norm -------------------------------------------------------------------

def _gn(x, groups, eps=1e-5):
    C = x.shape[1]
    return F.group_norm(Tensor(x), groups, Tensor(np.ones(C)), Tensor(np.zeros(C)), eps).data


def test_gn_constant_gives_zeros():
    assert np.all(_gn(np.full((2, 8, 3, 3), -4.0), 4) == 0.0)


def test_gn_independent_of_batch(rng):
    x = rng.normal(size=(1, 8, 3, 5))
    single = _gn(x, 4)
    rep = _gn(np.repeat(x, 4, axis=0), 4)
    assert np.max(np.abs(rep - single)) < 1e-12


def test_gn_one_channel_per_group_on_single_cell_is_zero(rng):
    assert np.all(_gn(rng.normal(size=(3, 6, 1, 1)), 6) == 0.0)


def test_gn_divisibility():
    with pytest.raises(ValueError):
        _gn(np.zeros((1, 6, 2, 2)), 4)
    with pytest.raises(ValueError):
        GroupNorm(4, 6)


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_gn_invariant_to_per_group_affine_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 8, 3, 3))
    scale = np.repeat(rng.uniform(0.5, 2.0, 4), 2)[None, :, None, None] * a
    shift = np.repeat(rng.normal(size=4), 2)[None, :, None, None] + b
    # exact only without the variance floor
    assert np.max(np.abs(_gn(scale * x + shift, 4, eps=0.0) - _gn(x, 4, eps=0.0))) < 1e-9


# -- activations -----------------------------------------------------------------------

def test_mish_values():
    out = T.mish(Tensor([0.0, 20.0, 1.0, -1000.0, 1000.0])).data
    assert out[0] == 0.0
    assert abs(out[1] - 20.0) < 1e-8
    assert abs(out[2] - MISH_ONE) < 1e-15
    assert abs(out[3]) < 1e-300 and out[4] == 1000.0


def test_relu():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


# -- GRU --------------------------------------------------------------------------------

def test_bigru_zero_input_stays_zero(rng):
    fw, bw = gradsuite._gru_weights(rng, 3, 4), gradsuite._gru_weights(rng, 3, 4)
    for w in (fw, bw):
        w.b_input.data[:] = 0
        w.b_hidden.data[:] = 0
    out = F.bigru(Tensor(np.zeros((2, 5, 3))), fw, bw)
    assert out.shape == (2, 5, 8) and np.all(out.data == 0.0)


def test_bigru_matches_loop_oracle(rng):
    fw, bw = gradsuite._gru_weights(rng, 3, 4), gradsuite._gru_weights(rng, 3, 4)
    x = rng.normal(size=(2, 5, 3))
    out = F.bigru(Tensor(x), fw, bw).data
    ref_f = oracles.gru_oracle(x, fw.w_input.data, fw.w_hidden.data, fw.b_input.data, fw.b_hidden.data)
    ref_b = oracles.gru_oracle(x, bw.w_input.data, bw.w_hidden.data, bw.b_input.data, bw.b_hidden.data, reverse=True)
    assert np.max(np.abs(out - np.concatenate([ref_f, ref_b], axis=2))) < 1e-12


def test_bigru_gradients(rng):
    fw, bw = gradsuite._gru_weights(rng, 3, 2), gradsuite._gru_weights(rng, 3, 2)
    r = T.grad_check(lambda t: (F.bigru(t, fw, bw) ** 2.0).sum(), rng.normal(size=(1, 4, 3)))
    assert r.max_rel_error < 1e-4


# -- self-attention ------------------------------------------------------------------

def test_mhsa_single_frame_is_value_then_output_projection(rng):
    layer = MultiHeadSelfAttention(8, 4, rng)
    x = rng.normal(size=(1, 1, 8))
    out, attn = layer(Tensor(x), return_weights=True)
    assert np.all(attn.data == 1.0)
    assert np.allclose(out.data, x @ layer.wv.data @ layer.wo.data, rtol=0, atol=1e-12)


def test_mhsa_rows_are_distributions(rng):
    layer = MultiHeadSelfAttention(8, 4, rng)
    _, attn = layer(Tensor(rng.normal(size=(2, 7, 8))), return_weights=True)
    assert attn.shape == (2, 4, 7, 7)
    assert np.max(np.abs(attn.data.sum(axis=-1) - 1.0)) < 1e-9


def test_mhsa_permutation_equivariant(rng):
    layer = MultiHeadSelfAttention(8, 4, rng)
    x = rng.normal(size=(1, 5, 8))
    perm = rng.permutation(5)
    a = layer(Tensor(x)).data[:, perm]
    b = layer(Tensor(x[:, perm])).data
    assert np.max(np.abs(a - b)) < 1e-10


def test_mhsa_matches_loop_oracle(rng):
    w = gradsuite._attn_weights(rng, 8)
    x = rng.normal(size=(2, 4, 8))
    out = F.multi_head_self_attention(Tensor(x), w, 2).data
    ref = oracles.mhsa_oracle(x, w.wq.data, w.wk.data, w.wv.data, w.wo.data,
                              w.bq.data, w.bk.data, w.bv.data, w.bo.data, 2)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_mhsa_head_divisibility(rng):
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(6, 4, rng)
    with pytest.raises(ValueError):
        F.multi_head_self_attention(Tensor(np.zeros((1, 2, 6))), gradsuite._attn_weights(rng, 6), 4)


# -- classifier, pooling and loss ---------------------------------------------------

def test_frame_classifier_zero_weights_half():
    out = F.frame_classifier(Tensor(np.ones((2, 3, 4))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))
    assert out.shape == (2, 3, 5) and np.all(out.data == 0.5)


def test_frame_classifier_monotone_in_bias():
    x, w = Tensor(np.ones((1, 1, 2))), Tensor(np.full((2, 1), 0.3))
    vals = [F.frame_classifier(x, w, Tensor([b])).item() for b in np.linspace(-10, 30, 41)]
    assert all(b > a for a, b in zip(vals, vals[1:]) if b < 1.0)
    assert vals[-1] > 1 - 1e-12


def test_frame_classifier_matches_direct_evaluation(rng):
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    out = F.frame_classifier(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.empty((2, 3, 5))
    for i in range(2):
        for t in range(3):
            for c in range(5):
                z = b[c] + sum(x[i, t, k] * w[k, c] for k in range(4))
                ref[i, t, c] = 1.0 / (1.0 + math.exp(-z))
    assert np.max(np.abs(out - ref)) < 1e-12
    assert np.all((out > 0) & (out < 1))


def test_attention_pool_examples():
    p_equal = Tensor(np.full((1, 4, 2), 0.3))
    assert np.allclose(F.attention_pool(p_equal, Tensor(np.random.default_rng(0).normal(size=(1, 4, 2)))).data, 0.3,
                       rtol=0, atol=1e-15)
    p = np.array([[[0.1], [0.5], [0.9], [0.3]]])
    assert abs(F.attention_pool(Tensor(p), Tensor(np.zeros_like(p))).item() - 0.45) < 1e-15
    z = np.array([[[0.0], [math.log(3.0)]]])
    assert abs(F.attention_pool(Tensor([[[0.2], [0.8]]]), Tensor(z)).item() - 0.65) < 1e-15


def test_attention_pool_needs_frames():
    with pytest.raises(ValueError):
        F.attention_pool(Tensor(np.zeros((1, 0, 2))), Tensor(np.zeros((1, 0, 2))))


@settings(max_examples=100)
@given(arrays(np.float64, (2, 6, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (2, 6, 3), elements=st.floats(-30, 30)))
def test_attention_pool_stays_within_frame_range(p, z):
    y = F.attention_pool(Tensor(p), Tensor(z)).data
    assert np.all(y >= p.min(axis=1) - 1e-12) and np.all(y <= p.max(axis=1) + 1e-12)


def test_bce_examples():
    assert abs(F.bce_loss(Tensor(np.full((3, 2), 0.5)), np.ones((3, 2))).item() - math.log(2)) < 1e-15
    y = np.array([[1.0, 0.0, 1.0]])
    perfect = np.where(y == 1, 1 - F.BCE_EPS, F.BCE_EPS)
    assert F.bce_loss(Tensor(perfect), y).item() < 1e-8
    assert abs(F.bce_loss(Tensor([0.9, 0.2]), [1.0, 0.0]).item() - 0.164252033486018) < 1e-12


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        F.bce_loss(Tensor([0.5, 0.5]), [1.0])


# -- gradient suite (100 trials per layer) ---------------------------------------

@pytest.mark.parametrize("name", gradsuite.LAYER_NAMES)
def test_layer_gradients(name):
    worst = gradsuite.layer_worst_error(name, trials=100, seed=7)
    assert worst < gradsuite.LAYER_TOL, f"{name}: {worst:.3e}"
