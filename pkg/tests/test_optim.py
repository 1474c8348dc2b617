import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

import oracles
from soundtag.layers import BIAS, CONV_WEIGHT, DENSE_WEIGHT, Parameter
from soundtag.optim import AdamState, AdamWGC, OptimizerConfig, centralize_gradient, step
from soundtag.tensor import NonFiniteError

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_centralize_simple_slice():
    assert centralize_gradient(np.array([[1.0, 2.0, 3.0]])).tolist() == [[-1.0, 0.0, 1.0]]


def test_centralize_leaves_centered_slice():
    g = np.array([[-2.0, 0.5, 1.5], [3.0, -3.0, 0.0]])
    assert np.array_equal(centralize_gradient(g), g)


def test_centralize_random_conv_gradient(rng):
    g = rng.normal(size=(4, 3, 3, 3)) + 5.0
    out = centralize_gradient(g)
    assert out.shape == g.shape
    assert np.max(np.abs(out.mean(axis=(1, 2, 3)))) < 1e-12


def test_centralize_skips_vectors():
    g = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(centralize_gradient(g), g)


@settings(max_examples=200)
@given(arrays(np.float64, array_shapes(min_dims=2, max_dims=4, max_side=5), elements=finite))
def test_centralize_is_idempotent(g):
    once = centralize_gradient(g)
    assert np.max(np.abs(centralize_gradient(once) - once), initial=0.0) == 0.0


@settings(max_examples=200)
@given(arrays(np.float64, array_shapes(min_dims=2, max_dims=4, max_side=5), elements=finite),
       st.integers(-20, 20))
def test_centralize_commutes_with_power_of_two_scaling(g, k):
    a = 2.0 ** k
    assert np.array_equal(centralize_gradient(a * g), a * centralize_gradient(g))


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_centralize_is_linear(seed, a):
    g = np.random.default_rng(seed).normal(size=(3, 2, 3, 3))
    lhs, rhs = centralize_gradient(a * g), a * centralize_gradient(g)
    assert np.max(np.abs(lhs - rhs)) <= 1e-13 * max(1.0, abs(a))


# -- optimizer step -------------------------------------------------------------------

def _params(rng):
    return [("conv.weight", Parameter(rng.normal(size=(3, 2, 3, 3)), CONV_WEIGHT)),
            ("conv.bias", Parameter(rng.normal(size=3), BIAS)),
            ("fc.weight", Parameter(rng.normal(size=(4, 2)), DENSE_WEIGHT))]


def test_zero_gradient_without_decay_changes_nothing(rng):
    params = _params(rng)
    before = [p.data.copy() for _, p in params]
    for _, p in params:
        p.grad = np.zeros_like(p.data)
    step(params, OptimizerConfig(lr=0.1, weight_decay=0.0))
    assert all(np.array_equal(b, p.data) for b, (_, p) in zip(before, params))


def test_single_step_matches_hand_computation(rng):
    p0, g = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    p = Parameter(p0.copy(), DENSE_WEIGHT)
    p.grad = g
    cfg = OptimizerConfig(lr=3e-3, betas=(0.85, 0.99), eps=1e-7, weight_decay=0.05)
    state = step([("w", p)], cfg)
    expect = oracles.adamw_first_step(p0, g, 3e-3, 0.85, 0.99, 1e-7, 0.05)
    assert np.max(np.abs(p.data - expect)) < 1e-12
    assert state.step == 1


def test_gc_applies_before_moments_on_conv_weights(rng):
    p0, g = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3)) + 1.0
    p = Parameter(p0.copy(), CONV_WEIGHT)
    p.grad = g
    step([("w", p)], OptimizerConfig(lr=1e-2))
    expect = oracles.adamw_first_step(p0, g - g.mean(axis=(1, 2, 3), keepdims=True), 1e-2, 0.9, 0.999, 1e-8, 0.0)
    assert np.max(np.abs(p.data - expect)) < 1e-12


def test_gc_scope_leaves_other_parameters_bit_identical(rng):
    grads = [rng.normal(size=s) for s in [(3, 2, 3, 3), (3,), (4, 2)]]
    runs = []
    for enabled in (True, False):
        params = _params(np.random.default_rng(5))
        opt = AdamWGC(params, OptimizerConfig(lr=1e-2, weight_decay=0.01, gc_enabled=enabled))
        for _ in range(3):
            for (_, p), g in zip(params, grads):
                p.grad = g.copy()
            opt.step()
        runs.append({n: p.data.copy() for n, p in params})
    on, off = runs
    assert np.array_equal(on["conv.bias"], off["conv.bias"])
    assert np.array_equal(on["fc.weight"], off["fc.weight"])
    assert not np.array_equal(on["conv.weight"], off["conv.weight"])


def test_nan_gradient_names_the_parameter(rng):
    params = _params(rng)
    for _, p in params:
        p.grad = np.zeros_like(p.data)
    params[2][1].grad[0, 1] = np.nan
    with pytest.raises(NonFiniteError, match="fc.weight"):
        step(params, OptimizerConfig())


def test_state_advances(rng):
    params = _params(rng)
    opt = AdamWGC(params)
    for k in range(1, 4):
        for _, p in params:
            p.grad = np.ones_like(p.data)
        opt.step()
        assert opt.state.step == k
    assert set(opt.state.exp_avg) == {"conv.weight", "conv.bias", "fc.weight"}


def test_grad_clip_bounds_update_norm(rng):
    p = Parameter(np.zeros(4), DENSE_WEIGHT)
    p.grad = np.array([300.0, 400.0, 0.0, 0.0])
    opt = AdamWGC([("w", p)], OptimizerConfig(grad_clip=1.0))
    prepared = opt._prepared_grads()["w"]
    assert abs(np.linalg.norm(prepared) - 1.0) < 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(betas=(0.9, 1.0))


def test_functional_step_resumes_state(rng):
    p = Parameter(np.ones(3), DENSE_WEIGHT)
    p.grad = np.ones(3)
    state = step([("w", p)], OptimizerConfig())
    p.grad = np.ones(3)
    state = step([("w", p)], OptimizerConfig(), state)
    assert isinstance(state, AdamState) and state.step == 2
