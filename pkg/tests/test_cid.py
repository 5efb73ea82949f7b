import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msroi import ops
from msroi.cid import (CidParams, attention_factor, attention_map, cid_forward, gate_channels,
                       init_cid_params, reduced_channels)
from msroi.tensor import ShapeError, Tensor, backward, grad_check, mul, sum_all
from oracles import kink_free


def zero_params(c):
    r = reduced_channels(c)
    return CidParams(Tensor(np.zeros((r, c, 1, 1))), Tensor(np.zeros(r)),
                     Tensor(np.zeros((1, r, 1, 1))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("c,r", [(1, 1), (3, 1), (4, 1), (5, 2), (16, 4), (17, 5), (256, 64)])
def test_reduced_channels(c, r):
    assert reduced_channels(c) == r


def test_zero_weights_give_half_gate(rng):
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    out = cid_forward(x, zero_params(8))
    assert np.array_equal(out.data, 0.5 * x.data)


def test_saturated_gate_passes_input(rng):
    x = Tensor(rng.uniform(0.1, 1.0, size=(1, 4, 3, 3)))
    p = zero_params(4)
    p.project_bias = Tensor([100.0])
    np.testing.assert_allclose(cid_forward(x, p).data, x.data, rtol=1e-15, atol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 6), st.integers(0, 2**16))
def test_gate_consistency_bitwise(c, size, seed):
    rng = np.random.default_rng(seed)
    p = init_cid_params(c, rng)
    x = Tensor(rng.normal(size=(2, c, size, size)))
    gate = attention_map(x, p)
    assert gate.shape == (2, 1, size, size)
    assert np.all((gate.data > 0) & (gate.data < 1))
    out = cid_forward(x, p)
    assert np.array_equal(out.data, x.data * np.broadcast_to(gate.data, x.shape))


def test_attention_factor():
    assert attention_factor(256, 1) == 256
    assert attention_factor(64, 64) == 1
    with pytest.raises(ValueError):
        attention_factor(0, 1)


def test_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        cid_forward(Tensor(rng.normal(size=(1, 3, 4, 4))), zero_params(4))
    with pytest.raises(ShapeError):
        gate_channels(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 2, 4, 4))))


def test_gate_gradient_sums_over_channels(rng):
    x = Tensor(rng.normal(size=(1, 3, 2, 2)), trainable=True)
    g = Tensor(rng.uniform(size=(1, 1, 2, 2)), trainable=True)
    grads = backward(sum_all(gate_channels(x, g)))
    assert np.array_equal(grads[x].data, np.broadcast_to(g.data, x.shape))
    np.testing.assert_allclose(grads[g].data, x.data.sum(axis=1, keepdims=True), rtol=0, atol=1e-15)


@pytest.mark.parametrize("trial", range(10))
def test_gradient(trial):
    rng = np.random.default_rng(200 + trial)
    p = init_cid_params(5, rng)
    p.reduce_bias = Tensor(rng.normal(size=2) * 0.2)
    proj = Tensor(rng.normal(size=(1, 5, 3, 3)))

    def f(t):
        return sum_all(mul(cid_forward(t, p), proj))

    for _ in range(50):
        x = Tensor(rng.normal(size=(1, 5, 3, 3)))
        if kink_free(f, x, 1e-3):
            break
    else:
        pytest.fail("no kink-free instance")
    assert grad_check(f, x, 1e-3) < 1e-4

    # gradient with respect to the gate's own weights
    def fw(w):
        q = CidParams(w, p.reduce_bias, p.project_weight, p.project_bias)
        return sum_all(mul(cid_forward(x, q), proj))

    if kink_free(fw, p.reduce_weight, 1e-3):
        assert grad_check(fw, p.reduce_weight, 1e-3) < 1e-4


def test_attention_factor_compression():
    assert attention_factor(64, 16) == 4


def test_gate_never_amplifies(rng):
    p = init_cid_params(8, rng)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    out = cid_forward(x, p)
    assert out.shape == (2, 8, 5, 5)
    assert np.all(np.abs(out.data) <= np.abs(x.data))


def test_degenerate_map_is_half(rng):
    m = attention_map(Tensor(rng.normal(size=(1, 4, 3, 3))), zero_params(4))
    assert np.all(m.data == 0.5)
