import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from lana import tensor as T
from lana.errors import ContractViolation
from lana.pivot import PivotWeights, attention, pc_ffn, pivot_linear, pma_attention

ROUTES = ("fused", "outer", "contract")


def _pw(w, b):
    return PivotWeights(T.Tensor(np.asarray(w, dtype=float)), T.Tensor(np.asarray(b, dtype=float)))


# ------------------------------------------------------------- pivot_linear

@pytest.mark.parametrize("route", ROUTES)
def test_pivot_linear_hand_value(route):
    y = pivot_linear(T.Tensor([4.0]), T.Tensor([3.0]), _pw([[[2.0]]], [0.5]), route)
    assert y.data.tolist() == [24.5]


@pytest.mark.parametrize("route", ROUTES)
def test_pivot_linear_zero_p_gives_bias(route):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4))
    w = _pw(rng.normal(size=(5, 4, 2)), rng.normal(size=5))
    y = pivot_linear(T.Tensor(x), T.Tensor(np.zeros((2, 3, 2))), w, route)
    np.testing.assert_array_equal(y.data, np.broadcast_to(w.b.data, (2, 3, 5)))


@pytest.mark.parametrize("route", ROUTES)
def test_pivot_linear_identity_arrangement(route):
    # W[:, :, 0] = I and p = e_0 make Wp the identity
    w = np.zeros((3, 3, 2))
    w[:, :, 0] = np.eye(3)
    x = np.array([[1.5, -2.0, 0.25]])
    y = pivot_linear(T.Tensor(x), T.Tensor([[1.0, 0.0]]), _pw(w, np.zeros(3)), route)
    np.testing.assert_allclose(y.data, x, rtol=0, atol=1e-15)


def test_routes_agree_with_einsum():
    rng = np.random.default_rng(1)
    x, p = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 3))
    w, b = rng.normal(size=(6, 4, 3)), rng.normal(size=6)
    expected = np.einsum("oif,bnf,bni->bno", w, p, x) + b
    for route in ROUTES:
        np.testing.assert_allclose(pivot_linear(T.Tensor(x), T.Tensor(p), _pw(w, b), route).data,
                                   expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("x_shape,p_shape,w_shape", [
    ((2, 4), (2, 3), (5, 3, 3)),
    ((2, 4), (3, 3), (5, 4, 3)),
    ((2, 4), (2, 2), (5, 4, 3)),
])
def test_pivot_linear_dimension_mismatch(x_shape, p_shape, w_shape):
    with pytest.raises(ContractViolation):
        pivot_linear(T.Tensor(np.ones(x_shape)), T.Tensor(np.ones(p_shape)),
                     _pw(np.ones(w_shape), np.ones(w_shape[0])))


def test_pivot_linear_unknown_route():
    with pytest.raises(ContractViolation):
        pivot_linear(T.Tensor([1.0]), T.Tensor([1.0]), _pw([[[1.0]]], [0.0]), "sideways")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_pivot_linear_is_linear_in_x(seed, a):
    rng = np.random.default_rng(seed)
    x1, x2, p = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
    w = _pw(rng.normal(size=(5, 4, 2)), rng.normal(size=5))
    b = w.b.data

    def f(x):
        return pivot_linear(T.Tensor(x), T.Tensor(p), w).data - b

    np.testing.assert_allclose(f(a * x1 + x2), a * f(x1) + f(x2), rtol=0, atol=1e-9)


# ------------------------------------------------------------------- pc_ffn

def test_pc_ffn_zero_weights_is_residual():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4))
    zero_in, zero_out = _pw(np.zeros((5, 4, 2)), np.zeros(5)), _pw(np.zeros((4, 5, 2)), np.zeros(4))
    y = pc_ffn(T.Tensor(x), T.Tensor(rng.normal(size=(2, 3, 2))), zero_in, zero_out)
    np.testing.assert_array_equal(y.data, x)


def test_pc_ffn_hand_composition():
    # inner pivot gives 2*1 = 2, outer Wp = 1, so 1 + 2 = 3
    y = pc_ffn(T.Tensor([1.0]), T.Tensor([1.0]), _pw([[[2.0]]], [0.0]), _pw([[[1.0]]], [0.0]))
    assert y.data.tolist() == [3.0]


def test_pc_ffn_rectifier_switch():
    inner, outer = _pw([[[-2.0]]], [0.0]), _pw([[[1.0]]], [0.0])
    assert pc_ffn(T.Tensor([1.0]), T.Tensor([1.0]), inner, outer).data.tolist() == [1.0]
    assert pc_ffn(T.Tensor([1.0]), T.Tensor([1.0]), inner, outer, rectify=False).data.tolist() == [-1.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(0, 1000))
def test_pc_ffn_preserves_shape(b, n, d, f, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, n, d))
    y = pc_ffn(T.Tensor(x), T.Tensor(rng.normal(size=(b, n, f))),
               _pw(rng.normal(size=(7, d, f)), rng.normal(size=7)), _pw(rng.normal(size=(d, 7, f)), rng.normal(size=d)))
    assert y.shape == x.shape


def test_pc_ffn_mismatch():
    with pytest.raises(ContractViolation):
        pc_ffn(T.Tensor(np.ones((2, 4))), T.Tensor(np.ones((2, 2))),
               _pw(np.ones((5, 4, 2)), np.ones(5)), _pw(np.ones((3, 5, 2)), np.ones(3)))


# ------------------------------------------------------------ pma_attention

def _one_head(scores_keys, dis, rate):
    """q·k/sqrt(1) reproduces ``scores_keys`` with q = 1, k = scores."""
    q = np.ones((1, 1, 1, 1))
    k = np.asarray(scores_keys, dtype=float).reshape(1, 1, -1, 1)
    v = np.arange(k.shape[2], dtype=float).reshape(1, 1, -1, 1)
    theta = np.array([math.log(math.expm1(rate))])  # softplus(theta) = rate
    return q, k, v, np.asarray(dis, dtype=float).reshape(1, 1, -1), np.zeros((1, 1, 1)), theta


def test_pma_hand_example():
    q, k, v, dis, m, theta = _one_head([0.0, 0.0], [0.0, 10.0], 0.1)
    _, alpha = pma_attention(q, k, v, dis, m, theta, None)
    e = math.exp(-1)
    np.testing.assert_allclose(alpha.data.reshape(-1), [1 / (1 + e), e / (1 + e)], rtol=0, atol=1e-12)
    np.testing.assert_allclose(alpha.data.reshape(-1), [0.7311, 0.2689], atol=5e-5)
    assert abs(alpha.data[0, 0, 0, 0] / alpha.data[0, 0, 0, 1] - math.e) < 1e-12


def test_pma_literal_form_hand_example():
    q, k, v, dis, m, theta = _one_head([0.0, 0.0], [0.0, 10.0], 0.1)
    _, alpha = pma_attention(q, k, v, dis, m, theta, None, renormalize=False)
    np.testing.assert_allclose(alpha.data.reshape(-1), [0.5, 0.5 * math.exp(-1)], rtol=0, atol=1e-15)


def _random_pma(seed, b=2, h=2, n=5, dh=3):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(b, h, n, dh)) for _ in range(3))
    t = np.sort(rng.uniform(0, 60, size=(b, n)), axis=1)
    dis = np.maximum(t[:, :, None] - t[:, None, :], 0.0)
    m = rng.normal(size=(b, h, n))
    theta = np.array([rng.normal() - 1])
    mask = np.tril(np.ones((n, n), dtype=bool))[None, None] & (rng.random((b, 1, n, n)) < 0.8)
    mask |= np.eye(n, dtype=bool)
    return q, k, v, dis, m, theta, mask


def test_zero_distance_is_plain_attention_bitwise():
    q, k, v, dis, m, theta, mask = _random_pma(3)
    ctx1, a1 = pma_attention(q, k, v, np.zeros_like(dis), m, theta, mask)
    ctx2, a2 = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), mask)
    assert np.array_equal(a1.data, a2.data)
    assert np.array_equal(ctx1.data, ctx2.data)


def test_far_key_vanishes():
    q, k, v, dis, m, theta = _one_head([0.3, -0.2], [0.0, 1e6], 0.5)
    ctx, alpha = pma_attention(q, k, v, dis, m, theta, None)
    # the cap keeps the far key at exp(-30) relative weight
    assert alpha.data[0, 0, 0, 1] < 1e-12
    assert abs(ctx.data.item() - v[0, 0, 0, 0]) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pma_rows_are_distributions(seed):
    q, k, v, dis, m, theta, mask = _random_pma(seed)
    _, alpha = pma_attention(q, k, v, dis, m, theta, mask)
    a = alpha.data
    full = np.broadcast_to(mask, a.shape)
    assert np.all(a[~full] == 0.0)
    np.testing.assert_allclose(a.sum(-1), 1.0, rtol=0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 500.0))
def test_pma_weight_nonincreasing_in_distance(seed, extra):
    q, k, v, dis, m, theta, mask = _random_pma(seed, b=1, h=1)
    mask = np.broadcast_to(np.tril(np.ones((5, 5), dtype=bool)), (1, 1, 5, 5))
    _, before = pma_attention(q, k, v, dis, m, theta, mask)
    bumped = dis.copy()
    bumped[0, 4, 1] += extra
    _, after = pma_attention(q, k, v, bumped, m, theta, mask)
    assert after.data[0, 0, 4, 1] <= before.data[0, 0, 4, 1]


def test_pma_fully_masked_valid_query_is_rejected():
    q, k, v, dis, m, theta = _one_head([0.0, 0.0], [0.0, 1.0], 0.1)
    with pytest.raises(ContractViolation):
        pma_attention(q, k, v, dis, m, theta, np.zeros((1, 1, 1, 2), dtype=bool))


def test_pma_negative_allowed_distance_is_rejected():
    q, k, v, dis, m, theta = _one_head([0.0, 0.0], [0.0, -1.0], 0.1)
    with pytest.raises(ContractViolation):
        pma_attention(q, k, v, dis, m, theta, None)


def test_pma_m_shape_checked():
    q, k, v, dis, _, theta = _one_head([0.0, 0.0], [0.0, 1.0], 0.1)
    with pytest.raises(ContractViolation):
        pma_attention(q, k, v, dis, np.zeros((1, 2, 1)), theta, None)


def test_decay_rate_is_never_negative():
    # a very negative theta + m still yields a (tiny) non-negative rate
    q, k, v, dis, m, _ = _one_head([0.0, 0.0], [0.0, 5.0], 0.1)
    _, alpha = pma_attention(q, k, v, dis, m - 40.0, np.array([-40.0]), None)
    assert alpha.data[0, 0, 0, 0] >= alpha.data[0, 0, 0, 1]


# -------------------------------------------------------------- gradients

@pytest.mark.parametrize("case", gradcases.OPERATOR_CASES, ids=lambda c: c.name)
def test_operator_gradients(case):
    assert max(case.error(seed) for seed in range(5)) < 1e-6
