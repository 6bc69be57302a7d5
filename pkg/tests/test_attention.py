import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poselectr import diffcore as dc
from poselectr import oracles
from poselectr.attention import AttentionParams, DistillParams, attention, distill, multi_head, sfa_block, sparsemax
from poselectr.diffcore import Tensor
from poselectr.errors import ContractError, DimensionError
from poselectr.legendre import LEGENDRE, PolyKernel
from poselectr.selftest import random_graph

vectors = st.lists(st.floats(-20, 20), min_size=1, max_size=8).map(np.array)


def test_sparsemax_frozen_values():
    np.testing.assert_allclose(sparsemax([1.0, 1.0]), [0.5, 0.5])
    np.testing.assert_allclose(sparsemax([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(sparsemax([0.5, 0.2, -0.1]), [0.63333333, 0.33333333, 0.03333333], atol=1e-8)
    np.testing.assert_allclose(sparsemax([3.0, 1.0]), sparsemax([2.0, 0.0]))


def test_sparsemax_empty():
    with pytest.raises(ContractError):
        sparsemax(np.zeros(0))


def test_sparsemax_equals_support_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        z = rng.standard_normal(int(rng.integers(1, 5))) * 2
        np.testing.assert_allclose(sparsemax(z), oracles.simplex_projection_by_support(z), atol=1e-12)


@settings(max_examples=300)
@given(vectors, st.floats(-100, 100))
def test_sparsemax_simplex_and_shift(z, c):
    p = sparsemax(z)
    assert p.min() >= 0
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(sparsemax(z + c), p, atol=1e-9)


@settings(max_examples=300)
@given(vectors)
def test_sparsemax_argmax_and_sharpening(z):
    top = np.flatnonzero(z == z.max())
    p = sparsemax(z)
    gap = z.max() - np.max(z[z < z.max()], initial=-np.inf)
    if len(top) == 1 and gap > 1e-9:
        assert np.argmax(p) == top[0]
    soft = dc.softmax_lastdim(z).data
    assert p[top[0]] >= soft[top[0]] - 1e-12


def test_sparsemax_low_temperature_limit(rng):
    for _ in range(50):
        z = rng.standard_normal(6)
        one_hot = np.eye(6)[np.argmax(z)]
        np.testing.assert_allclose(sparsemax(1e3 * z), one_hot, atol=1e-9)


def test_single_row_returns_v(rng):
    V = rng.standard_normal((1, 3))
    for mapping in ("softmax", "sparsemax"):
        np.testing.assert_allclose(attention(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), V, mapping).data, V)


def test_identical_keys_average_values(rng):
    K = np.tile(rng.standard_normal(3), (4, 1))
    V = rng.standard_normal((4, 3))
    out = attention(rng.standard_normal((4, 3)), K, V, "softmax").data
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (4, 1)), atol=1e-14)


def test_uniform_mapping_averages_values(rng):
    V = rng.standard_normal((5, 2))
    out = attention(rng.standard_normal((3, 2)), rng.standard_normal((5, 2)), V, "uniform").data
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (3, 1)))


def test_kv_permutation_invariance(rng):
    Q, K, V = rng.standard_normal((3, 5, 4))
    perm = rng.permutation(5)
    for mapping in ("softmax", "sparsemax"):
        np.testing.assert_allclose(attention(Q, K[perm], V[perm], mapping).data, attention(Q, K, V, mapping).data, atol=1e-12)


def test_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))


def test_sparsemax_attention_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        Q, K, V = (Tensor(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(3))
        R = rng.standard_normal((4, 3))
        f = lambda: dc.tsum(dc.mul(attention(Q, K, V, "sparsemax"), R))
        assert dc.grad_check_report(f, [Q, K, V], eps=1e-6, guard=True).max_rel_error < 1e-5


def test_sfa_block_identity_case(rng):
    g = random_graph(rng, 5)
    X = rng.standard_normal((5, 4))
    eye = Tensor(np.eye(4))
    params = AttentionParams(eye, eye, eye, heads=1, mapping="softmax")
    out = sfa_block(X, params, g, PolyKernel(LEGENDRE, [1.0])).data
    np.testing.assert_allclose(out, attention(X, X, X, "softmax").data, atol=1e-14)


def test_two_heads_are_two_half_width_runs(rng):
    Q, K, V = rng.standard_normal((3, 5, 4))
    out = multi_head(Q, K, V, 2, "sparsemax").data
    left = attention(Q[:, :2], K[:, :2], V[:, :2], "sparsemax").data
    right = attention(Q[:, 2:], K[:, 2:], V[:, 2:], "sparsemax").data
    np.testing.assert_allclose(out, np.hstack([left, right]), atol=1e-15)


def test_spread_inputs_give_sparse_rows():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 6)
        params = AttentionParams.init(rng, 4, 4, heads=1, mapping="sparsemax")
        X = 10 * rng.standard_normal((6, 4))
        C = X  # order-0 kernel keeps X
        Q, K = C @ params.W_Q.data, C @ params.W_K.data
        weights = sparsemax(Q @ K.T / 2.0)
        assert np.any(weights == 0.0)
        sfa_block(X, params, g, PolyKernel(LEGENDRE, [1.0]))


def test_params_validation(rng):
    with pytest.raises(DimensionError):
        AttentionParams.init(rng, 4, 6, heads=4)
    with pytest.raises(ContractError):
        AttentionParams.init(rng, 4, 4, mapping="entmax")


def test_distill_lengths(rng):
    X = rng.standard_normal((8, 3, 4))
    assert distill(X, DistillParams.init(rng, 4, stride=2)).shape == (4, 3, 4)
    X9 = rng.standard_normal((9, 3, 4))
    assert distill(X9, DistillParams.init(rng, 4, stride=3)).shape == (3, 3, 4)


def test_distill_all_negative_is_zero(rng):
    params = DistillParams(Tensor(np.zeros((3, 4, 4))), Tensor(-np.ones(4)))
    assert not distill(rng.standard_normal((6, 4)), params).data.any()


def test_distill_too_short(rng):
    with pytest.raises(DimensionError):
        distill(rng.standard_normal((1, 4)), DistillParams.init(rng, 4))
