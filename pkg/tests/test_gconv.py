import numpy as np
import pytest

from poselectr import diffcore as dc
from poselectr import gconv, graphlap, oracles
from poselectr.errors import ContractError, DimensionError
from poselectr.legendre import CHEBYSHEV, LEGENDRE, PolyKernel
from poselectr.selftest import random_graph

FAMILIES = [LEGENDRE, CHEBYSHEV]
TWO_NODE = graphlap.Graph.from_adjacency([[0, 1.0], [1.0, 0]])


@pytest.mark.parametrize("family", FAMILIES)
def test_constant_kernel_is_identity(rng, family):
    g = random_graph(rng, 6)
    x = rng.standard_normal((6, 2))
    k = PolyKernel(family, [1.0])
    np.testing.assert_allclose(gconv.graph_conv(g, x, k).data, x, atol=1e-15)
    np.testing.assert_allclose(gconv.spectral_conv_exact(g, x, k).data, x, atol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_first_order_is_scaled_laplacian(rng, family):
    g = random_graph(rng, 6)
    x = rng.standard_normal((6, 2))
    k = PolyKernel(family, [0.0, 1.0])
    np.testing.assert_allclose(gconv.graph_conv(g, x, k).data, g.scaled_laplacian @ x, atol=1e-14)
    np.testing.assert_allclose(gconv.spectral_conv_exact(g, x, k).data, g.scaled_laplacian @ x, atol=1e-12)


def test_two_node_hand_value():
    y = gconv.legendre_conv(TWO_NODE, np.array([[1.0], [0.0]]), PolyKernel(LEGENDRE, [0.0, 1.0]))
    np.testing.assert_allclose(y.data[:, 0], [0.0, -1.0], atol=1e-15)


@pytest.mark.parametrize("family", FAMILIES)
def test_recursion_matches_eigenbasis(family):
    rng = np.random.default_rng(3)
    for _ in range(50):
        n, K = int(rng.integers(2, 13)), int(rng.integers(1, 7))
        g = random_graph(rng, n)
        k = PolyKernel(family, rng.standard_normal(K))
        x = rng.standard_normal((n, 3))
        fast = gconv.graph_conv(g, x, k).data
        np.testing.assert_allclose(fast, gconv.spectral_conv_exact(g, x, k).data, atol=1e-8)
        ref = oracles.polynomial_filter_by_eigh(g.laplacian, g.lambda_max, family, k.values) @ x
        np.testing.assert_allclose(fast, ref, atol=1e-8)


def test_wrong_family_rejected(rng):
    g = random_graph(rng, 4)
    x = np.ones((4, 1))
    with pytest.raises(ContractError):
        gconv.legendre_conv(g, x, PolyKernel(CHEBYSHEV, [1.0]))
    with pytest.raises(ContractError):
        gconv.chebyshev_conv(g, x, PolyKernel(LEGENDRE, [1.0]))


def test_exact_needs_spectrum(rng):
    g = random_graph(rng, 4, with_spectrum=False)
    with pytest.raises(ContractError):
        gconv.spectral_conv_exact(g, np.ones((4, 1)), PolyKernel(LEGENDRE, [1.0]))


def test_linearity_and_equivariance(rng):
    g = random_graph(rng, 9)
    k = PolyKernel(LEGENDRE, rng.standard_normal(5))
    x, y = rng.standard_normal((2, 9, 4))
    conv = lambda v: gconv.legendre_conv(g, v, k).data
    np.testing.assert_allclose(conv(x + y), conv(x) + conv(y), atol=1e-10)
    np.testing.assert_allclose(conv(-2.5 * x), -2.5 * conv(x), atol=1e-10)
    perm = rng.permutation(9)
    np.testing.assert_allclose(gconv.legendre_conv(g.permuted(perm), x[perm], k).data, conv(x)[perm], atol=1e-12)


def test_batched_time_axis(rng):
    g = random_graph(rng, 5)
    k = PolyKernel(LEGENDRE, rng.standard_normal(3))
    X = rng.standard_normal((4, 5, 2))
    out = gconv.legendre_conv(g, X, k).data
    for t in range(4):
        np.testing.assert_allclose(out[t], gconv.legendre_conv(g, X[t], k).data, atol=1e-14)


def test_gcn_layer_examples(rng):
    g = random_graph(rng, 5)
    x = rng.standard_normal((5, 3))
    y = gconv.gcn_layer(g, x, PolyKernel(LEGENDRE, [1.0]), np.eye(3), "identity")
    np.testing.assert_allclose(y.data, x, atol=1e-15)
    z = gconv.gcn_layer(g, x, PolyKernel(LEGENDRE, rng.standard_normal(3)), rng.standard_normal((3, 2)), "relu")
    assert z.data.min() >= 0
    with pytest.raises(DimensionError):
        gconv.gcn_layer(g, x, PolyKernel(LEGENDRE, [1.0]), np.eye(4))


def test_gcn_layer_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 5)
        x = dc.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        k = PolyKernel(LEGENDRE, dc.Tensor(rng.standard_normal(3), requires_grad=True))
        W = dc.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        R = rng.standard_normal((5, 3))
        f = lambda: dc.tsum(dc.mul(gconv.gcn_layer(g, x, k, W, "relu"), R))
        assert dc.grad_check_report(f, [x, k.coeffs, W], eps=1e-6, guard=True).max_rel_error < 1e-5


def test_node_count_mismatch(rng):
    with pytest.raises(DimensionError):
        gconv.legendre_conv(random_graph(rng, 4), np.ones((5, 1)), PolyKernel(LEGENDRE, [1.0]))
