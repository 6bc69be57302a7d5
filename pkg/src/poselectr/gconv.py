"""Spectral graph convolution: exact eigenbasis filter and polynomial recursions."""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor, _make, as_tensor, matmul, relu
from .errors import ContractError, DimensionError
from .graphlap import Graph
from .legendre import CHEBYSHEV, LEGENDRE, PolyKernel, poly_series, recursion_step


def _check_nodes(g: Graph, x: Tensor):
    if x.ndim < 2 or x.shape[-2] != g.n:
        raise DimensionError(f"signal shape {x.shape} does not match graph with {g.n} nodes")


def spectral_filter_matrix(g: Graph, kernel: PolyKernel) -> np.ndarray:
    """U diag(kernel(scaled eigenvalues)) U^T."""
    if g.spectrum is None:
        raise ContractError("exact spectral convolution needs a graph built with its spectrum")
    lam = 2.0 * g.spectrum.eigenvalues / g.lambda_max - 1.0
    U = g.spectrum.eigenvectors
    response = poly_series(kernel.family, kernel.values, lam)
    return (U * response) @ U.T


def spectral_conv_exact(g: Graph, x, kernel: PolyKernel) -> Tensor:
    """Reference path: filter ``x`` in the Laplacian eigenbasis (O(n^3) setup)."""
    x = as_tensor(x)
    _check_nodes(g, x)
    return matmul(spectral_filter_matrix(g, kernel), x)


def _recurrence(L, z0, family, order):
    zs = [z0]
    if order > 1:
        zs.append(L @ z0)
    for k in range(1, order - 1):
        a, b = recursion_step(family, k)
        zs.append(a * (L @ zs[k]) - b * zs[k - 1])
    return zs


def poly_conv(g: Graph, x, coeffs, family: str) -> Tensor:
    """sum_k coeffs[k] p_k(L~) x by the three-term recursion, no eigendecomposition.

    Differentiable with respect to both ``x`` and ``coeffs``.  The backward
    pass reuses the recursion on the cotangent since L~ is symmetric.
    """
    x, coeffs = as_tensor(x), as_tensor(coeffs)
    _check_nodes(g, x)
    if coeffs.ndim != 1 or coeffs.size < 1:
        raise ContractError("kernel needs a 1-D coefficient vector")
    L = g.scaled_laplacian
    alpha = coeffs.data
    zs = _recurrence(L, x.data, family, alpha.size)
    out = sum(a * z for a, z in zip(alpha, zs))

    def bw(grad):
        galpha = np.array([np.sum(grad * z) for z in zs])
        gx = sum(a * z for a, z in zip(alpha, _recurrence(L, grad, family, alpha.size)))
        return gx, galpha

    return _make(out, (x, coeffs), bw, f"{family}_conv")


def legendre_conv(g: Graph, x, kernel: PolyKernel) -> Tensor:
    if kernel.family != LEGENDRE:
        raise ContractError(f"legendre_conv got a {kernel.family} kernel")
    return poly_conv(g, x, kernel.coeffs, LEGENDRE)


def chebyshev_conv(g: Graph, x, kernel: PolyKernel) -> Tensor:
    if kernel.family != CHEBYSHEV:
        raise ContractError(f"chebyshev_conv got a {kernel.family} kernel")
    return poly_conv(g, x, kernel.coeffs, CHEBYSHEV)


def graph_conv(g: Graph, x, kernel: PolyKernel) -> Tensor:
    """Recursive convolution for whichever family the kernel carries."""
    return poly_conv(g, x, kernel.coeffs, kernel.family)


def gcn_layer(g: Graph, x, kernel: PolyKernel, W, activation="relu") -> Tensor:
    """activation(conv(x) W)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or W.shape[0] != x.shape[-1]:
        raise DimensionError(f"gcn_layer weight {W.shape} does not match input channels {x.shape}")
    y = matmul(graph_conv(g, x, kernel), W)
    if activation == "relu":
        return relu(y)
    if activation == "identity":
        return y
    raise ContractError(f"unknown activation {activation!r}")
