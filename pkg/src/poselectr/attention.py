"""Softmax and sparsemax attention, the graph-conditioned attention block, distillation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, _make, as_tensor
from .errors import ContractError, DimensionError
from .gconv import graph_conv
from .graphlap import Graph
from .legendre import PolyKernel

MAPPINGS = ("softmax", "sparsemax", "uniform")


def _sparsemax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ContractError("sparsemax of an empty vector")
    zs = -np.sort(-z, axis=-1)
    cssv = np.cumsum(zs, axis=-1)
    k = np.arange(1, z.shape[-1] + 1)
    support = (1.0 + k * zs > cssv).sum(axis=-1, keepdims=True)
    tau = (np.take_along_axis(cssv, support - 1, axis=-1) - 1.0) / support
    return np.maximum(z - tau, 0.0)


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the probability simplex (sort and threshold).

    Works on the last axis, so a matrix is projected row by row.
    """
    return _sparsemax_rows(z)


def sparsemax_lastdim(x) -> Tensor:
    """Differentiable row-wise sparsemax.

    The Jacobian on the support S is I - 11^T/|S| and zero elsewhere; at a
    support boundary the strict ``p > 0`` test picks the one-sided Jacobian.
    """
    x = as_tensor(x)
    y = _sparsemax_rows(x.data)
    mask = y > 0
    dc.note_pattern(mask)

    def bw(g):
        gm = g * mask
        avg = gm.sum(axis=-1, keepdims=True) / mask.sum(axis=-1, keepdims=True)
        return (mask * (g - avg),)

    return _make(y, (x,), bw, "sparsemax")


def attention(Q, K, V, mapping="sparsemax") -> Tensor:
    """mapping(Q K^T / sqrt(d')) V over the last two axes."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if mapping == "uniform":
        # every query row averages all value rows
        ones = np.ones(Q.shape[:-1] + (1,))
        return dc.matmul(ones, dc.mean(V, axis=-2, keepdims=True))
    scores = dc.matmul(Q, dc.swap_last(K)) * (1.0 / math.sqrt(Q.shape[-1]))
    if mapping == "softmax":
        weights = dc.softmax_lastdim(scores)
    elif mapping == "sparsemax":
        weights = sparsemax_lastdim(scores)
    else:
        raise ContractError(f"unknown attention mapping {mapping!r}")
    return dc.matmul(weights, V)


def multi_head(Q, K, V, heads, mapping) -> Tensor:
    """Split the projection width into ``heads`` slices, attend per slice, concatenate."""
    width = Q.shape[-1]
    if width % heads:
        raise DimensionError(f"attention width {width} not divisible by {heads} heads")
    step = width // heads
    if heads == 1:
        return attention(Q, K, V, mapping)
    outs = []
    for h in range(heads):
        sl = (Ellipsis, slice(h * step, (h + 1) * step))
        outs.append(attention(Q[sl], K[sl], V[sl], mapping))
    return dc.concat(outs, axis=-1)


@dataclass
class AttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    heads: int = 1
    mapping: str = "sparsemax"

    def __post_init__(self):
        shapes = {self.W_Q.shape, self.W_K.shape, self.W_V.shape}
        if len(shapes) != 1 or self.W_Q.ndim != 2:
            raise DimensionError(f"projection weights disagree: {sorted(shapes)}")
        if self.heads < 1 or self.W_Q.shape[1] % self.heads:
            raise DimensionError(f"width {self.W_Q.shape[1]} not divisible by {self.heads} heads")
        if self.mapping not in MAPPINGS:
            raise ContractError(f"unknown attention mapping {self.mapping!r}")

    @classmethod
    def init(cls, rng, d, d_out, heads=1, mapping="sparsemax", scale=None):
        scale = 1.0 / math.sqrt(d) if scale is None else scale
        ws = [Tensor(rng.standard_normal((d, d_out)) * scale, requires_grad=True) for _ in range(3)]
        return cls(*ws, heads=heads, mapping=mapping)

    def parameters(self):
        return [self.W_Q, self.W_K, self.W_V]


def sfa_block(X, params: AttentionParams, g: Optional[Graph] = None, kernel: Optional[PolyKernel] = None) -> Tensor:
    """Graph-convolve ``X`` (shape ``(..., N, d)``), project to Q/K/V, multi-head attention."""
    X = as_tensor(X)
    if X.shape[-1] != params.W_Q.shape[0]:
        raise DimensionError(f"input width {X.shape[-1]} does not match projections {params.W_Q.shape}")
    C = graph_conv(g, X, kernel) if g is not None and kernel is not None else X
    Q = dc.matmul(C, params.W_Q)
    K = dc.matmul(C, params.W_K)
    V = dc.matmul(C, params.W_V)
    return multi_head(Q, K, V, params.heads, params.mapping)


@dataclass
class DistillParams:
    kernel: Tensor  # (3, d, d)
    bias: Tensor  # (d,)
    stride: int = 2
    window: int = 3

    @classmethod
    def init(cls, rng, d, stride=2):
        k = Tensor(rng.standard_normal((3, d, d)) / math.sqrt(3 * d), requires_grad=True)
        return cls(k, Tensor(np.zeros(d), requires_grad=True), stride)

    def parameters(self):
        return [self.kernel, self.bias]


def distill(X, params: DistillParams, time_axis=0) -> Tensor:
    """AvgPool(ReLU(Conv1d(X))) along the time axis.

    Width-3 convolution with padding 1 keeps the length; the pool (window 3,
    padding 1) then shortens it according to ``params.stride``.
    """
    X = as_tensor(X)
    if X.shape[time_axis] < 2:
        raise DimensionError(f"distillation needs at least 2 time steps, got {X.shape[time_axis]}")
    axes = list(range(X.ndim))
    # move time to axis -2, channels stay last
    axes.pop(time_axis)
    axes.insert(X.ndim - 2, time_axis)
    Xt = dc.transpose(X, axes) if axes != list(range(X.ndim)) else X
    h = dc.relu(dc.add(dc.conv1d(Xt, params.kernel, stride=1, pad=1), params.bias))
    h = dc.avg_pool1d(h, params.window, params.stride, pad=1)
    inverse = list(np.argsort(axes))
    return dc.transpose(h, inverse) if axes != list(range(X.ndim)) else h
