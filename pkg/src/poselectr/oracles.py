"""Slow, independent reference implementations used by the self-test and tests."""

from __future__ import annotations

import itertools

import numpy as np


def simplex_projection_by_support(z):
    """Projection onto the probability simplex by trying every support set.

    For a candidate support S the KKT conditions give p_S = z_S - tau with
    tau = (sum z_S - 1)/|S|; the answer is the candidate with p_S >= 0 and
    z_j <= tau off the support.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    best = None
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            idx = list(support)
            tau = (z[idx].sum() - 1.0) / size
            p = np.zeros(n)
            p[idx] = z[idx] - tau
            off = [j for j in range(n) if j not in support]
            if np.all(p[idx] >= -1e-15) and np.all(z[off] <= tau + 1e-15):
                dist = np.sum((p - z) ** 2)
                if best is None or dist < best[0]:
                    best = (dist, p)
    return best[1]


def direct_conv1d(x, kernel, stride, pad):
    """Loop-level zero-padded convolution along axis 0 of a (T, c_in) array."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    T, c_in = x.shape
    w, _, c_out = kernel.shape
    T_out = (T + 2 * pad - w) // stride + 1
    out = np.zeros((T_out, c_out))
    for t in range(T_out):
        for j in range(w):
            src = t * stride + j - pad
            if 0 <= src < T:
                for ci in range(c_in):
                    for co in range(c_out):
                        out[t, co] += x[src, ci] * kernel[j, ci, co]
    return out


def _rotate(q, v):
    """Rotate v by unit quaternion q via q v q*, without forming a matrix."""
    w, x, y, z = q
    u = np.array([x, y, z])
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def add_by_summation(pred, gt, points):
    """ADD written as an explicit per-point loop with quaternion rotation."""
    total = 0.0
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    for x in pts:
        a = _rotate(gt.q, x) + gt.t
        b = _rotate(pred.q, x) + pred.t
        total += np.sqrt(np.sum((a - b) ** 2))
    return total / len(pts)


def polynomial_filter_by_eigh(L, lambda_max, family, coeffs):
    """Dense filter matrix from numpy's eigh, independent of the Jacobi solver."""
    from .legendre import poly_series

    evals, U = np.linalg.eigh(np.asarray(L, dtype=np.float64))
    response = poly_series(family, np.asarray(coeffs, dtype=np.float64), 2.0 * evals / lambda_max - 1.0)
    return (U * response) @ U.T
