"""Wall-clock comparison of the eigenbasis filter against the polynomial recursions."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gconv, graphlap
from .errors import ContractError
from .legendre import CHEBYSHEV, LEGENDRE, PolyKernel

MAX_NODES = 512
COLUMNS = ("trial", "n", "K", "exact_s", "legendre_s", "chebyshev_s", "legendre_dev", "chebyshev_dev")


@dataclass
class BenchRow:
    trial: int
    n: int
    K: int
    exact_s: float
    legendre_s: float
    chebyshev_s: float
    legendre_dev: float
    chebyshev_dev: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in COLUMNS)


def bench_trial(n, K, rng, trial=0, channels=8):
    """One random graph; each path is timed from the raw adjacency.

    The exact path pays for the eigendecomposition, the recursive paths for
    the power-iteration estimate of the largest eigenvalue.
    """
    if not 2 <= n <= MAX_NODES:
        raise ContractError(f"n must lie in [2, {MAX_NODES}], got {n}")
    if K < 1:
        raise ContractError(f"K must be positive, got {K}")
    A = graphlap.adjacency_from_features(rng.standard_normal((n, 8)))
    x = rng.standard_normal((n, channels))
    coeffs = rng.standard_normal(K)

    start = time.perf_counter()
    g_exact = graphlap.Graph.from_adjacency(A, with_spectrum=True)
    y_leg_exact = gconv.spectral_conv_exact(g_exact, x, PolyKernel(LEGENDRE, coeffs)).data
    exact_s = time.perf_counter() - start
    y_cheb_exact = gconv.spectral_conv_exact(g_exact, x, PolyKernel(CHEBYSHEV, coeffs)).data

    timings, outputs = {}, {}
    for family in (LEGENDRE, CHEBYSHEV):
        start = time.perf_counter()
        g = graphlap.Graph.from_adjacency(A, with_spectrum=False)
        gconv.graph_conv(g, x, PolyKernel(family, coeffs))
        timings[family] = time.perf_counter() - start
        # deviation measured on the same scaling as the exact path
        outputs[family] = gconv.graph_conv(g_exact, x, PolyKernel(family, coeffs)).data

    return BenchRow(
        trial,
        n,
        K,
        exact_s,
        timings[LEGENDRE],
        timings[CHEBYSHEV],
        float(np.max(np.abs(outputs[LEGENDRE] - y_leg_exact))),
        float(np.max(np.abs(outputs[CHEBYSHEV] - y_cheb_exact))),
    )


def run_bench(n, K, trials=10, seed=0):
    rng = np.random.default_rng(seed)
    return [bench_trial(n, K, rng, trial=i) for i in range(trials)]


def median_speedup(rows, family=LEGENDRE):
    exact = np.median([r.exact_s for r in rows])
    fast = np.median([r.legendre_s if family == LEGENDRE else r.chebyshev_s for r in rows])
    return float(exact / fast)
