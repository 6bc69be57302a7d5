"""Invariant suites run by ``poselectr selftest``.

Each check returns ``(measured, tolerance)`` and passes when
``measured <= tolerance``.
"""

from __future__ import annotations

import fnmatch
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import diffcore as dc
from . import gconv, graphlap, legendre, oracles, posemetrics
from .attention import AttentionParams, DistillParams, attention, distill, sfa_block, sparsemax, sparsemax_lastdim
from .encoderdecoder import (
    ModelConfig,
    PoseLecTr,
    build_graph,
    decoder_forward,
    embed_features,
    init_params,
    normalize_quaternion,
    pose_head,
    pose_loss,
    quaternion_to_matrix,
    spatiotemporal_embed,
)
from .legendre import CHEBYSHEV, LEGENDRE, PolyKernel
from .pose import Pose, random_quaternion

Check = Callable[[], Tuple[float, float]]
PRIMITIVE_EPS = 1e-6
# composite losses carry more rounding noise: 1e-5 swamps their smallest
# entries, 1e-4 picks up truncation error from the softmax layers
LAYER_EPS = 3e-5
REGISTRY: Dict[str, Check] = {}


def check(name):
    def deco(fn):
        REGISTRY[name] = fn
        return fn

    return deco


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float
    error: str = ""


def random_graph(rng, n, d=3, top_k=None, with_spectrum=True):
    """Cosine graph of random Gaussian features; retries until no zero rows."""
    F = rng.standard_normal((n, d))
    return graphlap.Graph.from_adjacency(graphlap.adjacency_from_features(F, top_k), with_spectrum=with_spectrum)


# ---------------------------------------------------------------------------
# gradient-check cases shared with the test-suite
# ---------------------------------------------------------------------------


def _param(rng, *shape, scale=1.0):
    return dc.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(out, rng):
    """Scalar <out, R> with a fixed random R so every output entry matters."""
    R = rng.standard_normal(out.shape)
    return dc.tsum(dc.mul(out, R))


def primitive_cases():
    """name -> builder(rng) returning (f, params) for every differentiable primitive."""

    def simple(op, *shapes, **kw):
        def build(rng):
            ps = [_param(rng, *s) for s in shapes]
            R = rng.standard_normal(op(*ps, **kw).shape)
            return (lambda: dc.tsum(dc.mul(op(*ps, **kw), R))), ps

        return build

    def graph_case(family):
        def build(rng):
            g = random_graph(rng, 6)
            x = _param(rng, 6, 3)
            a = _param(rng, 4)
            R = rng.standard_normal((6, 3))
            return (lambda: dc.tsum(dc.mul(gconv.poly_conv(g, x, a, family), R))), [x, a]

        return build

    def quat_norm(rng):
        q = _param(rng, 4)
        R = rng.standard_normal(4)
        return (lambda: dc.tsum(dc.mul(normalize_quaternion(q), R))), [q]

    def quat_mat(rng):
        q = _param(rng, 4)
        R = rng.standard_normal((3, 3))
        return (lambda: dc.tsum(dc.mul(quaternion_to_matrix(q), R))), [q]

    def attn(mapping):
        def build(rng):
            X = _param(rng, 5, 4)
            ap = AttentionParams.init(rng, 4, 4, heads=1, mapping=mapping)
            R = rng.standard_normal((5, 4))
            return (lambda: dc.tsum(dc.mul(sfa_block(X, ap), R))), [X] + ap.parameters()

        return build

    return {
        "add": simple(dc.add, (3, 4), (4,)),
        "sub": simple(dc.sub, (3, 4), (3, 1)),
        "mul": simple(dc.mul, (2, 3, 4), (3, 4)),
        "matmul": simple(dc.matmul, (3, 4), (4, 2)),
        "matmul_batched": simple(dc.matmul, (2, 3, 4), (4, 5)),
        "transpose": simple(lambda x: dc.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "reshape": simple(lambda x: dc.reshape(x, (4, 6)), (2, 3, 4)),
        "getitem": simple(lambda x: x[1:, ::2], (4, 5)),
        "concat": simple(lambda a, b: dc.concat([a, b], axis=-1), (3, 2), (3, 4)),
        "sum": simple(lambda x: dc.tsum(x, axis=1), (3, 4)),
        "mean": simple(lambda x: dc.mean(x, axis=0, keepdims=True), (3, 4)),
        "relu": simple(dc.relu, (5, 4)),
        "softmax": simple(dc.softmax_lastdim, (4, 5)),
        "row_norm": simple(dc.row_norm, (5, 3)),
        "conv1d": simple(lambda x, k: dc.conv1d(x, k, stride=2, pad=1), (7, 3), (3, 3, 2)),
        "conv1d_batched": simple(lambda x, k: dc.conv1d(x, k, stride=1, pad=2), (2, 6, 2), (3, 2, 3)),
        "avg_pool1d": simple(lambda x: dc.avg_pool1d(x, 3, 2, 1), (8, 3)),
        "sparsemax": simple(sparsemax_lastdim, (4, 5)),
        "legendre_conv": graph_case(LEGENDRE),
        "chebyshev_conv": graph_case(CHEBYSHEV),
        "normalize_quaternion": quat_norm,
        "quaternion_to_matrix": quat_mat,
        "attention_softmax": attn("softmax"),
        "attention_sparsemax": attn("sparsemax"),
    }


def layer_cases(cfg: ModelConfig = None):
    """name -> builder(rng) returning (f, params) for each model layer and the full model."""
    cfg = ModelConfig(T=4, N=8, c=3, d=8, d_prime=8, heads=2, K=3, encoder_sections=2) if cfg is None else cfg

    def toy_inputs(rng):
        patches = rng.standard_normal((cfg.T, cfg.N, cfg.c))
        return patches, build_graph(patches, cfg.top_k)

    def gcn(rng):
        g = random_graph(rng, 5)
        x = _param(rng, 5, 3)
        kernel = PolyKernel(LEGENDRE, _param(rng, 3))
        W = _param(rng, 3, 3)
        R = rng.standard_normal((5, 3))
        return (lambda: dc.tsum(dc.mul(gconv.gcn_layer(g, x, kernel, W, "relu"), R))), [x, kernel.coeffs, W]

    def sfa(rng):
        g = random_graph(rng, 6)
        X = _param(rng, 3, 6, 4)
        kernel = PolyKernel(cfg.kernel_family, _param(rng, 3))
        ap = AttentionParams.init(rng, 4, 4, heads=2, mapping=cfg.attention_mapping)
        for w in ap.parameters():
            w.data *= 2.0
        R = rng.standard_normal((3, 6, 4))
        return (lambda: dc.tsum(dc.mul(sfa_block(X, ap, g, kernel), R))), [X, kernel.coeffs] + ap.parameters()

    def dist(rng):
        X = _param(rng, 8, 3, 4)
        dp = DistillParams.init(rng, 4, stride=2)
        dp.bias.data[:] = rng.standard_normal(4) * 0.1
        R = rng.standard_normal((4, 3, 4))
        return (lambda: dc.tsum(dc.mul(distill(X, dp), R))), [X] + dp.parameters()

    def embed(rng):
        p = init_params(cfg)
        patches = _param(rng, cfg.T, cfg.N, cfg.c)
        keys = [k for k in p if k.startswith("embed.")]
        for k in keys:
            if k.endswith("bias"):
                p[k].data[:] = 0.1 * rng.standard_normal(p[k].shape)
        R = rng.standard_normal((cfg.T, cfg.N, cfg.d))
        return (lambda: dc.tsum(dc.mul(embed_features(patches, p), R))), [patches] + [p[k] for k in keys]

    def st_embed(rng):
        patches, g = toy_inputs(rng)
        X = _param(rng, cfg.T, cfg.N, cfg.d)
        Ws, Wt = _param(rng, cfg.n_eig, cfg.d), _param(rng, cfg.d, cfg.d)
        R = rng.standard_normal((cfg.T, cfg.N, cfg.d))
        return (lambda: dc.tsum(dc.mul(spatiotemporal_embed(X, g, cfg.n_eig, Ws, Wt), R))), [X, Ws, Wt]

    def decoder(rng):
        p = init_params(cfg)
        S = cfg.encoder_sections
        enc = _param(rng, 2, cfg.N, S * cfg.d_prime)
        byp = [_param(rng, 2, cfg.N, cfg.d_prime) for _ in range(S)]
        keys = [k for k in p if k.startswith("dec.")]
        R = rng.standard_normal(cfg.d_sk)
        return (lambda: dc.tsum(dc.mul(decoder_forward(enc, byp, p, cfg.heads), R))), [enc] + byp + [p[k] for k in keys]

    def head(rng):
        p = init_params(cfg)
        p["head.weight"].data[:] = rng.standard_normal(p["head.weight"].shape)
        h = _param(rng, cfg.d_sk)
        gt = Pose(random_quaternion(rng), rng.uniform(-0.1, 0.1, 3))
        pts = rng.standard_normal((10, 3)) * 0.05
        return (lambda: pose_loss(pose_head(h, p), gt, pts)), [h, p["head.weight"], p["head.bias"]]

    def full(rng):
        model = PoseLecTr(ModelConfig(**{**cfg.to_dict(), "seed": int(rng.integers(1 << 30))}))
        patches, g = toy_inputs(rng)
        gt = Pose(random_quaternion(rng), rng.uniform(-0.1, 0.1, 3))
        pts = rng.standard_normal((16, 3)) * 0.05
        return (lambda: pose_loss(model.forward(patches, g).pose, gt, pts)), model.parameters()

    return {
        "gcn_layer": gcn,
        "sfa_block": sfa,
        "distill": dist,
        "embed_features": embed,
        "spatiotemporal_embed": st_embed,
        "decoder": decoder,
        "pose_head_loss": head,
        "end_to_end": full,
    }


def run_grad_case(builder, seed, eps=PRIMITIVE_EPS, max_coords=None):
    rng = np.random.default_rng(seed)
    f, params = builder(rng)
    return dc.grad_check_report(f, params, eps=eps, max_coords=max_coords, rng=rng, guard=True)


# ---------------------------------------------------------------------------
# legendre
# ---------------------------------------------------------------------------


@check("legendre.rodrigues_vs_recursion")
def _():
    x = np.random.default_rng(0).uniform(-1, 1, 1000)
    err = max(np.max(np.abs(legendre.legendre_eval(n, x) - legendre.legendre_eval_rodrigues(n, x))) for n in range(7))
    return float(err), 1e-12


@check("legendre.orthogonality_n10_q12")
def _():
    return legendre.orthogonality_defect(10, 12), 1e-10


@check("legendre.orthogonality_n5_q8")
def _():
    return legendre.orthogonality_defect(5, 8), 1e-12


@check("legendre.bounded_on_interval")
def _():
    x = np.linspace(-1, 1, 10_000)
    worst = max(np.max(np.abs(legendre.legendre_eval(n, x))) for n in range(21))
    return float(max(worst - 1.0, 0.0)), 1e-12


@check("legendre.parity")
def _():
    x = np.random.default_rng(1).uniform(-1, 1, 1000)
    err = max(np.max(np.abs(legendre.legendre_eval(n, -x) - (-1) ** n * legendre.legendre_eval(n, x))) for n in range(21))
    return float(err), 1e-13


@check("legendre.chebyshev_trig")
def _():
    theta = np.linspace(0, np.pi, 200)
    err = max(np.max(np.abs(legendre.chebyshev_eval(n, np.cos(theta)) - np.cos(n * theta))) for n in range(12))
    return float(err), 1e-12


# ---------------------------------------------------------------------------
# graphlap
# ---------------------------------------------------------------------------


@check("graphlap.spectrum_in_0_2")
def _():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        g = random_graph(rng, int(rng.integers(2, 33)), d=int(rng.integers(2, 6)))
        ev = g.spectrum.eigenvalues
        worst = max(worst, -ev[0], ev[-1] - 2.0)
    return float(max(worst, 0.0)), 1e-10


@check("graphlap.null_vector")
def _():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        F = np.abs(rng.standard_normal((int(rng.integers(2, 20)), 3))) + 0.1  # all cosines positive: connected
        A = graphlap.adjacency_from_features(F)
        v = np.sqrt(A.sum(axis=1))
        worst = max(worst, np.max(np.abs(graphlap.normalized_laplacian(A) @ v)))
    return float(worst), 1e-10


@check("graphlap.eig_orthonormal")
def _():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        M = rng.standard_normal((8, 8))
        _, U = graphlap.eig_sym(M + M.T)
        worst = max(worst, np.max(np.abs(U.T @ U - np.eye(8))))
    return float(worst), 1e-10


@check("graphlap.eig_reconstruction")
def _():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        g = random_graph(rng, 12)
        s = g.spectrum
        worst = max(worst, np.max(np.abs((s.eigenvectors * s.eigenvalues) @ s.eigenvectors.T - g.laplacian)))
    return float(worst), 1e-9


@check("graphlap.power_vs_jacobi")
def _():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        B = rng.standard_normal((16, 16))
        M = B @ B.T
        top = graphlap.eig_sym(M)[0][-1]
        worst = max(worst, abs(graphlap.lambda_max_power(M) - top) / top)
    return float(worst), 1e-6


@check("graphlap.scale_roundtrip")
def _():
    g = random_graph(np.random.default_rng(7), 10)
    L2 = graphlap.unscale_laplacian(graphlap.scale_laplacian(g.laplacian, g.lambda_max), g.lambda_max)
    return float(np.max(np.abs(L2 - g.laplacian))), 1e-12


# ---------------------------------------------------------------------------
# gconv
# ---------------------------------------------------------------------------


def _conv_equivalence(family, trials=50, seed=8):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 13))
        K = int(rng.integers(1, 7))
        g = random_graph(rng, n)
        kernel = PolyKernel(family, rng.standard_normal(K))
        x = rng.standard_normal((n, 3))
        fast = gconv.graph_conv(g, x, kernel).data
        exact = gconv.spectral_conv_exact(g, x, kernel).data
        worst = max(worst, np.max(np.abs(fast - exact)))
    return float(worst)


@check("gconv.legendre_vs_exact")
def _():
    return _conv_equivalence(LEGENDRE), 1e-8


@check("gconv.chebyshev_vs_exact")
def _():
    return _conv_equivalence(CHEBYSHEV), 1e-8


@check("gconv.linearity")
def _():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 9)
    kernel = PolyKernel(LEGENDRE, rng.standard_normal(5))
    x, y = rng.standard_normal((2, 9, 4))
    conv = lambda v: gconv.legendre_conv(g, v, kernel).data
    err = max(np.max(np.abs(conv(x + y) - conv(x) - conv(y))), np.max(np.abs(conv(2.5 * x) - 2.5 * conv(x))))
    return float(err), 1e-10


@check("gconv.permutation_equivariance")
def _():
    rng = np.random.default_rng(10)
    g = random_graph(rng, 9, with_spectrum=False)
    perm = rng.permutation(9)
    gp = g.permuted(perm)
    kernel = PolyKernel(LEGENDRE, rng.standard_normal(4))
    x = rng.standard_normal((9, 3))
    y = gconv.legendre_conv(g, x, kernel).data
    yp = gconv.legendre_conv(gp, x[perm], kernel).data
    return float(np.max(np.abs(yp - y[perm]))), 1e-12


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@check("attention.sparsemax_vs_support_enumeration")
def _():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        z = rng.standard_normal(int(rng.integers(1, 5))) * 2
        worst = max(worst, np.max(np.abs(sparsemax(z) - oracles.simplex_projection_by_support(z))))
    return float(worst), 1e-12


@check("attention.sparsemax_simplex")
def _():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        z = rng.standard_normal(int(rng.integers(1, 9))) * 3
        p = sparsemax(z)
        worst = max(worst, abs(p.sum() - 1.0), -p.min(), np.max(np.abs(sparsemax(z + 7.3) - p)))
        worst = max(worst, float(p[np.argmax(z)] < p.max()))
    return float(worst), 1e-12


@check("attention.kv_permutation_invariance")
def _():
    rng = np.random.default_rng(13)
    worst = 0.0
    for mapping in ("softmax", "sparsemax"):
        Q, K, V = rng.standard_normal((3, 5, 4))
        perm = rng.permutation(5)
        a = attention(Q, K, V, mapping).data
        b = attention(Q, K[perm], V[perm], mapping).data
        worst = max(worst, np.max(np.abs(a - b)))
    return float(worst), 1e-12


# ---------------------------------------------------------------------------
# diffcore and layers
# ---------------------------------------------------------------------------


@check("diffcore.primitive_gradients")
def _():
    worst = 0.0
    for builder in primitive_cases().values():
        for seed in range(10):
            worst = max(worst, run_grad_case(builder, seed).max_rel_error)
    return worst, 1e-5


@check("diffcore.length_formulas")
def _():
    bad = 0
    for padded in range(1, 65):
        for pad in range(0, padded // 2 + 1):
            T = padded - 2 * pad
            if T < 1:
                continue
            x = np.ones((T, 1))
            for w in range(1, padded + 1):
                for stride in (1, 2, 3):
                    expected = (padded - w) // stride + 1
                    bad += dc.conv1d(x, np.ones((w, 1, 1)), stride, pad).shape[0] != expected
                    bad += dc.avg_pool1d(x, w, stride, pad).shape[0] != expected
    return float(bad), 0.0


@check("encoderdecoder.layer_gradients")
def _():
    worst = 0.0
    for name, builder in layer_cases().items():
        if name == "end_to_end":
            continue
        for seed in range(3):
            worst = max(worst, run_grad_case(builder, seed, eps=LAYER_EPS).max_rel_error)
    return worst, 1e-4


@check("encoderdecoder.end_to_end_gradient")
def _():
    builder = layer_cases()["end_to_end"]
    return run_grad_case(builder, 0, eps=LAYER_EPS, max_coords=24).max_rel_error, 1e-4


# ---------------------------------------------------------------------------
# posemetrics
# ---------------------------------------------------------------------------


def _random_pose(rng):
    return Pose(random_quaternion(rng), rng.uniform(-0.2, 0.2, 3))


@check("posemetrics.add_vs_summation")
def _():
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(50):
        pts = rng.standard_normal((50, 3)) * 0.1
        a, b = _random_pose(rng), _random_pose(rng)
        worst = max(worst, abs(posemetrics.add(a, b, pts) - oracles.add_by_summation(a, b, pts)))
    return float(worst), 1e-12


@check("posemetrics.adds_tree_vs_brute")
def _():
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(50):
        pts = rng.standard_normal((int(rng.integers(1, 201)), 3)) * 0.1
        a, b = _random_pose(rng), _random_pose(rng)
        worst = max(worst, abs(posemetrics.add_s(a, b, pts) - posemetrics.add_s_brute(a, b, pts)))
    return float(worst), 1e-12


@check("posemetrics.adds_le_add")
def _():
    rng = np.random.default_rng(16)
    worst = -np.inf
    for _ in range(1000):
        pts = rng.standard_normal((20, 3)) * 0.1
        a, b = _random_pose(rng), _random_pose(rng)
        worst = max(worst, posemetrics.add_s(a, b, pts) - posemetrics.add(a, b, pts))
    return float(max(worst, 0.0)), 0.0


@check("posemetrics.square_symmetry")
def _():
    pts = np.array([[1.0, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]]) * 0.1
    gt = Pose.identity()
    pred = Pose(np.array([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]), np.zeros(3))
    add_val = posemetrics.add(pred, gt, pts)
    adds_val = posemetrics.add_s(pred, gt, pts)
    # measured: ADD-S (must vanish) plus a penalty if ADD is not clearly positive
    return float(adds_val + (0.0 if add_val > 1e-3 else 1.0)), 1e-12


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


def run(pattern=None) -> List[CheckResult]:
    results = []
    for name, fn in REGISTRY.items():
        if pattern and not (fnmatch.fnmatch(name, pattern) or name.split(".")[0] == pattern or name.startswith(pattern)):
            continue
        start = time.perf_counter()
        try:
            measured, tol = fn()
            ok = bool(np.isfinite(measured) and measured <= tol)
            results.append(CheckResult(name, measured, tol, ok, time.perf_counter() - start))
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(name, float("nan"), float("nan"), False, time.perf_counter() - start, repr(exc)))
    return results
