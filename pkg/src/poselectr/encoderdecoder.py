"""Full model: embedding stand-in, spatio-temporal embedding, distilling encoder,
decoder with bypass, pose head and the point-matching loss."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from . import diffcore as dc
from .attention import AttentionParams, DistillParams, distill, multi_head, sfa_block
from .diffcore import Tensor, _make, as_tensor
from .errors import ConfigurationError, ContractError, DimensionError
from .graphlap import Graph, adjacency_from_features
from .legendre import CHEBYSHEV, LEGENDRE, PolyKernel, normalize_family
from .pose import Pose, quat_to_matrix
from .posemetrics import ModelPoints

QUAT_EPS = 1e-8


@dataclass
class ModelConfig:
    T: int = 4
    N: int = 8
    c: int = 3
    d: int = 8
    d_prime: int = 8
    heads: int = 2
    K: int = 3
    encoder_sections: int = 2
    mapping: str = "sparsemax"
    kernel_family: str = LEGENDRE
    distill_enabled: bool = True
    sfa_enabled: bool = True
    pool_stride: int = 2
    d_sk: Optional[int] = None
    n_eig: int = 2
    conv_channels: int = 8
    top_k: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        self.kernel_family = normalize_family(self.kernel_family)
        if self.d_sk is None:
            self.d_sk = self.d_prime
        for name in ("T", "N", "c", "d", "d_prime", "heads", "K", "encoder_sections", "pool_stride", "d_sk", "conv_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_prime % self.heads or self.d_sk % self.heads:
            raise ConfigurationError(f"d_prime={self.d_prime} and d_sk={self.d_sk} must be divisible by heads={self.heads}")
        if self.mapping not in ("softmax", "sparsemax"):
            raise ConfigurationError(f"mapping must be softmax or sparsemax, got {self.mapping!r}")
        if not 0 <= self.n_eig <= min(self.N - 1, self.d):
            raise ConfigurationError(f"n_eig={self.n_eig} must lie in [0, min(N-1, d)]")
        section_lengths(self)

    @property
    def variant(self) -> str:
        """Name of the ablation variant these switches select."""
        marks = ""
        if self.kernel_family == CHEBYSHEV:
            marks += "+"
        if not self.sfa_enabled:
            marks += "*"
        if not self.distill_enabled:
            marks += "#"
        return "PoseLecTr" + marks

    @property
    def attention_mapping(self) -> str:
        return self.mapping if self.sfa_enabled else "uniform"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def section_lengths(cfg: ModelConfig) -> List[int]:
    """Time length processed by each encoder section."""
    lengths = [cfg.T]
    for _ in range(cfg.encoder_sections - 1):
        if not cfg.distill_enabled:
            lengths.append(lengths[-1])
            continue
        t = lengths[-1]
        if t < 2:
            raise ConfigurationError(
                f"T={cfg.T} too short for {cfg.encoder_sections} distilling sections with stride {cfg.pool_stride}"
            )
        lengths.append(dc.conv_output_length(t, 3, cfg.pool_stride, 1))
    return lengths


# ---------------------------------------------------------------------------
# Differentiable pose pieces
# ---------------------------------------------------------------------------


def normalize_quaternion(q) -> Tensor:
    """q / |q| with the sign chosen so w >= 0.  A zero input gets w += 1e-8 first."""
    q = as_tensor(q)
    raw = q.data.copy()
    if np.linalg.norm(raw) == 0:
        raw[0] += QUAT_EPS
    n = np.linalg.norm(raw)
    u = raw / n
    sign = -1.0 if u[0] < 0 else 1.0
    dc.note_pattern([sign < 0])

    def bw(g):
        return (sign * (g - u * (u @ g)) / n,)

    return _make(sign * u, (q,), bw, "normalize_quaternion")


def _rotation_jacobian(q):
    w, x, y, z = q
    J = np.zeros((3, 3, 4))
    J[0, 0] = [0, 0, -4 * y, -4 * z]
    J[0, 1] = [-2 * z, 2 * y, 2 * x, -2 * w]
    J[0, 2] = [2 * y, 2 * z, 2 * w, 2 * x]
    J[1, 0] = [2 * z, 2 * y, 2 * x, 2 * w]
    J[1, 1] = [0, -4 * x, 0, -4 * z]
    J[1, 2] = [-2 * x, -2 * w, 2 * z, 2 * y]
    J[2, 0] = [-2 * y, 2 * z, -2 * w, 2 * x]
    J[2, 1] = [2 * x, 2 * w, 2 * z, 2 * y]
    J[2, 2] = [0, -4 * x, -4 * y, 0]
    return J


def quaternion_to_matrix(q) -> Tensor:
    q = as_tensor(q)
    J = _rotation_jacobian(q.data)
    return _make(quat_to_matrix(q.data), (q,), lambda g: (np.einsum("ij,ijk->k", g, J),), "quat_to_matrix")


class PosePrediction(NamedTuple):
    q: Tensor
    t: Tensor
    degenerate: bool = False

    def to_pose(self) -> Pose:
        return Pose(self.q.data, self.t.data)


def _pose_tensors(p):
    if isinstance(p, PosePrediction):
        return p.q, p.t
    if isinstance(p, Pose):
        return Tensor(p.q), Tensor(p.t)
    raise ContractError(f"expected Pose or PosePrediction, got {type(p).__name__}")


def pose_loss(pred, gt, points) -> Tensor:
    """Mean distance between model points moved by ``pred`` and by ``gt``."""
    x = points.points if isinstance(points, ModelPoints) else np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("pose_loss needs a nonempty point set")
    qp, tp = _pose_tensors(pred)
    qg, tg = _pose_tensors(gt)
    moved_pred = dc.add(dc.matmul(x, dc.swap_last(quaternion_to_matrix(qp))), tp)
    moved_gt = dc.add(dc.matmul(x, dc.swap_last(quaternion_to_matrix(qg))), tg)
    return dc.mean(dc.row_norm(dc.sub(moved_pred, moved_gt)))


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def embed_features(patches, params: Dict[str, Tensor]) -> Tensor:
    """Two width-3 convolutions over the node axis, then a per-node linear map to d.

    ``patches`` has shape (T, N, c); output (T, N, d).
    """
    x = as_tensor(patches)
    if x.ndim != 3 or x.shape[-1] != params["embed.conv1.kernel"].shape[1]:
        raise DimensionError(f"patches {x.shape} do not match embedding channels")
    h = dc.relu(dc.add(dc.conv1d(x, params["embed.conv1.kernel"], 1, 1), params["embed.conv1.bias"]))
    h = dc.relu(dc.add(dc.conv1d(h, params["embed.conv2.kernel"], 1, 1), params["embed.conv2.bias"]))
    return dc.add(dc.matmul(h, params["embed.fc.weight"]), params["embed.fc.bias"])


def sinusoidal_encoding(T, dim):
    """Interleaved sin/cos position code with wavelengths 2*pi*10000^(2i/dim)."""
    pos = np.arange(T)[:, None]
    i = np.arange(dim)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def spatial_eigenvectors(g: Graph, n_eig: int) -> np.ndarray:
    """First ``n_eig`` eigenvectors after the trivial one, sign-fixed by eig_sym."""
    if n_eig == 0:
        return np.zeros((g.n, 0))
    if g.spectrum is None:
        raise ContractError("spatial embedding needs a graph with its spectrum")
    if n_eig > g.n - 1:
        raise ContractError(f"n_eig={n_eig} exceeds the {g.n - 1} nontrivial eigenvectors")
    return np.asarray(g.spectrum.eigenvectors[:, 1 : 1 + n_eig])


def spatiotemporal_embed(X, g: Graph, n_eig: int, W_spatial, W_temporal) -> Tensor:
    """X + (Laplacian eigenvectors) W_spatial + (sinusoidal time code) W_temporal."""
    X = as_tensor(X)
    T, N, d = X.shape
    if not 0 <= n_eig <= min(N, d):
        raise ContractError(f"n_eig={n_eig} out of range for N={N}, d={d}")
    out = X
    if n_eig:
        spatial = dc.matmul(spatial_eigenvectors(g, n_eig), W_spatial)
        out = dc.add(out, spatial)
    temporal = dc.matmul(sinusoidal_encoding(T, d), W_temporal)
    return dc.add(out, dc.reshape(temporal, (T, 1, d)))


def pool_time(x, length) -> Tensor:
    """Adaptive average pooling of axis 0 down to ``length`` bins."""
    x = as_tensor(x)
    T = x.shape[0]
    if T == length:
        return x
    P = np.zeros((length, T))
    for i in range(length):
        lo = (i * T) // length
        hi = -((-(i + 1) * T) // length)
        P[i, lo:hi] = 1.0 / (hi - lo)
    flat = dc.reshape(x, (T, -1))
    return dc.reshape(dc.matmul(P, flat), (length,) + x.shape[1:])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _kaiming(rng, shape, fan_in):
    return Tensor(rng.standard_normal(shape) / math.sqrt(fan_in), requires_grad=True)


def init_params(cfg: ModelConfig) -> Dict[str, Tensor]:
    """Deterministic parameter initialisation from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    p: Dict[str, Tensor] = {}
    cc = cfg.conv_channels
    p["embed.conv1.kernel"] = _kaiming(rng, (3, cfg.c, cc), 3 * cfg.c)
    p["embed.conv1.bias"] = Tensor(np.zeros(cc), requires_grad=True)
    p["embed.conv2.kernel"] = _kaiming(rng, (3, cc, cc), 3 * cc)
    p["embed.conv2.bias"] = Tensor(np.zeros(cc), requires_grad=True)
    p["embed.fc.weight"] = _kaiming(rng, (cc, cfg.d), cc)
    p["embed.fc.bias"] = Tensor(np.zeros(cfg.d), requires_grad=True)
    p["st.spatial"] = _kaiming(rng, (cfg.n_eig, cfg.d), max(cfg.n_eig, 1))
    p["st.temporal"] = Tensor(rng.standard_normal((cfg.d, cfg.d)) * 0.1, requires_grad=True)
    for s in range(cfg.encoder_sections):
        d_in = cfg.d if s == 0 else cfg.d_prime
        alpha = np.zeros(cfg.K)
        alpha[0] = 1.0
        alpha[1:] = 0.1 * rng.standard_normal(cfg.K - 1)
        p[f"enc{s}.alpha"] = Tensor(alpha, requires_grad=True)
        for name in ("W_Q", "W_K", "W_V"):
            p[f"enc{s}.{name}"] = _kaiming(rng, (d_in, cfg.d_prime), d_in)
        if cfg.distill_enabled and s < cfg.encoder_sections - 1:
            p[f"enc{s}.distill.kernel"] = _kaiming(rng, (3, cfg.d_prime, cfg.d_prime), 3 * cfg.d_prime)
            p[f"enc{s}.distill.bias"] = Tensor(np.zeros(cfg.d_prime), requires_grad=True)
    S = cfg.encoder_sections
    p["dec.in"] = _kaiming(rng, (S * cfg.d_prime, cfg.d_sk), S * cfg.d_prime)
    for s in range(S):
        p[f"dec.bypass{s}"] = _kaiming(rng, (cfg.d_prime, cfg.d_sk), cfg.d_prime)
    for layer in range(2):
        for name in ("W_Q", "W_K", "W_V"):
            p[f"dec.attn{layer}.{name}"] = _kaiming(rng, (cfg.d_sk, cfg.d_sk), cfg.d_sk)
    p["head.weight"] = Tensor(rng.standard_normal((cfg.d_sk, 7)) * 0.01, requires_grad=True)
    p["head.bias"] = Tensor(np.array([1.0, 0, 0, 0, 0, 0, 0]), requires_grad=True)
    return p


def build_graph(patches, top_k=None) -> Graph:
    """Cosine graph over nodes from the time-averaged input features (no gradient)."""
    data = np.asarray(getattr(patches, "data", patches), dtype=np.float64)
    return Graph.from_adjacency(adjacency_from_features(data.mean(axis=0), top_k), with_spectrum=True)


def encoder_forward(X, cfg: ModelConfig, params: Dict[str, Tensor], g: Graph):
    """Run the stacked sections; return (merged map, per-section maps)."""
    X = as_tensor(X)
    if X.shape[0] != cfg.T:
        raise ConfigurationError(f"input has T={X.shape[0]}, config expects {cfg.T}")
    section_lengths(cfg)
    cur = X
    feats = []
    for s in range(cfg.encoder_sections):
        kernel = PolyKernel(cfg.kernel_family, params[f"enc{s}.alpha"])
        ap = AttentionParams(
            params[f"enc{s}.W_Q"], params[f"enc{s}.W_K"], params[f"enc{s}.W_V"], cfg.heads, cfg.attention_mapping
        )
        out = sfa_block(cur, ap, g, kernel)
        feats.append(out)
        if cfg.distill_enabled and s < cfg.encoder_sections - 1:
            dp = DistillParams(params[f"enc{s}.distill.kernel"], params[f"enc{s}.distill.bias"], cfg.pool_stride)
            cur = distill(out, dp, time_axis=0)
        else:
            cur = out
    shortest = min(f.shape[0] for f in feats)
    aligned = [pool_time(f, shortest) for f in feats]
    return dc.concat(aligned, axis=-1), aligned


def decoder_forward(enc, bypass_inputs, params: Dict[str, Tensor], heads: int) -> Tensor:
    """Two residual multi-head softmax attention layers, then mean over (time, nodes)."""
    z = dc.matmul(enc, params["dec.in"])
    for s, b in enumerate(bypass_inputs):
        z = dc.add(z, dc.matmul(b, params[f"dec.bypass{s}"]))
    for layer in range(2):
        q = dc.matmul(z, params[f"dec.attn{layer}.W_Q"])
        k = dc.matmul(z, params[f"dec.attn{layer}.W_K"])
        v = dc.matmul(z, params[f"dec.attn{layer}.W_V"])
        z = dc.add(z, multi_head(q, k, v, heads, "softmax"))
    width = z.shape[-1]
    return dc.mean(dc.reshape(z, (-1, width)), axis=0)


def pose_head(h, params: Dict[str, Tensor]) -> PosePrediction:
    h = as_tensor(h)
    raw = dc.add(dc.matmul(dc.reshape(h, (1, -1)), params["head.weight"]), params["head.bias"])
    raw = dc.reshape(raw, (7,))
    q_raw = raw[0:4]
    degenerate = bool(np.linalg.norm(q_raw.data) == 0)
    return PosePrediction(normalize_quaternion(q_raw), raw[4:7], degenerate)


@dataclass
class ForwardResult:
    pose: PosePrediction
    report: dict
    feature: Tensor


class PoseLecTr:
    """Parameters plus forward pass for one configuration."""

    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def forward(self, patches, g: Optional[Graph] = None) -> ForwardResult:
        cfg = self.cfg
        patches = as_tensor(patches)
        if patches.shape != (cfg.T, cfg.N, cfg.c):
            raise DimensionError(f"patches shape {patches.shape} != (T, N, c) = {(cfg.T, cfg.N, cfg.c)}")
        g = build_graph(patches, cfg.top_k) if g is None else g
        p = self.params
        x = embed_features(patches, p)
        x = spatiotemporal_embed(x, g, cfg.n_eig, p["st.spatial"], p["st.temporal"])
        merged, sections = encoder_forward(x, cfg, p, g)
        h = decoder_forward(merged, sections, p, cfg.heads)
        pose = pose_head(h, p)
        report = {
            "variant": cfg.variant,
            "kernel_family": cfg.kernel_family,
            "attention_mapping": cfg.attention_mapping,
            "distill_enabled": cfg.distill_enabled,
            "section_lengths": section_lengths(cfg),
            "merged_length": merged.shape[0],
            "degenerate_quaternion": pose.degenerate,
        }
        return ForwardResult(pose, report, h)

    def structure_report(self, patches, g: Optional[Graph] = None) -> dict:
        """Forward report plus primitive counts of the recorded computation graph."""
        res = self.forward(patches, g)
        out = dc.add(dc.tsum(res.pose.q), dc.tsum(res.pose.t))
        report = dict(res.report)
        report["op_counts"] = dc.Tape.from_output(out).op_counts()
        return report

    # -- checkpoints -------------------------------------------------------
    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path):
        payload = {
            "format": "poselectr-checkpoint",
            "version": 1,
            "config": self.cfg.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in self.params.items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "PoseLecTr":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != "poselectr-checkpoint":
            raise ContractError(f"{path} is not a model checkpoint")
        cfg = ModelConfig.from_dict(payload["config"])
        expected = init_params(cfg)
        stored = payload["params"]
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        if missing or extra:
            raise ContractError(f"checkpoint keys differ: missing {missing}, unexpected {extra}")
        params = {}
        for name, ref in expected.items():
            shape = tuple(stored[name]["shape"])
            if shape != ref.shape:
                raise ContractError(f"checkpoint {name} has shape {shape}, config implies {ref.shape}")
            data = np.asarray(stored[name]["data"], dtype=np.float64).reshape(shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(cfg, params)
