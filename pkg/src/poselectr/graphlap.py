"""Feature graphs, normalized Laplacians and dense symmetric eigensolvers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DegenerateFeatureError, NumericalError

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns, orthonormal


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph with its Laplacian data computed up front."""

    adjacency: np.ndarray
    laplacian: np.ndarray
    lambda_max: float
    spectrum: Optional[Spectrum] = None

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def scaled_laplacian(self):
        return scale_laplacian(self.laplacian, self.lambda_max)

    @classmethod
    def from_adjacency(cls, adjacency, with_spectrum=True, lambda_max=None, tol=1e-12):
        A = np.array(adjacency, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ContractError(f"adjacency must be square, got {A.shape}")
        if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL:
            raise ContractError("adjacency is not symmetric")
        if np.any(np.diag(A) != 0.0):
            raise ContractError("adjacency diagonal must be zero")
        if np.any(A < 0):
            raise ContractError("adjacency must be nonnegative")
        A = 0.5 * (A + A.T)
        L = normalized_laplacian(A)
        spectrum = None
        if with_spectrum:
            evals, evecs = eig_sym(L, tol=tol)
            spectrum = Spectrum(evals, evecs)
            if lambda_max is None:
                lambda_max = float(evals[-1])
        if lambda_max is None:
            lambda_max = lambda_max_power(L)
        for arr in (A, L) + ((spectrum.eigenvalues, spectrum.eigenvectors) if spectrum else ()):
            arr.setflags(write=False)
        return cls(A, L, float(lambda_max), spectrum)

    def permuted(self, perm):
        """Same graph with node i relabelled as position ``perm`` ordering."""
        perm = np.asarray(perm)
        return Graph.from_adjacency(
            self.adjacency[np.ix_(perm, perm)], with_spectrum=self.spectrum is not None, lambda_max=self.lambda_max
        )


def adjacency_from_features(F, top_k=None):
    """Cosine-similarity adjacency with negative similarities clipped to zero.

    With ``top_k`` each row keeps its k largest off-diagonal entries and the
    result is re-symmetrized by elementwise max.
    """
    F = np.asarray(getattr(F, "data", F), dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ContractError(f"need an (N >= 2, d) feature matrix, got {F.shape}")
    norms = np.linalg.norm(F, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateFeatureError(int(zero[0]))
    U = F / norms[:, None]
    A = np.clip(U @ U.T, 0.0, None)
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 0.0)
    if top_k is not None:
        if top_k < 1:
            raise ContractError("top_k must be positive")
        n = A.shape[0]
        keep = np.zeros_like(A, dtype=bool)
        masked = A.copy()
        np.fill_diagonal(masked, -np.inf)
        k = min(top_k, n - 1)
        cols = np.argsort(-masked, axis=1, kind="stable")[:, :k]
        keep[np.arange(n)[:, None], cols] = True
        A = np.where(keep, A, 0.0)
        A = np.maximum(A, A.T)
    return A


def graph_from_features(F, top_k=None, with_spectrum=True):
    return Graph.from_adjacency(adjacency_from_features(F, top_k), with_spectrum=with_spectrum)


def normalized_laplacian(adjacency):
    """I - D^-1/2 A D^-1/2; an isolated node keeps its identity row."""
    A = np.asarray(getattr(adjacency, "adjacency", adjacency), dtype=np.float64)
    deg = A.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    L = np.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


def scale_laplacian(L, lambda_max):
    """Affine map 2L/lambda_max - I sending [0, lambda_max] onto [-1, 1]."""
    if not lambda_max > 0:
        raise ContractError(f"lambda_max must be positive, got {lambda_max}")
    L = np.asarray(L, dtype=np.float64)
    return (2.0 / lambda_max) * L - np.eye(L.shape[0])


def unscale_laplacian(L_scaled, lambda_max):
    L_scaled = np.asarray(L_scaled, dtype=np.float64)
    return 0.5 * lambda_max * (L_scaled + np.eye(L_scaled.shape[0]))


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def eig_sym(M, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations inside a round touch disjoint rows and can be applied
    together.  Returns ascending eigenvalues and orthonormal eigenvector
    columns, each column signed so its largest-magnitude entry is positive.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"eig_sym needs a square matrix, got {A.shape}")
    n = A.shape[0]
    if n > 512:
        raise ContractError(f"eig_sym is capped at n=512, got {n}")
    scale = np.linalg.norm(A)
    if np.linalg.norm(A - A.T) > 1e-9 * max(scale, 1.0):
        raise ContractError("eig_sym input is not symmetric")
    A = 0.5 * (A + A.T)
    Vt = np.eye(n)  # transposed eigenvector matrix
    target = tol * scale
    rounds = _round_robin(n)

    offdiag = ~np.eye(n, dtype=bool)

    def off_norm():
        return np.linalg.norm(A[offdiag])

    for _ in range(max_sweeps):
        if off_norm() <= target:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 0
            if not active.any():
                continue
            safe = np.where(active, apq, 1.0)
            with np.errstate(over="ignore"):
                theta = (A[q, q] - A[p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(active & np.isfinite(t), t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # J^T A J as two row rotations with a transpose between them
            for _ in range(2):
                Rp, Rq = A[p, :], A[q, :]
                A[p, :], A[q, :] = c[:, None] * Rp - s[:, None] * Rq, s[:, None] * Rp + c[:, None] * Rq
                A = np.ascontiguousarray(A.T)
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = Vt[p, :], Vt[q, :]
            Vt[p, :], Vt[q, :] = c[:, None] * Vp - s[:, None] * Vq, s[:, None] * Vp + c[:, None] * Vq
    else:
        if off_norm() > target:
            raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps", last_iterate=(np.diag(A), Vt.T))
    evals = np.diag(A).copy()
    V = Vt.T
    order = np.argsort(evals, kind="stable")
    evals, V = evals[order], V[:, order]
    pivots = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[pivots, np.arange(n)] < 0, -1.0, 1.0)
    return evals, V * signs


def lambda_max_power(L, tol=1e-12, max_iter=20000, seed=0):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    """
    L = np.asarray(L, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(L.shape[0])
    v /= np.linalg.norm(v)
    rq = float(v @ L @ v)
    for _ in range(max_iter):
        w = L @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = float(v @ L @ v)
        if abs(new - rq) <= tol * abs(new):
            return new
        rq = new
    raise NumericalError("power iteration did not converge", last_iterate=rq)
