"""ADD / ADD-S pose errors, object diameter, threshold accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .pose import Pose


BOUNDARY_ULPS = 4


def diameter(points, chunk=2048) -> float:
    """Largest pairwise Euclidean distance, brute force in row chunks."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ContractError(f"expected an (m >= 1, 3) point array, got {pts.shape}")
    best = 0.0
    for start in range(0, len(pts), chunk):
        block = pts[start : start + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


@dataclass(frozen=True)
class ModelPoints:
    points: np.ndarray
    diameter: float = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ContractError(f"model points must be an (m >= 1, 3) array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("model points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "diameter", diameter(pts))

    def __len__(self):
        return self.points.shape[0]


def _points(pts):
    arr = pts.points if isinstance(pts, ModelPoints) else np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("metric needs a nonempty point set")
    return arr


def add(pred: Pose, gt: Pose, pts) -> float:
    """Mean distance between corresponding model points under the two poses."""
    x = _points(pts)
    return float(np.linalg.norm(gt.transform(x) - pred.transform(x), axis=1).mean())


def add_s(pred: Pose, gt: Pose, pts) -> float:
    """Mean over ground-truth points of the distance to the nearest predicted point.

    Nearest neighbours come from a k-d tree over the predicted cloud.
    """
    x = _points(pts)
    dist, _ = cKDTree(pred.transform(x)).query(gt.transform(x), k=1)
    return float(np.mean(dist))


def add_s_brute(pred: Pose, gt: Pose, pts) -> float:
    """O(m^2) reference for :func:`add_s`."""
    x = _points(pts)
    a = gt.transform(x)
    b = pred.transform(x)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).mean())


def accuracy(dists, diam, frac=0.1) -> float:
    """Share of distances strictly below ``frac * diam``.

    A distance within a few ulps of the threshold counts as on the boundary,
    so ``0.01`` is not below ``0.1 * 0.1`` even though the product rounds up.
    """
    if not diam > 0:
        raise ContractError(f"diameter must be positive, got {diam}")
    d = np.asarray(list(dists), dtype=np.float64)
    if d.size == 0:
        return 0.0
    threshold = frac * diam
    return float(np.mean(d < threshold - BOUNDARY_ULPS * np.spacing(threshold)))
