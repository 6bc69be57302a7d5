"""Synthetic pose data and the Adam training loop with per-epoch halving."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .encoderdecoder import ModelConfig, PoseLecTr, build_graph, pose_loss
from .errors import ContractError
from .pose import Pose, random_quaternion
from .posemetrics import ModelPoints, accuracy, add

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    patches: np.ndarray  # (T, N, c)
    pose: Pose
    points: ModelPoints


@dataclass
class SyntheticDataset:
    samples: List[Sample]
    points: ModelPoints
    feature_map: np.ndarray  # (T*N*c, 3m)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def make_synthetic_dataset(seed, n_samples, cfg: ModelConfig, n_points=16, noise=0.01, cloud_scale=0.05):
    """Random poses observed through a fixed random linear map of the posed cloud.

    Rotations are uniform (normalized Gaussian quaternions), translations
    uniform in [-0.1, 0.1]^3 m; features get Gaussian noise of std ``noise``.
    """
    rng = np.random.default_rng(seed)
    cloud = ModelPoints(rng.standard_normal((n_points, 3)) * cloud_scale)
    dim = cfg.T * cfg.N * cfg.c
    fmap = rng.standard_normal((dim, 3 * n_points)) / np.sqrt(3 * n_points * cloud_scale**2)
    samples = []
    for _ in range(n_samples):
        pose = Pose(random_quaternion(rng), rng.uniform(-0.1, 0.1, size=3))
        posed = pose.transform(cloud.points).reshape(-1)
        feats = fmap @ posed
        if noise:
            feats = feats + rng.normal(0.0, noise, size=dim)
        samples.append(Sample(feats.reshape(cfg.T, cfg.N, cfg.c), pose, cloud))
    return SyntheticDataset(samples, cloud, fmap)


class Adam:
    def __init__(self, params: Sequence[dc.Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(epoch, base=1e-4, decay=0.5):
    """Rate for 0-based ``epoch``: multiplied by ``decay`` (halved) after every epoch."""
    return base * decay**epoch


@dataclass
class TrainReport:
    variant: str
    epoch_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    final_add: List[float] = field(default_factory=list)
    diameter: float = 0.0
    accuracy: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)


def evaluate(model: PoseLecTr, dataset, graphs=None):
    losses, dists = [], []
    for i, s in enumerate(dataset):
        res = model.forward(s.patches, None if graphs is None else graphs[i])
        losses.append(pose_loss(res.pose, s.pose, s.points).item())
        dists.append(add(res.pose.to_pose(), s.pose, s.points))
    return float(np.mean(losses)), dists


def train_toy(
    cfg: ModelConfig,
    dataset,
    epochs=8,
    lr=1e-4,
    validation=None,
    patience=2,
    min_delta=1e-6,
    threshold_frac=0.1,
    model: Optional[PoseLecTr] = None,
    decay=0.5,
):
    """Per-sample Adam with the rate halved after each epoch and early stopping.

    Training stops once the validation loss (training set when no
    ``validation`` is given) has failed to improve by ``min_delta`` for
    ``patience`` consecutive epochs.
    """
    samples = list(dataset)
    if not samples:
        raise ContractError("training needs a nonempty dataset")
    validation = samples if validation is None else list(validation)
    model = PoseLecTr(cfg) if model is None else model
    opt = Adam(model.parameters(), lr=lr)
    order_rng = np.random.default_rng(cfg.seed + 1)
    graphs = [build_graph(s.patches, cfg.top_k) for s in samples]
    val_graphs = graphs if validation is samples else [build_graph(s.patches, cfg.top_k) for s in validation]
    report = TrainReport(cfg.variant)
    best = np.inf
    stale = 0
    for epoch in range(epochs):
        opt.lr = learning_rate(epoch, lr, decay)
        report.learning_rates.append(opt.lr)
        total = 0.0
        for i in order_rng.permutation(len(samples)):
            s = samples[i]
            opt.zero_grad()
            loss = pose_loss(model.forward(s.patches, graphs[i]).pose, s.pose, s.points)
            dc.backward(loss)
            opt.step()
            total += loss.item()
        report.epoch_losses.append(total / len(samples))
        val_loss, _ = evaluate(model, validation, val_graphs)
        report.val_losses.append(val_loss)
        report.epochs_run = epoch + 1
        logger.info("epoch %d lr %.3g train %.6f val %.6f", epoch, opt.lr, report.epoch_losses[-1], val_loss)
        if val_loss < best - min_delta:
            best = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                report.stopped_early = True
                break
    _, dists = evaluate(model, samples, graphs)
    report.final_add = dists
    report.diameter = samples[0].points.diameter
    report.accuracy = accuracy(dists, report.diameter, threshold_frac)
    return model, report
