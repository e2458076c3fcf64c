"""Real-image comparison methods and their evaluation grid.

All baselines are pushed through the same unrolled-step machinery as the
distilled method (fixed learning rate instead of learned ones) so the
step semantics and image budget match exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import models
from .data import LabeledDataset
from .distillation import DistilledData, apply_distilled
from .errors import InsufficientDataError
from .models import ParamVector

LR_GRID = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3)
EPOCH_GRID = (1, 3, 5)


def select_random_real(dataset: LabeledDataset, per_class: int, seed: int) -> LabeledDataset:
    """Uniform per-class sample without replacement, deterministic per seed."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise InsufficientDataError(f"class {c}: {len(idx)} < {per_class}")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    return dataset.select(np.concatenate(picks))


def average_real(dataset: LabeledDataset) -> LabeledDataset:
    """One mean image per class (reused across GD steps when applied)."""
    imgs, labels = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            raise InsufficientDataError(f"class {c} is empty")
        imgs.append(dataset.inputs[idx].mean(axis=0))
        labels.append(c)
    return LabeledDataset(np.stack(imgs), np.asarray(labels), dataset.num_classes)


def _kmeans(points: np.ndarray, k: int, rng, max_iter=100, tol=1e-6) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding on squared Euclidean."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new = np.empty_like(centroids)
        for j in range(k):
            members = points[assign == j]
            if len(members) == 0:
                # re-seed an empty cluster at the farthest point
                far = dist.min(axis=1).argmax()
                new[j] = points[far]
            else:
                new[j] = members.mean(axis=0)
        move = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if move <= tol:
            break
    return centroids


def kmeans_centroids(dataset: LabeledDataset, per_class: int, seed: int = 0) -> LabeledDataset:
    """Per-class k-means centroids, labeled with their class."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise InsufficientDataError(f"class {c}: {len(idx)} < {per_class}")
        cents = _kmeans(dataset.inputs[idx], per_class, rng)
        imgs.append(cents)
        labels.extend([c] * per_class)
    return LabeledDataset(np.concatenate(imgs), np.asarray(labels), dataset.num_classes)


def inertia(dataset: LabeledDataset, centroids: LabeledDataset) -> float:
    """Within-class sum of squared distances to the nearest same-class centroid."""
    total = 0.0
    for c in range(dataset.num_classes):
        pts = dataset.inputs[dataset.labels == c]
        cents = centroids.inputs[centroids.labels == c]
        if len(pts) == 0 or len(cents) == 0:
            continue
        d = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        total += float(d.min(axis=1).sum())
    return total


# ---------------------------------------------------------------------------
# applying a real-image set through the distilled-step structure
# ---------------------------------------------------------------------------


def arrange_steps(dataset: LabeledDataset, steps: int, lr: float, epochs: int) -> DistilledData:
    """Pack a real-image set into S fixed-rate batches.

    Sets that divide evenly are dealt round-robin by class so every batch
    stays balanced; smaller sets (e.g. class averages) are reused whole in
    every step.
    """
    n = len(dataset)
    # round-robin over classes: i-th pick of class 0, of class 1, ...
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    rr = []
    depth = max(len(b) for b in by_class)
    for i in range(depth):
        for b in by_class:
            if i < len(b):
                rr.append(b[i])
    ordered = dataset.select(np.asarray(rr))
    raw = float(np.log(np.expm1(lr)))
    if n % steps == 0 and n // steps >= 1 and n >= steps:
        m = n // steps
        batches = [
            (ordered.inputs[s * m : (s + 1) * m], ordered.labels[s * m : (s + 1) * m])
            for s in range(steps)
        ]
    else:
        batches = [(ordered.inputs, ordered.labels) for _ in range(steps)]
    return DistilledData(batches, np.full((steps, epochs), raw))


@dataclass
class GridCell:
    lr: float
    epochs: int
    mean: float
    std: float
    accuracies: List[float]


@dataclass
class GridResult:
    best: GridCell
    cells: List[GridCell]


def baseline_grid_eval(baseline_data: LabeledDataset, model, init_pool: Sequence[ParamVector],
                       testset: LabeledDataset, steps: int = 1,
                       learned_lr: Optional[float] = None,
                       lr_grid=LR_GRID, epoch_grid=EPOCH_GRID) -> GridResult:
    """Evaluate every (lr, epochs) combination over the held-out pool and
    return the best-mean cell alongside the full grid."""
    lrs = list(lr_grid)
    if learned_lr is not None:
        lrs = [learned_lr] + lrs
    cells = []
    for lr in lrs:
        for epochs in epoch_grid:
            packed = arrange_steps(baseline_data, steps, lr, epochs)
            accs = []
            for theta0 in init_pool:
                trained = apply_distilled(model, theta0, packed)
                accs.append(models.evaluate(model, trained, testset))
            accs_arr = np.asarray(accs)
            cells.append(GridCell(lr, epochs, float(accs_arr.mean()),
                                  float(accs_arr.std()), accs))
    best = max(cells, key=lambda c: c.mean)
    return GridResult(best=best, cells=cells)


def select_optimized_real(dataset: LabeledDataset, per_class: int, model,
                          eval_inits: Sequence[ParamVector], probe: LabeledDataset,
                          steps: int = 1, lr: float = 0.01, epochs: int = 3,
                          n_candidates: int = 50, top_k: int = 10,
                          seed: int = 0) -> List[LabeledDataset]:
    """Score random real sets by post-step probe accuracy on held-out
    models; keep the best top_k of n_candidates."""
    scored = []
    for i in range(n_candidates):
        cand = select_random_real(dataset, per_class, seed + i)
        packed = arrange_steps(cand, steps, lr, epochs)
        accs = [
            models.evaluate(model, apply_distilled(model, t0, packed), probe)
            for t0 in eval_inits
        ]
        scored.append((float(np.mean(accs)), i, cand))
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [cand for _, _, cand in scored[:top_k]]
