"""Learning distilled data and learning rates by unrolled meta-optimization.

The inner loop takes S gradient steps per epoch on synthetic batches (the
whole computation recorded for higher-order differentiation); the outer
loop follows the gradient of the real-data loss at the unrolled weights
w.r.t. the synthetic pixels and raw learning rates, using Adam.

Labels of the synthetic batches stay fixed; learning rates are trained as
raw scalars passed through softplus so every applied rate is positive.
The victim always trains on the distilled batches with plain loss; a
non-standard objective (e.g. poisoning) only shapes the outer objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Node
from .data import LabeledDataset
from .errors import LayoutMismatchError, NumericError
from .models import LinearRegressor, ParamVector


@dataclass
class DistilledData:
    """S synthetic batches with fixed labels, plus raw per-(step, epoch)
    learning-rate parameters (applied rate = softplus(raw))."""

    steps: List[Tuple[np.ndarray, np.ndarray]]  # [(inputs (M, D), labels (M,))]
    lr_raw: np.ndarray  # (S, E)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def num_epochs(self) -> int:
        return self.lr_raw.shape[1]

    def rates(self) -> np.ndarray:
        return np.logaddexp(0.0, self.lr_raw)

    def total_images(self) -> int:
        return sum(x.shape[0] for x, _ in self.steps)

    def copy(self) -> "DistilledData":
        return DistilledData(
            [(x.copy(), y.copy()) for x, y in self.steps], self.lr_raw.copy()
        )


@dataclass
class DistillConfig:
    iterations: int = 400  # T: meta-optimization iterations
    batch_size: int = 256  # n: real minibatch per iteration
    meta_lr: float = 0.001  # alpha (Adam step size)
    init_samples: int = 4  # J: theta_0 draws per iteration
    steps: int = 1  # S: GD steps per epoch
    epochs: int = 1  # E: passes over the steps
    images_per_step: Optional[int] = None  # M_s; default: one per class
    lr_init: float = 0.01
    seed: int = 0

    def validate(self):
        if min(self.iterations, self.batch_size, self.init_samples, self.steps, self.epochs) < 0 \
                or min(self.batch_size, self.init_samples, self.steps, self.epochs) < 1:
            raise ValueError("batch_size, init_samples, steps, epochs must be >= 1")
        if self.meta_lr <= 0 or self.lr_init <= 0:
            raise ValueError("meta_lr and lr_init must be positive")


def round_robin_labels(m: int, num_classes: int) -> np.ndarray:
    """One image per class when m == num_classes, else cyclic assignment."""
    return np.arange(m, dtype=np.int64) % num_classes


def init_distilled(model, config: DistillConfig, num_classes, rng) -> DistilledData:
    """Standard-normal pixels (unconstrained), fixed labels, constant rates."""
    d = models.expected_in_dim(model)
    m = config.images_per_step
    if m is None:
        m = num_classes if num_classes else d
    steps = []
    for _ in range(config.steps):
        x = rng.standard_normal((m, d))
        if isinstance(model, LinearRegressor):
            y = rng.standard_normal(m)
        else:
            y = round_robin_labels(m, num_classes)
        steps.append((x, y))
    raw0 = float(np.log(np.expm1(config.lr_init)))  # softplus^-1
    lr_raw = np.full((config.steps, config.epochs), raw0)
    return DistilledData(steps, lr_raw)


# ---------------------------------------------------------------------------
# inner updates (graph form)
# ---------------------------------------------------------------------------


def inner_step(model, theta: Sequence[Node], batch_x: Node, batch_y, lr: Node) -> List[Node]:
    """One recorded GD step: theta - lr * grad(loss on the synthetic batch)."""
    lnode = models.loss_node(model, list(theta), batch_x, batch_y)
    gmap = ad.backward(lnode, list(theta), create_graph=True)
    return [ad.sub(t, ad.mul(lr, gmap[t])) for t in theta]


def unroll(model, theta0: Sequence[Node], step_inputs: Sequence[Node],
           step_labels: Sequence, lr_nodes) -> List[Node]:
    """Apply S steps per epoch for E epochs; lr_nodes[s][e] is one scalar node.

    Epoch e uses batches 0..S-1 in order, each with its own untied rate.
    """
    theta = list(theta0)
    n_steps = len(step_inputs)
    n_epochs = len(lr_nodes[0])
    for e in range(n_epochs):
        for s in range(n_steps):
            rate = ad.softplus(lr_nodes[s][e])
            theta = inner_step(model, theta, step_inputs[s], step_labels[s], rate)
    return theta


def distilled_leaves(distilled: DistilledData):
    """Fresh graph leaves for the trainable pieces of a distilled set."""
    step_inputs = [ad.leaf(x.copy()) for x, _ in distilled.steps]
    lr_nodes = [
        [ad.leaf(np.asarray(distilled.lr_raw[s, e])) for e in range(distilled.num_epochs)]
        for s in range(distilled.num_steps)
    ]
    return step_inputs, lr_nodes


def meta_loss(model, distilled: DistilledData, theta0: ParamVector,
              real_batch: LabeledDataset, objective=None) -> Node:
    """Real-data loss at the unrolled weights, as a differentiable scalar."""
    lnode, _, _ = build_meta_graph(model, distilled, theta0, real_batch, objective)
    return lnode


def build_meta_graph(model, distilled: DistilledData, theta0: ParamVector,
                     real_batch: LabeledDataset, objective=None):
    """meta loss node plus handles to the pixel and lr leaves (for grads)."""
    step_inputs, lr_nodes = distilled_leaves(distilled)
    theta_nodes = theta0.to_nodes()
    labels = [y for _, y in distilled.steps]
    final = unroll(model, theta_nodes, step_inputs, labels, lr_nodes)
    if isinstance(model, LinearRegressor):
        lnode = models.loss_node(model, final, ad.const(real_batch.inputs), real_batch.labels)
    else:
        y = real_batch.labels
        if objective is not None:
            y = objective.transform_labels(y)
        lnode = models.loss_node(model, final, ad.const(real_batch.inputs), y)
    return lnode, step_inputs, lr_nodes


# ---------------------------------------------------------------------------
# the meta-optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) on a flat vector."""

    def __init__(self, size: int, lr: float):
        self.lr = lr
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mhat = self.m / (1.0 - 0.9 ** self.t)
        vhat = self.v / (1.0 - 0.999 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + 1e-8)


def distill(model, init, dataset: LabeledDataset, objective, config: DistillConfig,
            progress=None) -> DistilledData:
    """Run the full meta-optimization and return the distilled set.

    Each iteration samples one real minibatch (shared across the J
    initial-weight draws), accumulates the summed meta loss over the J
    unrolls, and applies one Adam update to all pixels and raw rates.
    Deterministic given ``config.seed``.  On numeric failure the last
    finite state is attached to the raised :class:`NumericError`.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    ncls = dataset.num_classes
    distilled = init_distilled(model, config, ncls, rng)
    sizes = [x.size for x, _ in distilled.steps] + [distilled.lr_raw.size]
    adam = Adam(sum(sizes), config.meta_lr)
    n = len(dataset)
    draw = 0
    for it in range(config.iterations):
        sel = rng.choice(n, size=min(config.batch_size, n), replace=False)
        batch = dataset.select(sel)
        thetas = [models.sample_init(init, model, draw + j) for j in range(config.init_samples)]
        draw += config.init_samples
        snapshot = distilled.copy()
        try:
            step_inputs, lr_nodes = distilled_leaves(distilled)
            labels = [y for _, y in distilled.steps]
            total = None
            for theta0 in thetas:
                final = unroll(model, theta0.to_nodes(), step_inputs, labels, lr_nodes)
                if isinstance(model, LinearRegressor):
                    lnode = models.loss_node(model, final, ad.const(batch.inputs), batch.labels)
                else:
                    y = batch.labels
                    if objective is not None:
                        y = objective.transform_labels(y)
                    lnode = models.loss_node(model, final, ad.const(batch.inputs), y)
                total = lnode if total is None else ad.add(total, lnode)
            leaves = list(step_inputs) + [l for row in lr_nodes for l in row]
            gmap = ad.backward(total, leaves)
            flat_x = np.concatenate(
                [x.reshape(-1) for x, _ in distilled.steps] + [distilled.lr_raw.reshape(-1)]
            )
            flat_g = np.concatenate([gmap[l].value.reshape(-1) for l in leaves])
            if not np.all(np.isfinite(flat_g)):
                raise NumericError("non-finite meta-gradient", snapshot=snapshot)
        except NumericError as e:
            if e.snapshot is None:
                e.snapshot = snapshot
            raise
        new = adam.step(flat_x, flat_g)
        off = 0
        for s, (x, y) in enumerate(distilled.steps):
            distilled.steps[s] = (new[off : off + x.size].reshape(x.shape), y)
            off += x.size
        distilled.lr_raw = new[off:].reshape(distilled.lr_raw.shape)
        if progress is not None:
            progress(it, float(total.value) / config.init_samples)
    return distilled


def apply_distilled(model, theta0: ParamVector, distilled: DistilledData) -> ParamVector:
    """Deployment path: run the unrolled steps and return concrete weights.

    Uses first-order graphs only (nothing retained for meta-gradients);
    the arithmetic sequence is identical to :func:`unroll`, so the result
    matches it bit for bit.
    """
    theta = theta0.to_nodes()
    rates = distilled.rates()
    for e in range(distilled.num_epochs):
        for s, (x, y) in enumerate(distilled.steps):
            lnode = models.loss_node(model, theta, ad.const(x), y)
            gmap = ad.backward(lnode, theta)
            theta = [ad.leaf(t.value - rates[s, e] * gmap[t].value) for t in theta]
    return models.params_from_nodes(theta)


# ---------------------------------------------------------------------------
# persistence ("DDXD") and image export
# ---------------------------------------------------------------------------

_MAGIC = b"DDXD"
_VERSION = 1


def save_distilled(path, distilled: DistilledData) -> None:
    s, e = distilled.num_steps, distilled.num_epochs
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, s, e))
        for x, y in distilled.steps:
            m, d = x.shape
            f.write(struct.pack("<II", m, d))
            f.write(np.asarray(y, dtype="<u2").tobytes())
            f.write(x.astype("<f8").tobytes())
        f.write(distilled.lr_raw.astype("<f8").tobytes())


def load_distilled(path) -> DistilledData:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise LayoutMismatchError(f"{path}: not a DDXD file")
        version, s, e = struct.unpack("<III", f.read(12))
        if version != _VERSION:
            raise LayoutMismatchError(f"{path}: unsupported version {version}")
        steps = []
        for _ in range(s):
            m, d = struct.unpack("<II", f.read(8))
            y = np.frombuffer(f.read(2 * m), dtype="<u2").astype(np.int64)
            x = np.frombuffer(f.read(8 * m * d), dtype="<f8").reshape(m, d).copy()
            steps.append((x, y))
        lr_raw = np.frombuffer(f.read(8 * s * e), dtype="<f8").reshape(s, e).copy()
    return DistilledData(steps, lr_raw)


def export_pgm(distilled: DistilledData, out_dir, side: Optional[int] = None) -> List[str]:
    """Write each distilled image as an 8-bit PGM, min-max normalized."""
    import os

    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for s, (x, y) in enumerate(distilled.steps):
        d = x.shape[1]
        w = side if side is not None else int(round(np.sqrt(d)))
        h = d // w
        for i in range(x.shape[0]):
            img = x[i]
            lo, hi = img.min(), img.max()
            scale = 255.0 / (hi - lo) if hi > lo else 0.0
            pix = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
            name = f"step{s:02d}_img{i:02d}_label{int(y[i])}.pgm"
            p = os.path.join(out_dir, name)
            with open(p, "wb") as f:
                f.write(f"P5\n{w} {h}\n255\n".encode())
                f.write(pix.tobytes())
            paths.append(p)
    return paths
