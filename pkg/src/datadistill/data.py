"""Dataset ingestion and synthetic problem generation.

MNIST-style IDX files are parsed exactly per the format: big-endian magic
(0x803 images / 0x801 labels), u32 dimensions, u8 payload.  Pixels are
scaled to [0, 1] and flattened row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, CountMismatch, InsufficientDataError, ShapeError, TruncatedFile

_IMAGES_MAGIC = 0x00000803
_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Flattened inputs in [0, 1] with integer class labels."""

    inputs: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.inputs.shape[0]:
            raise ShapeError("inputs and labels disagree on N")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ShapeError("label out of range")

    def __len__(self):
        return len(self.labels)

    def select(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class RegressionDataset:
    """Inputs with real-valued targets, batch-compatible with the
    classification dataset (num_classes 0 marks the regression case)."""

    inputs: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) float64 targets
    num_classes: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if len(self.labels) != self.inputs.shape[0]:
            raise ShapeError("inputs and targets disagree on N")

    def __len__(self):
        return len(self.labels)

    def select(self, idx) -> "RegressionDataset":
        return RegressionDataset(self.inputs[idx], self.labels[idx])


@dataclass
class LinearProblem:
    """Regression instance: N x D data matrix and N x 1 targets."""

    d: np.ndarray
    t: np.ndarray
    theta_true: np.ndarray | None = None

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1, 1)
        if self.d.shape[0] != self.t.shape[0]:
            raise ShapeError("data and targets disagree on N")


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"{path}: expected {n} more bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse an MNIST IDX image/label file pair."""
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, images_path))
        if magic != _IMAGES_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x}, expected {_IMAGES_MAGIC:#010x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, images_path))
        raw = _read_exact(f, count * rows * cols, images_path)
        pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        inputs = pixels.reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, labels_path))
        if magic != _LABELS_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x}, expected {_LABELS_MAGIC:#010x}")
        (lcount,) = struct.unpack(">I", _read_exact(f, 4, labels_path))
        if lcount != count:
            raise CountMismatch(f"{count} images but {lcount} labels")
        labels = np.frombuffer(_read_exact(f, lcount, labels_path), dtype=np.uint8).astype(np.int64)
    ncls = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(inputs, labels, ncls)


def write_idx(images_path, labels_path, dataset: LabeledDataset, side: int) -> None:
    """Inverse of :func:`load_idx`, used for fixtures and surrogate data."""
    n = len(dataset)
    if dataset.inputs.shape[1] != side * side:
        raise ShapeError("inputs are not side*side wide")
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IMAGES_MAGIC, n, side, side))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def gen_linear_problem(n: int, d: int, noise_sigma: float, seed: int) -> LinearProblem:
    """Random Gaussian regression instance with recorded ground truth."""
    if n < d:
        raise ValueError("need N >= D")
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, d))
    theta = rng.standard_normal((d, 1))
    t = data @ theta + noise_sigma * rng.standard_normal((n, 1))
    return LinearProblem(data, t, theta_true=theta)


def subsample(dataset: LabeledDataset, per_class: int, seed: int) -> LabeledDataset:
    """Class-stratified subsample without replacement."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise InsufficientDataError(
                f"class {c} has {len(idx)} examples, need {per_class}"
            )
        picks.append(rng.choice(idx, size=per_class, replace=False))
    order = np.concatenate(picks)
    return dataset.select(np.sort(order))


def downscale(dataset: LabeledDataset, factor: int) -> LabeledDataset:
    """Mean-pool square images by ``factor`` (e.g. 28x28 -> 14x14)."""
    if factor == 1:
        return dataset
    d = dataset.inputs.shape[1]
    side = int(round(np.sqrt(d)))
    if side * side != d or side % factor != 0:
        raise ShapeError(f"cannot downscale width {d} by {factor}")
    small = side // factor
    imgs = dataset.inputs.reshape(-1, small, factor, small, factor)
    pooled = imgs.mean(axis=(2, 4)).reshape(len(dataset), small * small)
    return LabeledDataset(pooled, dataset.labels.copy(), dataset.num_classes)
