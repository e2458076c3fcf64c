"""Build an MNIST-geometry handwritten-digit dataset from sklearn's
bundled 8x8 digits, written as standard IDX files.

The sandbox has no network access and MNIST cannot be vendored, so the
experiment suite falls back to this surrogate: real handwritten digits,
bilinearly resized to 28x28, split into stratified train/test halves.
Point DATADISTILL_MNIST_DIR at real MNIST IDX files to run on MNIST
instead.
"""

from __future__ import annotations

import os
import sys

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from datadistill.data import LabeledDataset, write_idx  # noqa: E402

SIDE = 28
TEST_PER_CLASS = 40
SEED = 1234

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def build_surrogate(out_dir: str) -> dict:
    """Write train/test IDX files; returns the four paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in FILES.items()}
    if all(os.path.exists(p) for p in paths.values()):
        return paths
    raw = load_digits()
    imgs = raw.images / 16.0  # (N, 8, 8) in [0, 1]
    zoom = SIDE / 8.0
    big = np.stack([
        np.clip(ndimage.zoom(im, zoom, order=1, grid_mode=True, mode="nearest"), 0.0, 1.0)
        for im in imgs
    ])
    flat = big.reshape(len(big), SIDE * SIDE)
    labels = raw.target.astype(np.int64)

    rng = np.random.default_rng(SEED)
    test_idx = []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        test_idx.append(rng.choice(members, size=TEST_PER_CLASS, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.zeros(len(labels), dtype=bool)
    mask[test_idx] = True

    train = LabeledDataset(flat[~mask], labels[~mask], 10)
    test = LabeledDataset(flat[mask], labels[mask], 10)
    write_idx(paths["train_images"], paths["train_labels"], train, SIDE)
    write_idx(paths["test_images"], paths["test_labels"], test, SIDE)
    return paths


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "data/surrogate-digits"
    built = build_surrogate(out)
    for k, v in built.items():
        print(f"{k}: {v}")
