import os
import sys

import numpy as np
import pytest

SCRIPTS = os.path.join(os.path.dirname(__file__), "..", "scripts")
sys.path.insert(0, SCRIPTS)

from datadistill import data  # noqa: E402


def mnist_dir():
    """Real MNIST IDX directory, if the user provided one."""
    return os.environ.get("DATADISTILL_MNIST_DIR")


@pytest.fixture(scope="session")
def digit_idx_paths(tmp_path_factory):
    """IDX files for the digit experiments.

    Real MNIST when DATADISTILL_MNIST_DIR is set; otherwise the bundled
    handwritten-digit surrogate at identical 28x28 geometry.
    """
    d = mnist_dir()
    if d:
        return {
            "train_images": os.path.join(d, "train-images-idx3-ubyte"),
            "train_labels": os.path.join(d, "train-labels-idx1-ubyte"),
            "test_images": os.path.join(d, "t10k-images-idx3-ubyte"),
            "test_labels": os.path.join(d, "t10k-labels-idx1-ubyte"),
        }
    from make_surrogate_digits import build_surrogate

    out = tmp_path_factory.mktemp("surrogate-digits")
    return build_surrogate(str(out))


@pytest.fixture(scope="session")
def digits14(digit_idx_paths):
    """Train/test pair at 14x14 (downscale factor 2), per-class capped so
    surrogate and MNIST runs see comparable budgets."""
    train = data.load_idx(digit_idx_paths["train_images"], digit_idx_paths["train_labels"])
    test = data.load_idx(digit_idx_paths["test_images"], digit_idx_paths["test_labels"])
    train = data.downscale(train, 2)
    test = data.downscale(test, 2)
    if len(train) > 2000:
        train = data.subsample(train, 130, seed=7)
    if len(test) > 1000:
        test = data.subsample(test, 40, seed=8)
    return train, test


@pytest.fixture
def rng():
    return np.random.default_rng(0)
