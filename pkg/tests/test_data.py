import struct

import numpy as np
import pytest

from datadistill import data
from datadistill.errors import BadMagic, CountMismatch, ShapeError, TruncatedFile


def craft_idx_pair(path, images, labels):
    """Write a tiny IDX image/label pair byte by byte and return the paths."""
    img_path = path / "imgs"
    lbl_path = path / "lbls"
    n, rows, cols = images.shape
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
    return img_path, lbl_path


@pytest.fixture
def tiny_idx(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    images[0] = [[0, 51], [102, 153]]
    images[1] = [[255, 204], [153, 102]]
    images[2] = [[1, 2], [3, 4]]
    return craft_idx_pair(tmp_path, images, [7, 0, 9]), images


def test_load_idx_values_and_scaling(tiny_idx):
    (imgs, lbls), raw = tiny_idx
    ds = data.load_idx(imgs, lbls)
    assert ds.inputs.shape == (3, 4)
    assert ds.inputs.dtype == np.float64
    np.testing.assert_allclose(ds.inputs, raw.reshape(3, 4) / 255.0)
    np.testing.assert_array_equal(ds.labels, [7, 0, 9])
    assert ds.num_classes == 10


def test_write_then_load_round_trip(tmp_path, tiny_idx):
    (imgs, lbls), raw = tiny_idx
    ds = data.load_idx(imgs, lbls)
    data.write_idx(tmp_path / "i2", tmp_path / "l2", ds, side=2)
    again = data.load_idx(tmp_path / "i2", tmp_path / "l2")
    np.testing.assert_array_equal(again.inputs, ds.inputs)
    np.testing.assert_array_equal(again.labels, ds.labels)
    # byte-for-byte identical files
    assert (tmp_path / "i2").read_bytes() == imgs.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lbls.read_bytes()


def test_bad_magic(tmp_path, tiny_idx):
    (imgs, lbls), _ = tiny_idx
    blob = bytearray(imgs.read_bytes())
    blob[3] = 0x99
    bad = tmp_path / "bad"
    bad.write_bytes(bytes(blob))
    with pytest.raises(BadMagic):
        data.load_idx(bad, lbls)


def test_count_mismatch(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    imgs, _ = craft_idx_pair(tmp_path, images, [0, 1, 2])
    other = tmp_path / "other"
    other.mkdir()
    _, lbls2 = craft_idx_pair(other, images[:2], [0, 1])
    with pytest.raises(CountMismatch):
        data.load_idx(imgs, lbls2)


def test_truncated_file(tmp_path, tiny_idx):
    (imgs, lbls), _ = tiny_idx
    cut = tmp_path / "cut"
    cut.write_bytes(imgs.read_bytes()[:-3])
    with pytest.raises(TruncatedFile):
        data.load_idx(cut, lbls)


def test_gen_linear_problem_shapes_and_determinism():
    p1 = data.gen_linear_problem(n=40, d=8, noise_sigma=0.1, seed=5)
    p2 = data.gen_linear_problem(n=40, d=8, noise_sigma=0.1, seed=5)
    assert p1.d.shape == (40, 8) and p1.t.shape == (40, 1)
    np.testing.assert_array_equal(p1.d, p2.d)
    np.testing.assert_array_equal(p1.t, p2.t)
    p3 = data.gen_linear_problem(n=40, d=8, noise_sigma=0.1, seed=6)
    assert np.abs(p1.d - p3.d).max() > 0


def test_gen_linear_problem_noise_free_is_consistent():
    p = data.gen_linear_problem(n=30, d=5, noise_sigma=0.0, seed=3)
    np.testing.assert_allclose(p.t, p.d @ p.theta_true, atol=1e-12)


def test_subsample_stratified():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 25)
    ds = data.LabeledDataset(rng.random((100, 6)), labels, num_classes=4)
    sub = data.subsample(ds, per_class=5, seed=1)
    assert sub.inputs.shape == (20, 6)
    counts = np.bincount(sub.labels, minlength=4)
    np.testing.assert_array_equal(counts, [5, 5, 5, 5])
    # rows come from the original dataset
    for row in sub.inputs:
        assert (np.abs(ds.inputs - row).sum(axis=1) < 1e-15).any()


def test_downscale_mean_pooling():
    img = np.arange(16, dtype=float).reshape(1, 16) / 16.0
    ds = data.LabeledDataset(img, np.array([0]), num_classes=10)
    small = data.downscale(ds, 2)
    assert small.inputs.shape == (1, 4)
    grid = img.reshape(4, 4)
    expect = np.array(
        [[grid[:2, :2].mean(), grid[:2, 2:].mean()], [grid[2:, :2].mean(), grid[2:, 2:].mean()]]
    )
    np.testing.assert_allclose(small.inputs.reshape(2, 2), expect)


def test_downscale_rejects_non_square():
    ds = data.LabeledDataset(np.zeros((1, 15)), np.array([0]), num_classes=10)
    with pytest.raises(ShapeError):
        data.downscale(ds, 2)


def test_select_subset():
    ds = data.LabeledDataset(np.arange(12.0).reshape(6, 2), np.arange(6) % 3, num_classes=3)
    part = ds.select(np.array([1, 4]))
    np.testing.assert_array_equal(part.labels, [1, 1])
    np.testing.assert_array_equal(part.inputs, ds.inputs[[1, 4]])
