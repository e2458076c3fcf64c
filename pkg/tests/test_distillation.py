import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datadistill import autodiff as ad
from datadistill import distillation as dist
from datadistill import models
from datadistill.data import LabeledDataset
from datadistill.objectives import CrossEntropy


@pytest.fixture
def tiny_dataset(rng):
    x = rng.random((40, 6))
    y = rng.integers(0, 3, 40)
    return LabeledDataset(x, y, num_classes=3)


def small_config(**kw):
    base = dict(iterations=5, batch_size=16, meta_lr=0.01, init_samples=2,
                steps=2, epochs=2, lr_init=0.02, seed=0)
    base.update(kw)
    return dist.DistillConfig(**base)


# ---------------------------------------------------------------------------
# structure / initialization
# ---------------------------------------------------------------------------


def test_round_robin_labels():
    np.testing.assert_array_equal(dist.round_robin_labels(5, 3), [0, 1, 2, 0, 1])
    np.testing.assert_array_equal(dist.round_robin_labels(3, 3), [0, 1, 2])


def test_init_distilled_shapes_and_rates():
    model = models.MLP(6, 4, 3)
    cfg = small_config(images_per_step=5)
    dd = dist.init_distilled(model, cfg, 3, np.random.default_rng(0))
    assert dd.num_steps == 2 and dd.num_epochs == 2
    assert all(x.shape == (5, 6) for x, _ in dd.steps)
    assert dd.total_images() == 10
    np.testing.assert_allclose(dd.rates(), cfg.lr_init, atol=1e-12)


def test_images_per_step_defaults_to_one_per_class():
    model = models.MLP(6, 4, 3)
    dd = dist.init_distilled(model, small_config(), 3, np.random.default_rng(0))
    assert all(x.shape[0] == 3 for x, _ in dd.steps)
    for _, y in dd.steps:
        np.testing.assert_array_equal(np.sort(y), [0, 1, 2])


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(meta_lr=0.0).validate()
    with pytest.raises(ValueError):
        small_config(steps=0).validate()
    with pytest.raises(ValueError):
        small_config(lr_init=-1.0).validate()


@given(st.floats(-50, 50))
@settings(max_examples=60, deadline=None)
def test_applied_rates_always_positive(raw):
    dd = dist.DistilledData([(np.zeros((1, 2)), np.zeros(1, dtype=np.int64))],
                            np.array([[raw]]))
    assert dd.rates()[0, 0] > 0.0


# ---------------------------------------------------------------------------
# inner step / unroll arithmetic
# ---------------------------------------------------------------------------


def test_inner_step_matches_manual_gradient_descent(rng, tiny_dataset):
    model = models.SoftmaxLinear(6, 3)
    pv = models.sample_init(models.RandomXavier(1), model, 0)
    lr = 0.3
    # manual: theta - lr * grad
    nodes = pv.to_nodes()
    lnode = models.loss_node(model, nodes, ad.const(tiny_dataset.inputs), tiny_dataset.labels)
    gmap = ad.backward(lnode, nodes)
    manual = [n.value - lr * gmap[n].value for n in nodes]
    # graph form
    stepped = dist.inner_step(model, pv.to_nodes(), ad.const(tiny_dataset.inputs),
                              tiny_dataset.labels, ad.const(lr))
    for a, b in zip(manual, stepped):
        np.testing.assert_array_equal(a, b.value)


def test_apply_distilled_bit_identical_to_unroll(rng):
    model = models.MLP(6, 4, 3)
    pv = models.sample_init(models.RandomXavier(2), model, 0)
    dd = dist.init_distilled(model, small_config(), 3, np.random.default_rng(3))
    # graph path
    step_inputs, lr_nodes = dist.distilled_leaves(dd)
    labels = [y for _, y in dd.steps]
    final = dist.unroll(model, pv.to_nodes(), step_inputs, labels, lr_nodes)
    graph_flat = models.params_from_nodes(final).flat
    # deployment path
    applied = dist.apply_distilled(model, pv, dd)
    np.testing.assert_array_equal(applied.flat, graph_flat)


def test_meta_gradient_matches_finite_differences(rng, tiny_dataset):
    """Gradient through the whole unroll (pixels and raw rates) vs central FD."""
    model = models.MLP(6, 4, 3)
    pv = models.sample_init(models.RandomXavier(4), model, 0)
    dd = dist.init_distilled(model, small_config(images_per_step=3), 3,
                             np.random.default_rng(5))

    lnode, step_inputs, lr_nodes = dist.build_meta_graph(model, dd, pv, tiny_dataset)
    leaves = list(step_inputs) + [l for row in lr_nodes for l in row]
    gmap = ad.backward(lnode, leaves)
    flat_g = np.concatenate([gmap[l].value.reshape(-1) for l in leaves])

    def loss_at(flat):
        dd2 = dd.copy()
        off = 0
        for s, (x, y) in enumerate(dd2.steps):
            dd2.steps[s] = (flat[off:off + x.size].reshape(x.shape), y)
            off += x.size
        dd2.lr_raw = flat[off:].reshape(dd2.lr_raw.shape)
        return float(dist.meta_loss(model, dd2, pv, tiny_dataset).value)

    flat0 = np.concatenate([x.reshape(-1) for x, _ in dd.steps] + [dd.lr_raw.reshape(-1)])
    picks = np.random.default_rng(0).choice(flat0.size, size=20, replace=False)
    picks = np.concatenate([picks, np.arange(flat0.size - dd.lr_raw.size, flat0.size)])
    eps = 1e-6
    for i in picks:
        e = np.zeros_like(flat0)
        e[i] = eps
        fd = (loss_at(flat0 + e) - loss_at(flat0 - e)) / (2 * eps)
        assert abs(flat_g[i] - fd) <= 1e-5 * (abs(fd) + 1)


# ---------------------------------------------------------------------------
# the optimizer loop
# ---------------------------------------------------------------------------


def test_adam_converges_on_quadratic():
    adam = dist.Adam(3, lr=0.1)
    x = np.array([5.0, -3.0, 2.0])
    for _ in range(600):
        x = adam.step(x, 2 * x)
    assert np.abs(x).max() < 1e-3


def test_distill_is_deterministic(tiny_dataset):
    model = models.MLP(6, 4, 3)
    init = models.RandomXavier(0)
    cfg = small_config()
    a = dist.distill(model, init, tiny_dataset, CrossEntropy(), cfg)
    b = dist.distill(model, init, tiny_dataset, CrossEntropy(), small_config())
    np.testing.assert_array_equal(a.lr_raw, b.lr_raw)
    for (xa, ya), (xb, yb) in zip(a.steps, b.steps):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)


def test_distill_zero_iterations_returns_initialization(tiny_dataset):
    model = models.MLP(6, 4, 3)
    cfg = small_config(iterations=0)
    got = dist.distill(model, models.RandomXavier(0), tiny_dataset, CrossEntropy(), cfg)
    want = dist.init_distilled(model, cfg, 3, np.random.default_rng(cfg.seed))
    np.testing.assert_array_equal(got.lr_raw, want.lr_raw)
    np.testing.assert_allclose(got.rates(), cfg.lr_init, atol=1e-12)
    for (xa, ya), (xb, yb) in zip(got.steps, want.steps):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)


def test_distill_keeps_labels_fixed(tiny_dataset):
    model = models.MLP(6, 4, 3)
    cfg = small_config(iterations=8)
    got = dist.distill(model, models.RandomXavier(0), tiny_dataset, CrossEntropy(), cfg)
    for _, y in got.steps:
        np.testing.assert_array_equal(y, dist.round_robin_labels(len(y), 3))


def test_distill_linear_regressor_reaches_global_minimum():
    from datadistill import data, linear_case
    from datadistill.objectives import QuadraticMSE

    p = data.gen_linear_problem(n=40, d=4, noise_sigma=0.1, seed=0)
    ds = data.RegressionDataset(p.d, p.t.reshape(-1))
    model = models.LinearRegressor(4)
    cfg = dist.DistillConfig(iterations=800, batch_size=40, meta_lr=0.05,
                             init_samples=2, steps=1, epochs=1, images_per_step=4,
                             lr_init=0.1, seed=0)
    dd = dist.distill(model, models.FixedSeed(0), ds, QuadraticMSE(), cfg)
    theta0 = models.sample_init(models.FixedSeed(0), model, 0)
    final = dist.apply_distilled(model, theta0, dd)
    best = linear_case.quadratic_loss(p, linear_case.solve_normal(p))
    assert linear_case.quadratic_loss(p, final.flat) - best <= 1e-6


def test_distill_reduces_meta_loss(tiny_dataset):
    model = models.SoftmaxLinear(6, 3)
    init = models.RandomXavier(0)
    losses = []
    dist.distill(model, init, tiny_dataset, CrossEntropy(),
                 small_config(iterations=200, batch_size=40, meta_lr=0.1,
                              steps=1, epochs=1),
                 progress=lambda i, l: losses.append(l))
    assert np.mean(losses[-10:]) < np.mean(losses[:10]) * 0.9


# ---------------------------------------------------------------------------
# persistence and export
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    model = models.MLP(6, 4, 3)
    dd = dist.init_distilled(model, small_config(images_per_step=4), 3,
                             np.random.default_rng(7))
    path = tmp_path / "d.ddxd"
    dist.save_distilled(path, dd)
    assert path.read_bytes()[:4] == b"DDXD"
    back = dist.load_distilled(path)
    assert back.num_steps == dd.num_steps and back.num_epochs == dd.num_epochs
    np.testing.assert_array_equal(back.lr_raw, dd.lr_raw)
    for (xa, ya), (xb, yb) in zip(dd.steps, back.steps):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)


def test_save_is_byte_deterministic(tmp_path):
    model = models.MLP(6, 4, 3)
    dd = dist.init_distilled(model, small_config(), 3, np.random.default_rng(9))
    dist.save_distilled(tmp_path / "a", dd)
    dist.save_distilled(tmp_path / "b", dd)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_export_pgm(tmp_path):
    dd = dist.DistilledData(
        [(np.linspace(0, 1, 2 * 16).reshape(2, 16), np.array([0, 1], dtype=np.int64))],
        np.zeros((1, 1)),
    )
    paths = dist.export_pgm(dd, tmp_path / "imgs")
    assert len(paths) == 2
    blob = open(paths[0], "rb").read()
    assert blob.startswith(b"P5\n4 4\n255\n")
    pixels = blob.split(b"255\n", 1)[1]
    assert len(pixels) == 16
    assert pixels[0] == 0 and pixels[-1] == 255  # min-max normalized


def test_export_pgm_constant_image(tmp_path):
    dd = dist.DistilledData(
        [(np.full((1, 4), 0.7), np.array([3], dtype=np.int64))], np.zeros((1, 1))
    )
    (p,) = dist.export_pgm(dd, tmp_path / "imgs")
    pixels = open(p, "rb").read().split(b"255\n", 1)[1]
    assert set(pixels) == {0}
