import numpy as np
import pytest

from datadistill import autodiff as ad
from datadistill import models
from datadistill.data import LabeledDataset
from datadistill.errors import LayoutMismatchError
from datadistill.objectives import CrossEntropy


def finite_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


@pytest.fixture
def toy_batch(rng):
    x = rng.random((12, 9))
    y = rng.integers(0, 3, 12)
    return LabeledDataset(x, y, num_classes=3)


def test_param_vector_round_trip():
    model = models.MLP(9, 5, 3)
    pv = models.sample_init(models.RandomXavier(0), model, 0)
    rebuilt = models.params_from_nodes(pv.to_nodes())
    np.testing.assert_array_equal(rebuilt.flat, pv.flat)
    assert rebuilt.layout == pv.layout


def test_layout_matches_param_shapes():
    model = models.MLP(9, 5, 3)
    pv = models.sample_init(models.RandomXavier(0), model, 0)
    assert [s for _, s in pv.layout] == [tuple(s) for s in model.param_shapes()]
    assert pv.flat.size == models.num_params(model)


def test_sample_init_deterministic():
    model = models.MLP(9, 5, 3)
    spec = models.RandomXavier(base_seed=7)
    a = models.sample_init(spec, model, 3)
    b = models.sample_init(spec, model, 3)
    c = models.sample_init(spec, model, 4)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert np.abs(a.flat - c.flat).max() > 0


def test_fixed_seed_ignores_index():
    model = models.MLP(9, 5, 3)
    spec = models.FixedSeed(seed=11)
    a = models.sample_init(spec, model, 0)
    b = models.sample_init(spec, model, 99)
    np.testing.assert_array_equal(a.flat, b.flat)


def test_xavier_bounds_and_zero_biases():
    model = models.MLP(100, 50, 10)
    pv = models.sample_init(models.RandomXavier(0), model, 2)
    w1, b1, w2, b2 = pv.views()
    assert np.abs(w1).max() <= np.sqrt(6 / 150) + 1e-12
    assert np.abs(w2).max() <= np.sqrt(6 / 60) + 1e-12
    assert not b1.any() and not b2.any()


def test_he_statistics():
    model = models.MLP(400, 200, 10)
    pv = models.sample_init(models.RandomHe(0), model, 1)
    w1 = pv.views()[0]
    assert w1.std() == pytest.approx(np.sqrt(2 / 400), rel=0.1)


def test_predict_matches_graph_forward(toy_batch):
    model = models.MLP(9, 5, 3)
    pv = models.sample_init(models.RandomXavier(1), model, 0)
    logits = models.forward(model, pv.to_nodes(), ad.const(toy_batch.inputs)).value
    np.testing.assert_array_equal(models.predict_np(model, pv, toy_batch.inputs), logits)


@pytest.mark.parametrize(
    "model",
    [models.SoftmaxLinear(9, 3), models.MLP(9, 5, 3)],
    ids=["softmax_linear", "mlp"],
)
def test_loss_gradcheck(model, toy_batch):
    pv = models.sample_init(models.RandomXavier(2), model, 0)
    nodes = pv.to_nodes()
    lnode = models.loss_node(
        model, nodes, ad.const(toy_batch.inputs), toy_batch.labels, CrossEntropy()
    )
    grads = ad.backward(lnode, nodes)
    flat_grad = np.concatenate([grads[n].value.reshape(-1) for n in nodes])

    def f(flat):
        pv2 = models.ParamVector(flat.copy(), pv.layout)
        return float(models.loss(model, pv2, toy_batch, CrossEntropy()).value)

    fd = finite_diff(f, pv.flat)
    assert np.max(np.abs(flat_grad - fd) / (np.abs(fd) + 1e-6)) <= 1e-5


def test_convnet_gradcheck(rng):
    model = models.ConvNet(8, channels1=2, channels2=3, kernel=3, num_classes=4)
    ds = LabeledDataset(rng.random((5, 64)), rng.integers(0, 4, 5), num_classes=4)
    pv = models.sample_init(models.RandomHe(3), model, 0)
    nodes = pv.to_nodes()
    lnode = models.loss_node(model, nodes, ad.const(ds.inputs), ds.labels, CrossEntropy())
    grads = ad.backward(lnode, nodes)
    flat_grad = np.concatenate([grads[n].value.reshape(-1) for n in nodes])
    picks = np.random.default_rng(0).choice(pv.flat.size, size=30, replace=False)
    for i in picks:
        e = np.zeros_like(pv.flat)
        e[i] = 1e-5
        up = float(models.loss(model, models.ParamVector(pv.flat + e, pv.layout), ds, CrossEntropy()).value)
        dn = float(models.loss(model, models.ParamVector(pv.flat - e, pv.layout), ds, CrossEntropy()).value)
        fd = (up - dn) / 2e-5
        assert abs(flat_grad[i] - fd) <= 1e-5 * (abs(fd) + 1)


def test_evaluate_accuracy_and_tie_break():
    model = models.SoftmaxLinear(2, 3)
    pv = models.ParamVector(np.zeros(models.num_params(model)), models.layout_of(model))
    ds = LabeledDataset(np.ones((4, 2)), np.array([0, 0, 1, 2]), num_classes=3)
    # all-zero weights -> all logits tie -> argmax picks class 0
    assert models.evaluate(model, pv, ds) == pytest.approx(0.5)


def test_train_plain_reduces_loss(toy_batch):
    model = models.MLP(9, 5, 3)
    pv0 = models.sample_init(models.RandomXavier(4), model, 0)
    before = float(models.loss(model, pv0, toy_batch, CrossEntropy()).value)
    trained = models.train_plain(model, pv0, toy_batch, lr=0.5, epochs=30, batch_size=6, seed=0)
    after = float(models.loss(model, trained, toy_batch, CrossEntropy()).value)
    assert after < before * 0.5
    # input untouched
    np.testing.assert_array_equal(
        pv0.flat, models.sample_init(models.RandomXavier(4), model, 0).flat
    )


def test_pool_round_trip(tmp_path):
    model = models.MLP(9, 5, 3)
    pool = [models.sample_init(models.RandomXavier(5), model, i) for i in range(3)]
    path = tmp_path / "pool.ddpv"
    models.save_pool(path, pool)
    assert path.read_bytes()[:4] == b"DDPV"
    loaded = models.load_pool(path, model)
    assert len(loaded.members) == 3
    for a, b in zip(pool, loaded.members):
        np.testing.assert_array_equal(a.flat, b.flat)


def test_pool_layout_mismatch(tmp_path):
    model = models.MLP(9, 5, 3)
    models.save_pool(tmp_path / "pool.ddpv", [models.sample_init(models.RandomXavier(5), model, 0)])
    with pytest.raises(LayoutMismatchError):
        models.load_pool(tmp_path / "pool.ddpv", models.MLP(9, 6, 3))


def test_pretrained_pool_wraps_around():
    model = models.MLP(9, 5, 3)
    members = [models.sample_init(models.RandomXavier(6), model, i) for i in range(3)]
    spec = models.PretrainedPool(members)
    a = models.sample_init(spec, model, 1)
    b = models.sample_init(spec, model, 4)
    np.testing.assert_array_equal(a.flat, b.flat)
    np.testing.assert_array_equal(a.flat, members[1].flat)
