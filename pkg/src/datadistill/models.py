"""Differentiable models, initialization distributions, and plain training.

A model is described by a spec dataclass carrying its dimensions; weights
live in a :class:`ParamVector` (flat float64 vector + per-layer layout).
Forward passes come in two flavors: a graph-building one over autodiff
nodes (used by the meta-optimizer) and a plain numpy one (used for cheap
evaluation); the two share the same arithmetic and agree exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import LayoutMismatchError, NumericError, ShapeError


# ---------------------------------------------------------------------------
# parameter container
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """All weights of a model, flattened, plus per-layer layout records."""

    flat: np.ndarray
    layout: List[Tuple[int, Tuple[int, ...]]]  # (offset, shape), fixed order

    def views(self) -> List[np.ndarray]:
        out = []
        for off, shape in self.layout:
            n = int(np.prod(shape))
            out.append(self.flat[off : off + n].reshape(shape))
        return out

    def to_nodes(self) -> List[Node]:
        return [ad.leaf(v.copy()) for v in self.views()]

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), list(self.layout))

    @staticmethod
    def from_arrays(arrays: Sequence[np.ndarray]) -> "ParamVector":
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])
        layout = []
        off = 0
        for a in arrays:
            layout.append((off, tuple(np.shape(a))))
            off += int(np.prod(np.shape(a)))
        return ParamVector(flat, layout)


def params_from_nodes(nodes: Sequence[Node]) -> ParamVector:
    return ParamVector.from_arrays([n.value for n in nodes])


# ---------------------------------------------------------------------------
# model specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearRegressor:
    """y = x @ theta with quadratic loss 1/(2N) ||x theta - t||^2."""

    in_dim: int

    def param_shapes(self):
        return [(self.in_dim, 1)]

    @property
    def num_classes(self):
        return None


@dataclass(frozen=True)
class SoftmaxLinear:
    in_dim: int
    num_classes: int

    def param_shapes(self):
        return [(self.in_dim, self.num_classes), (self.num_classes,)]


@dataclass(frozen=True)
class MLP:
    in_dim: int
    hidden: int
    num_classes: int

    def param_shapes(self):
        return [
            (self.in_dim, self.hidden),
            (self.hidden,),
            (self.hidden, self.num_classes),
            (self.num_classes,),
        ]


@dataclass(frozen=True)
class ConvNet:
    """Small two-conv network on square single-channel images.

    conv(5x5, pad 2) -> relu -> 2x2 mean-pool -> conv(5x5, pad 2) -> relu
    -> 2x2 mean-pool -> linear.  Mean pooling keeps the whole model twice
    differentiable.  LeNet-scale dimensions are a config choice, not the
    default (CPU budget).
    """

    side: int
    channels1: int = 8
    channels2: int = 16
    kernel: int = 5
    num_classes: int = 10

    def param_shapes(self):
        s1 = self.side // 2
        s2 = s1 // 2
        feat = self.channels2 * s2 * s2
        return [
            (self.channels1, 1, self.kernel, self.kernel),
            (self.channels1,),
            (self.channels2, self.channels1, self.kernel, self.kernel),
            (self.channels2,),
            (feat, self.num_classes),
            (self.num_classes,),
        ]


ModelSpec = (LinearRegressor, SoftmaxLinear, MLP, ConvNet)


def num_params(model) -> int:
    return sum(int(np.prod(s)) for s in model.param_shapes())


def layout_of(model) -> List[Tuple[int, Tuple[int, ...]]]:
    layout = []
    off = 0
    for s in model.param_shapes():
        layout.append((off, tuple(s)))
        off += int(np.prod(s))
    return layout


# ---------------------------------------------------------------------------
# initialization distributions p(theta_0)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedSeed:
    seed: int


@dataclass(frozen=True)
class RandomXavier:
    base_seed: int = 0


@dataclass(frozen=True)
class RandomHe:
    base_seed: int = 0


@dataclass
class PretrainedPool:
    members: List[ParamVector]

    def __post_init__(self):
        if not self.members:
            raise ValueError("PretrainedPool must be non-empty")


def _fans(shape) -> Tuple[int, int]:
    if len(shape) == 1:  # bias
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv weight (out_ch, in_ch, k, k)
    rf = int(np.prod(shape[2:]))
    return shape[1] * rf, shape[0] * rf


def _draw(model, rng, kind: str) -> ParamVector:
    arrays = []
    for shape in model.param_shapes():
        if len(shape) == 1:
            arrays.append(np.zeros(shape))  # biases start at zero
            continue
        fan_in, fan_out = _fans(shape)
        if kind == "xavier":
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays.append(rng.uniform(-bound, bound, size=shape))
        else:
            arrays.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return ParamVector.from_arrays(arrays)


def sample_init(spec, model, index: int) -> ParamVector:
    """Draw theta_0 number ``index`` from the initialization distribution.

    Deterministic in (spec, index): a fixed seed ignores the index, the
    random regimes reseed from (base_seed, index), and a pool indexes
    cyclically.
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    if isinstance(spec, FixedSeed):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        return _draw(model, rng, "xavier")
    if isinstance(spec, RandomXavier):
        rng = np.random.default_rng(np.random.SeedSequence([spec.base_seed, index]))
        return _draw(model, rng, "xavier")
    if isinstance(spec, RandomHe):
        rng = np.random.default_rng(np.random.SeedSequence([spec.base_seed, index]))
        return _draw(model, rng, "he")
    if isinstance(spec, PretrainedPool):
        member = spec.members[index % len(spec.members)]
        return member.copy()
    raise TypeError(f"unknown init spec {spec!r}")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _conv_gather_indices(side: int, in_ch: int, kernel: int, pad: int) -> np.ndarray:
    """im2col gather indices into an input flattened as (C, H, W) + one
    trailing zero slot standing in for padding."""
    out = side  # stride 1, same padding
    n = in_ch * side * side
    idx = np.empty((out * out, in_ch * kernel * kernel), dtype=np.intp)
    col = 0
    for c in range(in_ch):
        for di in range(kernel):
            for dj in range(kernel):
                rows = np.arange(out)[:, None] + di - pad
                cols = np.arange(out)[None, :] + dj - pad
                flat = c * side * side + rows * side + cols
                oob = (rows < 0) | (rows >= side) | (cols < 0) | (cols >= side)
                flat = np.where(oob, n, flat)  # n == the zero slot
                idx[:, col] = flat.reshape(-1)
                col += 1
    return idx


def _pool_indices(side: int, ch: int) -> np.ndarray:
    """2x2 mean-pool gather indices over a (C, H, W) flattened input."""
    half = side // 2
    out = np.empty((ch * half * half, 4), dtype=np.intp)
    k = 0
    for c in range(ch):
        for i in range(half):
            for j in range(half):
                base = c * side * side + 2 * i * side + 2 * j
                out[k] = (base, base + 1, base + side, base + side + 1)
                k += 1
    return out


_CONV_IDX_CACHE: dict = {}


def _conv_forward(model: ConvNet, params: List[Node], x: Node) -> Node:
    b = x.shape[0]
    key = (model.side, model.channels1, model.channels2, model.kernel)
    if key not in _CONV_IDX_CACHE:
        pad = model.kernel // 2
        s1 = model.side // 2
        _CONV_IDX_CACHE[key] = (
            _conv_gather_indices(model.side, 1, model.kernel, pad),
            _pool_indices(model.side, model.channels1),
            _conv_gather_indices(s1, model.channels1, model.kernel, pad),
            _pool_indices(s1, model.channels2),
        )
    idx1, pool1, idx2, pool2 = _CONV_IDX_CACHE[key]
    w1, b1, w2, b2, w3, b3 = params
    s, c1, c2, k = model.side, model.channels1, model.channels2, model.kernel
    s1 = s // 2
    s2 = s1 // 2

    def conv_layer(inp, idx, w, bias, in_size, out_ch, out_side):
        # inp: (B, in_size) with per-example zero slot appended via scatter
        n = inp.shape[1]
        grow = ad.scatter_add(inp, _grow_idx(b, n), b * (n + 1))
        grow = ad.reshape(grow, (b, n + 1))
        patches = ad.take(grow, _batch_idx(b, n + 1, idx))  # (B*out*out, in_ch*k*k)
        wmat = ad.reshape(w, (out_ch, idx.shape[1]))
        z = ad.matmul(patches, ad.transpose(wmat))  # (B*out*out, out_ch)
        z = ad.add(z, ad.reshape(bias, (1, out_ch)))
        # to (B, out_ch, out, out) flat: transpose channel to front per example
        z = ad.reshape(z, (b, out_side * out_side, out_ch))
        return z

    def to_chw(z, out_ch, out_side):
        # (B, HW, C) -> (B, C*H*W) via gather
        hw = out_side * out_side
        per = np.arange(hw * out_ch).reshape(hw, out_ch).T.reshape(-1)
        base = (np.arange(z.shape[0]) * hw * out_ch)[:, None] + per[None, :]
        return ad.reshape(ad.take(z, base), (z.shape[0], out_ch * hw))

    h = conv_layer(x, idx1, w1, b1, s * s, c1, s)
    h = ad.relu(to_chw(h, c1, s))
    h = _mean_pool(h, pool1, b)
    h = conv_layer(h, idx2, w2, b2, c1 * s1 * s1, c2, s1)
    h = ad.relu(to_chw(h, c2, s1))
    h = _mean_pool(h, pool2, b)
    return ad.add(ad.matmul(h, w3), ad.reshape(b3, (1, model.num_classes)))


_GROW_CACHE: dict = {}


def _grow_idx(b: int, n: int) -> np.ndarray:
    key = (b, n)
    if key not in _GROW_CACHE:
        _GROW_CACHE[key] = (np.arange(b)[:, None] * (n + 1) + np.arange(n)[None, :]).reshape(-1)
    return _GROW_CACHE[key]


_BATCH_IDX_CACHE: dict = {}


def _batch_idx(b: int, stride: int, idx: np.ndarray) -> np.ndarray:
    # idx arrays are themselves module-level cached, so id() is stable
    key = (b, stride, id(idx))
    if key not in _BATCH_IDX_CACHE:
        out = (np.arange(b)[:, None, None] * stride + idx[None, :, :]).reshape(
            b * idx.shape[0], idx.shape[1]
        )
        _BATCH_IDX_CACHE[key] = out
    return _BATCH_IDX_CACHE[key]


def _mean_pool(h: Node, pool: np.ndarray, b: int) -> Node:
    n = h.shape[1]
    gathered = ad.take(h, _batch_idx(b, n, pool))  # (B*outcells, 4)
    pooled = ad.mul(ad.sum_(gathered, axis=1), ad.const(0.25))
    return ad.reshape(pooled, (b, pool.shape[0]))


def forward(model, params: List[Node], x: Node) -> Node:
    """Graph-building forward pass: predictions/logits as a node."""
    if isinstance(model, LinearRegressor):
        (theta,) = params
        return ad.matmul(x, theta)
    if isinstance(model, SoftmaxLinear):
        w, bias = params
        return ad.add(ad.matmul(x, w), ad.reshape(bias, (1, model.num_classes)))
    if isinstance(model, MLP):
        w1, b1, w2, b2 = params
        h = ad.relu(ad.add(ad.matmul(x, w1), ad.reshape(b1, (1, model.hidden))))
        return ad.add(ad.matmul(h, w2), ad.reshape(b2, (1, model.num_classes)))
    if isinstance(model, ConvNet):
        return _conv_forward(model, params, x)
    raise TypeError(f"unknown model {model!r}")


def predict_np(model, params: ParamVector, X: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass (same arithmetic as the graph path)."""
    vs = params.views()
    if isinstance(model, LinearRegressor):
        return X @ vs[0]
    if isinstance(model, SoftmaxLinear):
        return X @ vs[0] + vs[1].reshape(1, -1)
    if isinstance(model, MLP):
        h = np.maximum(X @ vs[0] + vs[1].reshape(1, -1), 0.0)
        return h @ vs[2] + vs[3].reshape(1, -1)
    if isinstance(model, ConvNet):
        nodes = [ad.const(v) for v in vs]
        return forward(model, nodes, ad.const(X)).value
    raise TypeError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# loss / training / evaluation
# ---------------------------------------------------------------------------


def loss_node(model, params: List[Node], x: Node, targets, objective=None) -> Node:
    """Mean per-example loss as a differentiable scalar node.

    ``targets`` are integer labels for classifiers, a real (N, 1) array for
    the regressor (whose loss is 1/(2N) of the summed squared residual).
    """
    pred = forward(model, params, x)
    if isinstance(model, LinearRegressor):
        t = targets if isinstance(targets, Node) else ad.const(np.asarray(targets, dtype=np.float64).reshape(-1, 1))
        n = x.shape[0]
        return ad.mul(ad.sum_(ad.square(ad.sub(pred, t))), ad.const(0.5 / n))
    labels = np.asarray(targets)
    if objective is not None:
        labels = objective.transform_labels(labels)
    return ad.softmax_cross_entropy(pred, labels)


def loss(model, params: ParamVector, batch, objective=None) -> Node:
    """Loss of concrete weights on a labeled batch (graph form)."""
    if len(batch.labels) == 0:
        raise ShapeError("empty batch")
    if batch.inputs.shape[1] != expected_in_dim(model):
        raise ShapeError(
            f"input dim {batch.inputs.shape[1]} does not match model {model}"
        )
    nodes = params.to_nodes()
    return loss_node(model, nodes, ad.const(batch.inputs), batch.labels, objective)


def expected_in_dim(model) -> int:
    if isinstance(model, LinearRegressor):
        return model.in_dim
    if isinstance(model, SoftmaxLinear):
        return model.in_dim
    if isinstance(model, MLP):
        return model.in_dim
    if isinstance(model, ConvNet):
        return model.side * model.side
    raise TypeError(f"unknown model {model!r}")


def train_plain(model, init: ParamVector, dataset, lr: float, epochs: int,
                batch_size: int = 32, seed: int = 0, objective=None) -> ParamVector:
    """Minibatch SGD with a fixed learning rate and fixed shuffling seed."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    params = init.copy()
    rng = np.random.default_rng(seed)
    n = len(dataset.labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            nodes = params.to_nodes()
            lnode = loss_node(
                model, nodes, ad.const(dataset.inputs[sel]), dataset.labels[sel], objective
            )
            if not np.isfinite(lnode.value):
                raise NumericError("training diverged (non-finite loss)")
            gmap = ad.backward(lnode, nodes)
            for node, (off, shape) in zip(nodes, params.layout):
                size = int(np.prod(shape))
                params.flat[off : off + size] -= lr * gmap[node].value.reshape(-1)
    return params


def evaluate(model, params: ParamVector, dataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest index."""
    logits = predict_np(model, params, dataset.inputs)
    pred = np.argmax(logits, axis=1)  # argmax returns first max: lowest index wins
    return float(np.mean(pred == dataset.labels))


# ---------------------------------------------------------------------------
# pretrained pool persistence ("DDPV")
# ---------------------------------------------------------------------------

_POOL_MAGIC = b"DDPV"
_POOL_VERSION = 1


def save_pool(path, members: Sequence[ParamVector]) -> None:
    with open(path, "wb") as f:
        f.write(_POOL_MAGIC)
        f.write(struct.pack("<II", _POOL_VERSION, len(members)))
        for m in members:
            f.write(struct.pack("<Q", m.flat.size))
            f.write(m.flat.astype("<f8").tobytes())


def load_pool(path, model) -> PretrainedPool:
    layout = layout_of(model)
    total = num_params(model)
    members = []
    with open(path, "rb") as f:
        if f.read(4) != _POOL_MAGIC:
            raise LayoutMismatchError(f"{path}: not a DDPV pool file")
        version, count = struct.unpack("<II", f.read(8))
        if version != _POOL_VERSION:
            raise LayoutMismatchError(f"{path}: unsupported pool version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<Q", f.read(8))
            if n != total:
                raise LayoutMismatchError(
                    f"{path}: member has {n} params, model expects {total}"
                )
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise LayoutMismatchError(f"{path}: truncated pool file")
            members.append(ParamVector(np.frombuffer(buf, dtype="<f8").copy(), layout))
    return PretrainedPool(members)
