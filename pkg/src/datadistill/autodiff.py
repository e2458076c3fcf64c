"""Reverse-mode automatic differentiation on a dynamically built graph.

Values are 64-bit numpy arrays.  Every operation records a :class:`Node`
whose adjoint rule is itself expressed in terms of the same operations, so
gradients can be differentiated again (``create_graph=True``): this is what
lets the meta-optimizer backpropagate through unrolled gradient-descent
steps via Hessian-vector products instead of materializing Hessians.

Conventions:
  * relu uses subgradient 0 at the kink.
  * Adjoints are accumulated in a fixed topological, insertion order, so
    repeated runs on identical inputs are bit-identical.
  * Graph instances are single-threaded; nodes are immutable once built.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Tensor = np.ndarray  # dense float64 n-d array, row-major


class Node:
    """One vertex of the computation graph.

    ``value`` is the concrete float64 array, ``op`` the operation tag,
    ``parents`` the input nodes and ``ctx`` whatever the op's adjoint rule
    needs (axes, shapes, gather indices).
    """

    __slots__ = ("value", "op", "parents", "requires_grad", "ctx")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, ctx=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.ctx = ctx

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Node":
        return Node(self.value, op="leaf")

    # Operator sugar; the functional forms below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(_as_array(x))


def leaf(value, requires_grad=True) -> Node:
    """A graph input: gradients may be requested w.r.t. it."""
    return Node(_as_array(value), op="leaf", requires_grad=requires_grad)


def const(value) -> Node:
    """A constant: no gradient flows into it."""
    return Node(_as_array(value), op="leaf", requires_grad=False)


def _finite(a: np.ndarray) -> bool:
    # sum() is NaN or inf whenever any element is; cheaper than isfinite(a).all()
    return math.isfinite(float(np.sum(a)))


def _make(op, value, parents, ctx=None) -> Node:
    if not _finite(value):
        raise NumericError(f"non-finite result in op {op!r}")
    rg = False
    for p in parents:
        if p.requires_grad:
            rg = True
            break
    return Node(value, op=op, parents=parents, requires_grad=rg, ctx=ctx)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        v = a.value + b.value
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    return _make("add", v, (a, b))


def neg(a) -> Node:
    a = as_node(a)
    return _make("neg", -a.value, (a,))


def sub(a, b) -> Node:
    return add(a, neg(b))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        v = a.value * b.value
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    return _make("mul", v, (a, b))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        v = a.value / b.value
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e
    return _make("div", v, (a, b))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make("matmul", a.value @ b.value, (a, b))


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _make("transpose", np.ascontiguousarray(a.value.T), (a,))


def exp(a) -> Node:
    a = as_node(a)
    return _make("exp", np.exp(a.value), (a,))


def log(a) -> Node:
    a = as_node(a)
    return _make("log", np.log(a.value), (a,))


def relu(a) -> Node:
    a = as_node(a)
    return _make("relu", np.maximum(a.value, 0.0), (a,))


def softplus(a) -> Node:
    a = as_node(a)
    return _make("softplus", np.logaddexp(0.0, a.value), (a,))


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    v = np.sum(a.value, axis=axis, keepdims=keepdims)
    ctx = (axis, keepdims, a.shape)
    return _make("sum", np.asarray(v, dtype=np.float64), (a,), ctx=ctx)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), const(1.0 / float(n)))


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        v = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e
    return _make("reshape", v, (a,), ctx=a.shape)


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    try:
        v = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from e
    return _make("broadcast_to", v, (a,), ctx=a.shape)


def take(a, indices) -> Node:
    """Gather elements of the flattened input at ``indices`` (any shape).

    Linear in the input, so double-backward is exact: the adjoint is a
    scatter-add and the adjoint of that is this gather again.
    """
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    v = a.value.reshape(-1)[idx]
    return _make("take", v, (a,), ctx=(idx, a.shape))


def scatter_add(a, indices, size) -> Node:
    """Sum elements of ``a`` into a zero vector of length ``size``."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.zeros(size, dtype=np.float64)
    np.add.at(out, idx.reshape(-1), a.value.reshape(-1))
    return _make("scatter_add", out, (a,), ctx=(idx, a.shape))


def square(a) -> Node:
    a = as_node(a)
    return mul(a, a)


def mse(pred, target) -> Node:
    """Mean over all elements of squared error."""
    return mean(square(sub(pred, target)))


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean cross-entropy of row-wise softmax(logits) against integer labels.

    Numerically stabilized with a detached row-max shift; twice
    differentiable since it is composed of the primitive ops above.
    """
    z = as_node(logits)
    if z.value.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, C) logits, got {z.shape}")
    y = np.asarray(labels)
    b, c = z.shape
    if y.shape != (b,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {b}")
    shift = const(z.value.max(axis=1, keepdims=True))
    s = sub(z, shift)
    lse = add(log(sum_(exp(s), axis=1, keepdims=True)), shift)  # (B, 1)
    onehot = np.zeros((b, c))
    onehot[np.arange(b), y] = 1.0
    picked = sum_(mul(z, const(onehot)), axis=1, keepdims=True)
    return mean(sub(lse, picked))


_OPS: Mapping[str, Callable] = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "div": div,
    "scale": mul,
    "matmul": matmul,
    "transpose": transpose,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softplus": softplus,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "take": take,
    "scatter_add": scatter_add,
    "mean_squared_error": mse,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(op: str, *inputs, **attrs) -> Node:
    """Apply a registered operation by tag, recording the graph node."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ContractError(f"unknown op tag {op!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# adjoint rules — each expressed with the ops above so that the adjoint
# computation is itself differentiable
# ---------------------------------------------------------------------------


def _unbroadcast(g: Node, shape) -> Node:
    """Reduce g (a broadcast result's adjoint) back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    kept = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if kept:
        g = sum_(g, axis=kept, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


def _vjp_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_neg(g, out, a):
    return (neg(g),)


def _vjp_mul(g, out, a, b):
    return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)


def _vjp_div(g, out, a, b):
    ga = _unbroadcast(div(g, b), a.shape)
    gb = _unbroadcast(neg(div(mul(g, out), b)), b.shape)
    return ga, gb


def _vjp_matmul(g, out, a, b):
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_transpose(g, out, a):
    return (transpose(g),)


def _vjp_exp(g, out, a):
    return (mul(g, out),)


def _vjp_log(g, out, a):
    return (div(g, a),)


def _vjp_relu(g, out, a):
    mask = (a.value > 0.0).astype(np.float64)  # subgradient 0 at the kink
    return (mul(g, const(mask)),)


def _vjp_softplus(g, out, a):
    sigma = exp(neg(softplus(neg(a))))  # stable sigmoid
    return (mul(g, sigma),)


def _vjp_sum(g, out, a):
    axis, keepdims, in_shape = out.ctx
    if axis is not None and not keepdims:
        kept = list(in_shape)
        for ax in axis if isinstance(axis, tuple) else (axis,):
            kept[ax] = 1
        g = reshape(g, tuple(kept))
    return (broadcast_to(g, in_shape),)


def _vjp_reshape(g, out, a):
    return (reshape(g, out.ctx),)


def _vjp_broadcast_to(g, out, a):
    return (_unbroadcast(g, out.ctx),)


def _vjp_take(g, out, a):
    idx, in_shape = out.ctx
    size = int(np.prod(in_shape))
    return (reshape(scatter_add(g, idx, size), in_shape),)


def _vjp_scatter_add(g, out, a):
    idx, in_shape = out.ctx
    return (reshape(take(g, idx.reshape(-1)), in_shape),)


_VJP = {
    "add": _vjp_add,
    "neg": _vjp_neg,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "relu": _vjp_relu,
    "softplus": _vjp_softplus,
    "sum": _vjp_sum,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
    "take": _vjp_take,
    "scatter_add": _vjp_scatter_add,
}


def _topo_order(root: Node) -> list:
    """Iterative post-order over grad-requiring ancestors of ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen or not node.requires_grad:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Node, wrt: Sequence[Node], create_graph: bool = False) -> dict:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. ``wrt`` nodes.

    Returns ``{node: grad_node}``.  With ``create_graph`` the returned
    gradients stay attached to the graph and can be differentiated again;
    otherwise they are detached constants.  A ``wrt`` node that is not an
    ancestor of ``output`` gets a zero gradient (documented behavior, not
    an error).
    """
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict = {}
    if output.requires_grad:
        order = _topo_order(output)
        grads[id(output)] = const(np.ones_like(output.value))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None:
                continue
            if node.op == "leaf":
                continue
            try:
                rule = _VJP[node.op]
            except KeyError:
                raise ContractError(f"no adjoint rule for op {node.op!r}") from None
            parent_grads = rule(g, node, *node.parents)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = {}
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = const(np.zeros_like(w.value))
        out[w] = g if create_graph else g.detach()
    return out


def grad(output: Node, wrt: Sequence[Node]) -> list:
    """Convenience: gradients as plain arrays, in ``wrt`` order."""
    gmap = backward(output, wrt)
    return [gmap[w].value for w in wrt]


def hvp(loss_fn: Callable[[Node], Node], theta, v) -> Tensor:
    """Hessian-vector product H·v of ``loss_fn`` at ``theta``.

    ``theta`` is a flat float64 vector (or anything exposing ``.flat`` as
    one); ``loss_fn`` maps a 1-D leaf node to a scalar node.  Computed as
    the gradient of <grad(loss), v>, so the Hessian is never materialized.
    """
    flat = theta if isinstance(theta, np.ndarray) else theta.flat
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    vv = np.asarray(v, dtype=np.float64).reshape(-1)
    if vv.shape != flat.shape:
        raise ShapeError(f"hvp: v has length {vv.size}, theta has {flat.size}")
    t = leaf(flat)
    first = backward(loss_fn(t), [t], create_graph=True)[t]
    inner = sum_(mul(first, const(vv)))
    return backward(inner, [t])[t].value
