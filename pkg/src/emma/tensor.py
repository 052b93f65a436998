"""Dense tensors with tape-based reverse-mode differentiation.

Ops are plain functions. Each op that touches a ``requires_grad`` input returns
a tensor remembering its parents and a closure mapping the output gradient to
one gradient per parent. :func:`backward` linearises that graph into a
:class:`Tape` (topological order), replays it in reverse, and drops it.

Shapes follow a "rows of tokens" convention: the last axis is features, the
second-to-last is tokens/rows, and any leading axes are batch. Apart from
adding a parameter whose shape matches the trailing axes (:func:`add_bias`)
there is no broadcasting; weight sharing over the batch is spelled out by the
dedicated ops :func:`linear` and :func:`token_mix`.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype, order="C")
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _check_nonempty(x, op):
    if x.data.size == 0:
        raise DimensionError(f"{op}: empty tensor")


# ---------------------------------------------------------------- elementwise


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x, c):
    """Multiply by a Python constant."""
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def scale_by(x, s):
    """Multiply every entry of ``x`` by the single-element tensor ``s``."""
    if s.data.size != 1:
        raise DimensionError(f"scale_by: factor must have one element, got shape {list(s.shape)}")
    xd, sv = x.data, s.data.reshape(())
    return _make(xd * sv, (x, s), lambda g: (g * sv, np.sum(g * xd).reshape(s.shape)), "scale_by")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def relu(x):
    _check_nonempty(x, "relu")
    mask = x.data > 0
    return _make(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def add_bias(x, b):
    """``x + b`` where ``b.shape`` equals the trailing axes of ``x``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: bias {list(b.shape)} does not match trailing axes of {list(x.shape)}")
    lead = tuple(range(x.ndim - b.ndim))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g), "add_bias")


# ------------------------------------------------------------------ matrices


def transpose(x):
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {list(x.shape)}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def matmul(a, b):
    """Matrix product over the last two axes; leading (batch) axes must be equal."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w (+ b)`` with ``w`` of shape [p, q] shared over every leading axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {list(x.shape)} incompatible with weight {list(w.shape)}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        return gx, gw

    out = _make(xd @ wd, (x, w), backward, "linear")
    return out if b is None else add_bias(out, b)


def token_mix(x, w):
    """Mix tokens: ``out[..., j, :] = sum_k w[k, j] * x[..., k, :]``.

    ``w`` has shape [K, J] and is shared across the feature axis and all
    leading axes of ``x`` (shape [..., K, D]).
    """
    if w.ndim != 2 or x.ndim < 2 or x.shape[-2] != w.shape[0]:
        raise DimensionError(f"token_mix: tokens {list(x.shape)} incompatible with mixing matrix {list(w.shape)}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = wd @ g
        k, dim = xd.shape[-2:]
        gw = np.einsum("bkd,bjd->kj", xd.reshape(-1, k, dim), g.reshape(-1, g.shape[-2], dim))
        return gx, gw.astype(wd.dtype, copy=False)

    return _make(wd.T @ xd, (x, w), backward, "token_mix")


def concat_tokens(a, b):
    """Stack the rows of ``b`` after the rows of ``a`` (axis -2)."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_tokens: cannot join {list(a.shape)} and {list(b.shape)}")
    n = a.shape[-2]
    return _make(
        np.concatenate([a.data, b.data], axis=-2),
        (a, b),
        lambda g: (g[..., :n, :], g[..., n:, :]),
        "concat_tokens",
    )


def concat_features(a, b):
    """Join along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_features: cannot join {list(a.shape)} and {list(b.shape)}")
    p = a.shape[-1]
    return _make(
        np.concatenate([a.data, b.data], axis=-1), (a, b), lambda g: (g[..., :p], g[..., p:]), "concat_features"
    )


def embedding(table, ids):
    """Rows of ``table`` ([V, D]) gathered at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be [V, D], got {list(table.shape)}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids must lie in [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding")


def squeeze_batch(x):
    """Drop a leading batch axis of extent 1."""
    if x.ndim < 2 or x.shape[0] != 1:
        raise DimensionError(f"squeeze_batch needs a leading axis of extent 1, got {list(x.shape)}")
    shape = x.shape
    return _make(x.data[0], (x,), lambda g: (g.reshape(shape),), "squeeze_batch")


# -------------------------------------------------------------- reductions


def sum(x):
    _check_nonempty(x, "sum")
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x):
    _check_nonempty(x, "mean")
    shape, size = x.shape, x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / size, dtype=x.dtype),), "mean"
    )


def mean_pool_rows(x, mask=None):
    """Average over the token axis, one pooled row per token block.

    A [T, D] input gives [1, D]; a [B, T, D] input gives [B, D]. ``mask`` (same
    shape as ``x`` minus the feature axis) restricts the average to nonzero
    positions; an all-zero mask pools to zeros.
    """
    _check_nonempty(x, "mean_pool_rows")
    if x.ndim < 2:
        raise DimensionError(f"mean_pool_rows needs rank >= 2, got {list(x.shape)}")
    shape = x.shape
    if mask is None:
        weights = np.full(shape[:-1], 1.0 / shape[-2], dtype=x.dtype)
    else:
        mask = np.asarray(mask, dtype=x.dtype)
        if mask.shape != shape[:-1]:
            raise DimensionError(f"mean_pool_rows: mask {list(mask.shape)} does not match {list(shape[:-1])}")
        weights = mask / np.maximum(mask.sum(axis=-1, keepdims=True), 1)
    out = np.einsum("...t,...td->...d", weights, x.data).reshape(-1, shape[-1])

    def backward(g):
        g = g.reshape(shape[:-2] + (shape[-1],))
        return (weights[..., :, None] * g[..., None, :],)

    return _make(out.astype(x.dtype, copy=False), (x,), backward, "mean_pool_rows")


# ----------------------------------------------------- normalisations, softmax


def softmax_rows(x, mask=None):
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries receive
    exactly zero weight. A row with no allowed entry becomes all zeros.
    """
    _check_nonempty(x, "softmax_rows")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    p = (e / np.where(denom > 0, denom, 1)).astype(x.dtype, copy=False)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax_rows")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise each row over the last axis, then apply the optional affine map."""
    _check_nonempty(x, "layer_norm")
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs feature extent >= 2, got {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = (xc * inv).astype(x.dtype, copy=False)

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), backward, "layer_norm")
    if gamma is not None:
        out = mul_row(out, gamma)
    if beta is not None:
        out = add_bias(out, beta)
    return out


def mul_row(x, w):
    """Scale each feature channel: ``x * w`` with ``w`` of shape [D]."""
    if w.shape != x.shape[-1:]:
        raise DimensionError(f"mul_row: scale {list(w.shape)} does not match features of {list(x.shape)}")
    xd, wd = x.data, w.data
    lead = tuple(range(x.ndim - 1))
    return _make(xd * wd, (x, w), lambda g: (g * wd, (g * xd).sum(axis=lead)), "mul_row")


def l2_normalize(x, eps=1e-12):
    """Scale each row over the last axis to unit Euclidean norm."""
    _check_nonempty(x, "l2_normalize")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + x.dtype.type(eps))
    y = (xd / norm).astype(x.dtype, copy=False)

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class. ``logits`` is [B, C]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {list(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return ((grad * (g / b)).astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ------------------------------------------------------------------ the tape


@dataclass
class TapeRecord:
    op: str
    input_ids: tuple
    output_id: int
    backward: object = field(repr=False)


@dataclass
class Tape:
    """Topologically ordered record of the ops leading to a loss."""

    records: list
    leaves: list
    nodes: list

    @classmethod
    def from_loss(cls, loss):
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        for i, node in enumerate(order):
            node.node_id = i
        records, leaves = [], []
        for node in order:
            if node.is_leaf:
                leaves.append(node)
            else:
                ids = tuple(p.node_id if p.requires_grad else None for p in node._parents)
                records.append(TapeRecord(node.op, ids, node.node_id, node._backward))
        return cls(records, leaves, order)

    def replay(self, seed_grad):
        nodes = self.nodes
        grads = {self.records[-1].output_id if self.records else nodes[-1].node_id: seed_grad}
        for rec in reversed(self.records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            for pid, pg in zip(rec.input_ids, rec.backward(g)):
                if pid is None or pg is None:
                    continue
                pg = np.asarray(pg)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        for leaf in self.leaves:
            g = grads.get(leaf.node_id)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")
    tape = Tape.from_loss(loss)
    tape.replay(np.ones(loss.shape, dtype=loss.dtype))
    for node in tape.nodes:
        node.node_id = None
