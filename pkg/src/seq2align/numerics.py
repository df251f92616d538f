"""Double-precision tensors with reverse-mode gradients.

Forward ops are pure functions of their operands' ndarray data; each op
records a closure for the backward sweep unless gradient tracking is
disabled via :func:`no_grad`.  :func:`backward` topologically sorts the
graph under a scalar loss and accumulates gradients into every reachable
:class:`Parameter`.

All data is float64.  Shapes follow a batch-first layout: activations are
``[batch, features]`` and stacked sequences are ``[time, batch, features]``.
Forward evaluation over immutable parameters is safe for concurrent readers;
the ``no_grad`` switch itself is process-wide, not per-thread.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; message carries both."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A node in the computation graph: float64 data plus backward plumbing."""

    __slots__ = ("data", "grad", "_parents", "_grad_fn")

    def __init__(self, data, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _grad_enabled:
            self._parents = parents
            self._grad_fn = grad_fn
        else:
            self._parents = ()
            self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return "Tensor(shape=%s)" % (self.shape,)


class Parameter(Tensor):
    """A named leaf tensor whose gradient persists across backward calls."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("parameter %r has non-finite values" % name)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return "Parameter(%r, shape=%s)" % (self.name, self.shape)


def constant(data) -> Tensor:
    """Wrap raw data as a leaf tensor that never receives gradients."""
    return Tensor(data)


def _node(data, parents, grad_fn) -> Tensor:
    if _grad_enabled:
        return Tensor(data, parents, grad_fn)
    return Tensor(data)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("%s: operand shapes %s and %s differ" % (op, a.data.shape, b.data.shape))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no gradient for the scalar)."""
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def add_n(terms: list[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if not terms:
        raise ValueError("add_n needs at least one term")
    for t in terms[1:]:
        _check_same_shape("add_n", terms[0], t)
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data
    return _node(out, tuple(terms), lambda g: tuple(g for _ in terms))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul: cannot multiply %s by %s" % (a.data.shape, b.data.shape))
    out = a.data @ b.data
    return _node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x [B,I] times w [H,I] transposed -> [B,H]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch("linear: input %s incompatible with weight %s" % (x.data.shape, w.data.shape))
    out = x.data @ w.data.T
    return _node(out, (x, w), lambda g: (g @ w.data, g.T @ x.data))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x [B,V] plus bias b [V] broadcast over rows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("bias_add: input %s incompatible with bias %s" % (x.data.shape, b.data.shape))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (shift by the max)."""
    if a.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    return _node(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _node(out, (a,), lambda g: (g.reshape(orig),))


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat needs at least one part")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts: list[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not parts:
        raise ValueError("stack needs at least one part")
    for p in parts[1:]:
        _check_same_shape("stack", parts[0], p)
    out = np.stack([p.data for p in parts], axis=0)
    return _node(out, tuple(parts), lambda g: tuple(g[i] for i in range(len(parts))))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table [V,E] indexed by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding ids out of range [0, %d)" % table.data.shape[0])
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), grad_fn)


# ---------------------------------------------------------------------------
# fused recurrent-model ops (hand-derived backward passes)


def mask_mix(a: Tensor, b: Tensor, keep: np.ndarray) -> Tensor:
    """Per-row blend: keep[i] * a[i] + (1 - keep[i]) * b[i]; keep is constant."""
    _check_same_shape("mask_mix", a, b)
    m = np.asarray(keep, dtype=np.float64).reshape(-1, 1)
    out = m * a.data + (1.0 - m) * b.data
    return _node(out, (a, b), lambda g: (g * m, g * (1.0 - m)))


def gru_combine(a_update: Tensor, a_reset: Tensor, a_rec: Tensor, a_in: Tensor, h_prev: Tensor) -> Tensor:
    """Gate arithmetic of one GRU step, given the four pre-activations.

    update z = sigmoid(a_update); reset r = sigmoid(a_reset);
    candidate = tanh(r * a_rec + a_in); out = (1 - z) * candidate + z * h_prev.
    """
    for other in (a_reset, a_rec, a_in, h_prev):
        _check_same_shape("gru_combine", a_update, other)
    z = _sigmoid_stable(a_update.data)
    r = _sigmoid_stable(a_reset.data)
    cand = np.tanh(r * a_rec.data + a_in.data)
    out = (1.0 - z) * cand + z * h_prev.data

    def grad_fn(g):
        dz = g * (h_prev.data - cand)
        d_update = dz * z * (1.0 - z)
        dpre = g * (1.0 - z) * (1.0 - cand * cand)
        dr = dpre * a_rec.data
        d_reset = dr * r * (1.0 - r)
        return (d_update, d_reset, dpre * r, dpre, g * z)

    return _node(out, (a_update, a_reset, a_rec, a_in, h_prev), grad_fn)


def attention_scores(keys: Tensor, query: Tensor, score_v: Tensor) -> Tensor:
    """Additive attention energies: keys [L,B,A], query [B,A], score_v [A] -> [B,L]."""
    if keys.data.ndim != 3 or query.data.ndim != 2 or score_v.data.ndim != 1:
        raise ShapeMismatch(
            "attention_scores: keys %s, query %s, score vector %s"
            % (keys.data.shape, query.data.shape, score_v.data.shape)
        )
    if keys.data.shape[1:] != query.data.shape or keys.data.shape[2] != score_v.data.shape[0]:
        raise ShapeMismatch(
            "attention_scores: keys %s, query %s, score vector %s"
            % (keys.data.shape, query.data.shape, score_v.data.shape)
        )
    act = np.tanh(keys.data + query.data[None, :, :])  # [L,B,A]
    out = (act @ score_v.data).T  # [B,L]

    def grad_fn(g):
        gt = g.T[:, :, None]  # [L,B,1]
        dact = gt * score_v.data * (1.0 - act * act)
        dv = (act * gt).sum(axis=(0, 1))
        return (dact, dact.sum(axis=0), dv)

    return _node(out, (keys, query, score_v), grad_fn)


def attention_context(weights: Tensor, states: Tensor) -> Tensor:
    """Convex mix of per-position states: weights [B,L], states [L,B,D] -> [B,D]."""
    if (
        weights.data.ndim != 2
        or states.data.ndim != 3
        or weights.data.shape[0] != states.data.shape[1]
        or weights.data.shape[1] != states.data.shape[0]
    ):
        raise ShapeMismatch(
            "attention_context: weights %s, states %s" % (weights.data.shape, states.data.shape)
        )
    out = np.einsum("bl,lbd->bd", weights.data, states.data)

    def grad_fn(g):
        dw = np.einsum("bd,lbd->bl", g, states.data)
        ds = weights.data.T[:, :, None] * g[None, :, :]
        return (dw, ds)

    return _node(out, (weights, states), grad_fn)


def masked_nll(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum over rows of mask * negative log softmax probability of the label.

    logits [B,V]; labels int [B]; mask float [B].  Returns a scalar tensor;
    divide by the unmasked count outside to get a mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],) or mask.shape != labels.shape:
        raise ShapeMismatch(
            "masked_nll: logits %s, labels %s, mask %s" % (logits.data.shape, labels.shape, mask.shape)
        )
    rows = np.arange(logits.data.shape[0])
    m = logits.data.max(axis=1, keepdims=True)
    log_z = m + np.log(np.exp(logits.data - m).sum(axis=1, keepdims=True))
    log_probs = logits.data - log_z
    out = -(log_probs[rows, labels] * mask).sum()

    def grad_fn(g):
        dlogits = np.exp(log_probs)
        dlogits[rows, labels] -= 1.0
        dlogits *= (mask * float(g))[:, None]
        return (dlogits,)

    return _node(out, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into every reachable node's .grad.

    Plain tensors get fresh gradient buffers; Parameter gradients accumulate
    across calls until zero_grad.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss, got shape %s" % (loss.data.shape,))

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))

    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None

    def accumulate(node: Tensor, g) -> None:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g

    accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._grad_fn(node.grad)):
            if g is not None:
                accumulate(parent, g)
