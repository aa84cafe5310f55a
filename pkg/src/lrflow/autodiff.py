"""Small define-by-run reverse-mode autodiff on float64 numpy arrays.

Ops are recorded onto the active :class:`Tape` (a thread-local context).
Outside of a tape, ops just compute values, which is what sampling uses.

    with Tape() as tape:
        loss = sum_sq(matmul(w, x))
    grads = tape.backward(loss)     # {w: dloss/dw}

Broadcasting is deliberately absent apart from scalar-with-tensor in
``add``/``sub``/``mul``; row-vector bias addition has its own op.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, op):
        # op outputs: validate once here, which also covers every op input
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")

    def detach(self):
        t = Tensor._wrap(self.data, "detach")
        return t

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return slice_(self, index)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "backward_fn", "leaf")

    def __init__(self, parents, backward_fn, leaf=None):
        self.parents = parents
        self.backward_fn = backward_fn
        self.leaf = leaf


class Tape:
    """Ordered record of ops; node ids are list positions, so parents < child."""

    def __init__(self):
        self.nodes = []
        self._leaf_ids = {}
        self._prev = None
        self.consumed = False

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def _node_of(self, t):
        if t._tape is self:
            return t.node_id
        if t.requires_grad:
            nid = self._leaf_ids.get(id(t))
            if nid is None:
                nid = len(self.nodes)
                self.nodes.append(_Node((), None, leaf=t))
                self._leaf_ids[id(t)] = nid
            return nid
        return None

    def record(self, out, inputs, backward_fn):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        parents = tuple(self._node_of(t) for t in inputs)
        if all(p is None for p in parents):
            return out
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(parents, backward_fn))
        return out

    def backward(self, loss):
        """Propagate adjoints from a scalar ``loss``; returns ``{leaf: grad}``.

        Leaves get ``.grad`` overwritten (not accumulated across calls).
        Leaves that never reached the loss are absent from the result.
        """
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("backward: loss was not recorded on this tape")
        adj = {loss.node_id: np.ones_like(loss.data)}
        out = {}
        for nid in range(loss.node_id, -1, -1):
            g = adj.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"backward: non-finite gradient for {node.leaf!r}")
                node.leaf.grad = g
                out[node.leaf] = g
                continue
            pgrads = node.backward_fn(g)
            for pid, pg in zip(node.parents, pgrads):
                if pid is None or pg is None:
                    continue
                if pid in adj:
                    adj[pid] = adj[pid] + pg
                else:
                    adj[pid] = pg
        self.nodes = []
        self._leaf_ids = {}
        self.consumed = True
        return out


def backward(loss):
    """Backward through the tape that recorded ``loss``."""
    if loss._tape is None:
        raise TapeError("backward: loss is not attached to any tape")
    return loss._tape.backward(loss)


def grads_for(params, grads):
    """Dense list of gradients aligned with ``params``; zeros where untouched."""
    return [grads[p] if p in grads else np.zeros_like(p.data) for p in params]


def _finish(op, arr, inputs, backward_fn):
    out = Tensor._wrap(arr, op)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _scalar_or_same(op, a, b):
    if a.shape == b.shape:
        return None
    if a.size == 1 and a.data.ndim <= b.data.ndim:
        return "a"
    if b.size == 1 and b.data.ndim <= a.data.ndim:
        return "b"
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unscalar(g, like):
    return np.sum(g).reshape(like.shape)


# ---------------------------------------------------------------- ops


def matmul(a, b):
    """``[m, k] @ [k, n] -> [m, n]``; 1-d right operand gives ``[m]``."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    A, B = a.data, b.data

    def bw(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _finish("matmul", A @ B, (a, b), bw)


def add(a, b):
    a, b = _lift(a), _lift(b)
    which = _scalar_or_same("add", a, b)

    def bw(g):
        ga = _unscalar(g, a) if which == "a" else g
        gb = _unscalar(g, b) if which == "b" else g
        return ga, gb

    return _finish("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    which = _scalar_or_same("sub", a, b)

    def bw(g):
        ga = _unscalar(g, a) if which == "a" else g
        gb = -_unscalar(g, b) if which == "b" else -g
        return ga, gb

    return _finish("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    """Elementwise product (or scalar tensor times tensor)."""
    a, b = _lift(a), _lift(b)
    which = _scalar_or_same("mul", a, b)
    A, B = a.data, b.data

    def bw(g):
        ga = g * B
        gb = g * A
        if which == "a":
            ga = _unscalar(ga, a)
        elif which == "b":
            gb = _unscalar(gb, b)
        return ga, gb

    return _finish("mul", A * B, (a, b), bw)


def scale(a, c):
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x, b):
    """``x[m, n] + b[n]`` row-wise."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} do not conform")
    return _finish("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def tanh(a):
    y = np.tanh(a.data)
    return _finish("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a):
    mask = a.data > 0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a):
    y = np.exp(a.data)
    return _finish("exp", y, (a,), lambda g: (g * y,))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient is zero where clamped."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _finish("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a):
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", y, (a,), bw)


def log_softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", y, (a,), bw)


def mean(a):
    n = a.data.size
    return _finish("mean", np.array(a.data.mean()), (a,),
                   lambda g: (np.full(a.shape, float(g) / n),))


def sum_(a):
    return _finish("sum", np.array(a.data.sum()), (a,),
                   lambda g: (np.full(a.shape, float(g)),))


def sum_sq(a):
    A = a.data
    return _finish("sum_sq", np.array(np.sum(A * A)), (a,), lambda g: (2.0 * float(g) * A,))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    arrs = [t.data for t in tensors]
    nd = arrs[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} do not conform")
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrs])

    def bw(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _finish("concat", np.concatenate(arrs, axis=ax), tensors, bw)


def slice_(a, index):
    """Basic (non-fancy) indexing; the gradient scatters back into zeros."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int, np.integer)):
            raise ShapeError(f"slice: only ints and slices are supported, got {type(ix).__name__}")
    try:
        y = a.data[index]
    except IndexError as e:
        raise ShapeError(f"slice: index {index} invalid for shape {a.shape}") from e

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _finish("slice", np.array(y), (a,), bw)


def reshape(a, shape):
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _finish("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def embed_lookup(table, ids):
    """Rows of ``table[V, e]`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids out of range for table {table.shape}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _finish("embed_lookup", table.data[ids], (table,), bw)


def cross_entropy(logits, targets, weights=None):
    """Sum over rows of ``-weights * log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(len(targets))
    nll = np.log(s[:, 0]) - z[rows, targets]

    def bw(g):
        p = e / s
        p[rows, targets] -= 1.0
        return (float(g) * w[:, None] * p,)

    return _finish("cross_entropy", np.array(np.sum(w * nll)), (logits,), bw)


FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "add_bias": add_bias,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "clip": clip,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "mean": mean,
    "sum": sum_,
    "sum_sq": sum_sq,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "embed_lookup": embed_lookup,
    "cross_entropy": cross_entropy,
}


def forward_op(op_kind, inputs, **kwargs):
    """Dispatch by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = FORWARD_OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def numeric_grad(f, arrays, h=1e-4):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            fp = f(*arrays)
            arr[i] = old - h
            fm = f(*arrays)
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-7, small=1e-3):
    """Elementwise relative check, absolute where the true value is tiny."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tiny = np.abs(numeric) < small
    ok = np.where(tiny, err <= atol, err <= rtol * np.abs(numeric))
    return bool(ok.all())
