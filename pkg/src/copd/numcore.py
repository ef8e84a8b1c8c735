"""Dense/sparse float64 kernel with define-by-run reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects. When any operand requires
a gradient, the op records its parents and a closure that maps the upstream
gradient to per-parent contributions; :func:`backward` replays those closures
in reverse topological order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "InvalidShapeError", "InvalidArgumentError",
    "Tensor", "SparseMatrix", "AdamState",
    "tensor", "parameter", "xavier_init",
    "matmul", "sparse_dense_matmul", "add", "sub", "mul", "div", "neg", "scale",
    "concat_rows", "concat_cols", "slice_rows", "slice_cols", "take_rows", "take_along_rows",
    "transpose", "mean_stack", "relu", "tanh", "sigmoid", "log_sigmoid",
    "dropout", "log", "exp", "sum", "mean", "row_l2_norm", "clip",
    "logsumexp_rows", "stop_gradient", "backward", "zero_grad", "adam_step",
]


class InvalidShapeError(ValueError):
    pass


class InvalidArgumentError(ValueError):
    pass


_node_ids = itertools.count()


class Tensor:
    """A float64 array that may take part in a recorded computation."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad and not _parents else None
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.values.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    @property
    def T(self):
        return transpose(self)


def tensor(values, requires_grad=False):
    return Tensor(values, requires_grad=requires_grad)


def parameter(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(values)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise InvalidShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# Sparse matrices


class SparseMatrix:
    """Constant sparse matrix; ``(row, col)`` pairs are unique, weights finite."""

    def __init__(self, rows, cols, entries):
        entries = list(entries)
        if entries:
            r, c, w = (np.asarray(a) for a in zip(*entries))
        else:
            r = c = np.zeros(0, dtype=np.int64)
            w = np.zeros(0)
        self._init_arrays(int(rows), int(cols), r, c, w)

    @classmethod
    def from_arrays(cls, rows, cols, row_idx, col_idx, weights):
        obj = cls.__new__(cls)
        obj._init_arrays(int(rows), int(cols), np.asarray(row_idx), np.asarray(col_idx),
                         np.asarray(weights))
        return obj

    def _init_arrays(self, rows, cols, r, c, w):
        r = r.astype(np.int64)
        c = c.astype(np.int64)
        w = w.astype(np.float64)
        if len(r) and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise InvalidArgumentError("sparse entry out of bounds")
        if not np.all(np.isfinite(w)):
            raise InvalidArgumentError("sparse weights must be finite")
        if len(np.unique(r * cols + c)) != len(r):
            raise InvalidArgumentError("duplicate (row, col) entry")
        self.rows = rows
        self.cols = cols
        self.csr = sp.csr_matrix((w, (r, c)), shape=(rows, cols))
        self.csr.sort_indices()

    @property
    def nnz(self):
        return self.csr.nnz

    def entries(self):
        coo = self.csr.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def transpose(self):
        coo = self.csr.tocoo()
        return SparseMatrix.from_arrays(self.cols, self.rows, coo.col, coo.row, coo.data)

    def to_dense(self):
        return self.csr.toarray()

    def __getitem__(self, key):
        return float(self.csr[key])


# ---------------------------------------------------------------------------
# Initialization


def xavier_init(shape, seed):
    """Uniform Xavier samples in ``[-b, b]`` with ``b = sqrt(6 / (fan_in + fan_out))``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise InvalidShapeError(f"xavier_init needs a 2-d shape, got {shape}")
    if min(shape) <= 0:
        raise InvalidShapeError(f"zero-sized dimension in {shape}")
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(np.uint64(seed))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# Recorded ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), bw)


def sparse_dense_matmul(s, d):
    d = _as_tensor(d)
    if d.values.ndim != 2 or s.cols != d.shape[0]:
        raise InvalidShapeError(f"sparse {s.rows}x{s.cols} @ dense {d.shape}")
    csr = s.csr

    def bw(g):
        return (np.asarray(csr.T @ g),)

    return _make(np.asarray(csr @ d.values), (d,), bw)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.shape[1:] for t in tensors}) != 1:
        raise InvalidShapeError("concat_rows needs equal trailing shapes")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _make(np.concatenate([t.values for t in tensors], axis=0), tensors,
                 lambda g: tuple(np.split(g, splits, axis=0)))


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if any(t.values.ndim != 2 for t in tensors) or len({t.shape[0] for t in tensors}) != 1:
        raise InvalidShapeError("concat_cols needs 2-d tensors with equal row counts")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _make(np.concatenate([t.values for t in tensors], axis=1), tensors,
                 lambda g: tuple(np.split(g, splits, axis=1)))


def slice_rows(a, start, stop):
    a = _as_tensor(a)
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise InvalidShapeError(f"row slice [{start}:{stop}] out of range for {n} rows")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.values[start:stop], (a,), bw)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    if a.values.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise InvalidShapeError(f"column slice [{start}:{stop}] invalid for {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.values[:, start:stop], (a,), bw)


def take_rows(a, idx):
    """Gather rows ``a[idx]``; repeated indices accumulate in the backward pass."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise InvalidShapeError("row index out of range")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.values[idx], (a,), bw)


def take_along_rows(a, cols):
    """Pick one entry per row: ``out[r] = a[r, cols[r]]``."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    if a.values.ndim != 2 or cols.shape != (a.shape[0],):
        raise InvalidShapeError("take_along_rows needs one column index per row")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _make(a.values[rows, cols], (a,), bw)


def transpose(a):
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise InvalidShapeError("transpose needs a 2-d tensor")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


def mean_stack(tensors):
    """Elementwise mean of equally shaped tensors.

    Uses a running mean so that a stack of identical tensors returns that
    tensor exactly.
    """
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or len({t.shape for t in tensors}) != 1:
        raise InvalidShapeError("mean_stack needs one or more equally shaped tensors")
    out = tensors[0].values.copy()
    for k, t in enumerate(tensors[1:], start=2):
        out += (t.values - out) / k
    n = len(tensors)
    return _make(out, tensors, lambda g: tuple(g / n for _ in range(n)))


def relu(a):
    a = _as_tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """``ln sigma(x)`` computed as ``-log1p(exp(-x))`` without overflow."""
    a = _as_tensor(a)
    x = a.values
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),))


def dropout(a, rate, seed, training):
    """Inverted dropout; the identity when ``training`` is false."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _make(a.values.copy(), (a,), lambda g: (g,))
    rng = np.random.default_rng(np.uint64(seed))
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.values * mask, (a,), lambda g: (g * mask,))


def log(a):
    a = _as_tensor(a)
    x = a.values
    return _make(np.log(x), (a,), lambda g: (g / x,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.values.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def row_l2_norm(a):
    """Euclidean norm of each row, shape ``(n, 1)``."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise InvalidShapeError("row_l2_norm needs a 2-d tensor")
    x = a.values
    out = np.sqrt((x * x).sum(axis=1, keepdims=True))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * x / safe, 0.0),)

    return _make(out, (a,), bw)


def clip(a, lo=-np.inf, hi=np.inf):
    """Clamp to ``[lo, hi]``; gradient flows only strictly inside the range."""
    a = _as_tensor(a)
    x = a.values
    inside = (x > lo) & (x < hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def logsumexp_rows(a):
    """Row-wise ``log sum exp`` with max subtraction, shape ``(n, 1)``."""
    a = _as_tensor(a)
    x = a.values
    m = x.max(axis=1, keepdims=True)
    shifted = np.exp(x - m)
    total = shifted.sum(axis=1, keepdims=True)
    out = m + np.log(total)
    return _make(out, (a,), lambda g: (g * shifted / total,))


def stop_gradient(a):
    """Forward copy that contributes nothing to the gradient of its input."""
    a = _as_tensor(a)
    return Tensor(a.values.copy())


# ---------------------------------------------------------------------------
# Backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``."""
    if loss.values.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def zero_grad(params):
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.values)
        else:
            p.grad.fill(0.0)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(m=[np.zeros_like(p.values) for p in params],
                   v=[np.zeros_like(p.values) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place to ``params``."""
    if not len(params) == len(grads) == len(state.m):
        raise InvalidShapeError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise InvalidShapeError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params
