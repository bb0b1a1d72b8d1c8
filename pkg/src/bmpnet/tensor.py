"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run engine: each operation computes its value eagerly and, when any
input requires gradients, records a closure that maps the output gradient back
to the inputs. ``backward`` walks the recorded graph once in reverse
topological order. Float64 gives finite-difference checks enough headroom;
training normally runs in float32 and the ops preserve the input dtype.

Blocking masks are plain boolean arrays carried next to the logits (True =
blocked), never float ``-inf`` sentinels, so ``exp`` can neither overflow nor
produce NaN and blocked outputs are bit-exact zeros.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's contract."""


_node_ids = itertools.count()


class Tensor:
    """Dense array plus a handle into the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.node_id = next(_node_ids)
        # Parents are only kept when gradients can flow; evaluation with
        # detached parameters therefore builds no graph at all.
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(node={self.node_id}, shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("subtract", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return Tensor(a.data - b.data, _parents=(a, b), _backward=backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("multiply", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward)


def scale(a, s):
    """Multiply by a python scalar without touching the array dtype."""
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return Tensor(a.data * s, _parents=(a,), _backward=backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=backward)


def batched_matvec(mats, vecs):
    """Per-row matrix-vector product: out[m] = mats[m] @ vecs[m]."""
    mats, vecs = _as_tensor(mats), _as_tensor(vecs)
    if (
        mats.data.ndim != 3
        or vecs.data.ndim != 2
        or mats.data.shape[0] != vecs.data.shape[0]
        or mats.data.shape[2] != vecs.data.shape[1]
    ):
        raise ShapeError(
            f"batched-matvec: shapes {mats.data.shape} and {vecs.data.shape} do not conform"
        )

    def backward(g):
        _accum(mats, np.einsum("mi,mj->mij", g, vecs.data))
        _accum(vecs, np.einsum("mij,mi->mj", mats.data, g))

    return Tensor(
        np.einsum("mij,mj->mi", mats.data, vecs.data), _parents=(mats, vecs), _backward=backward
    )


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d input, got shape {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return Tensor(np.ascontiguousarray(a.data.T), _parents=(a,), _backward=backward)


def reshape(a, shape):
    a = _as_tensor(a)
    orig = a.data.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=backward)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    offsets = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
            _accum(p, piece)

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  _parents=tuple(parts), _backward=backward)


def gather_rows(a, idx):
    """Select rows of a 2-d tensor; duplicate indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather-rows: shapes {a.data.shape} and {idx.shape} do not conform")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"gather-rows: index out of range for {a.data.shape[0]} rows")

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return Tensor(a.data[idx], _parents=(a,), _backward=backward)


def take_per_row(a, idx):
    """out[i] = a[i, idx[i]] for a 2-d tensor."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"take-per-row: shapes {a.data.shape} and {idx.shape} do not conform")
    rows = np.arange(a.data.shape[0])

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, idx), g)
        _accum(a, buf)

    return Tensor(a.data[rows, idx], _parents=(a,), _backward=backward)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return Tensor(out, _parents=(a,), _backward=backward)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return Tensor(out, _parents=(a,), _backward=backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return Tensor(np.log(a.data), _parents=(a,), _backward=backward)


def softplus(a):
    """log(1 + e^x), computed as logaddexp to avoid overflow."""
    a = _as_tensor(a)

    def backward(g):
        # sigmoid via tanh: stable on both tails
        _accum(a, g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return Tensor(np.logaddexp(0.0, a.data), _parents=(a,), _backward=backward)


def leaky_relu(a, slope=0.1):
    a = _as_tensor(a)
    slope = float(slope)

    def backward(g):
        _accum(a, g * np.where(a.data >= 0, 1.0, slope).astype(a.data.dtype))

    return Tensor(np.where(a.data >= 0, a.data, a.data * slope), _parents=(a,), _backward=backward)


def grouped_masked_softmax(logits, group_sizes, mask=None):
    """Softmax normalized separately inside contiguous groups of the last axis.

    ``mask`` is a boolean array of the logits' shape; True entries are blocked:
    they are excluded before normalization and output exactly 0. A group whose
    entries are all blocked outputs all zeros ("no message" limit) instead of
    NaN. The unmasked entries of each group sum to 1.
    """
    logits = _as_tensor(logits)
    x = logits.data
    group_sizes = tuple(int(n) for n in group_sizes)
    if sum(group_sizes) != x.shape[-1]:
        raise ShapeError(
            f"grouped-masked-softmax: groups {group_sizes} do not cover last axis of {x.shape}"
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(
                f"grouped-masked-softmax: mask shape {mask.shape} != logits shape {x.shape}"
            )

    out = np.zeros_like(x)
    bounds = []
    start = 0
    for n in group_sizes:
        s, e = start, start + n
        bounds.append((s, e))
        seg = x[..., s:e]
        if mask is None:
            mx = seg.max(axis=-1, keepdims=True)
            ex = np.exp(seg - mx)
        else:
            blocked = mask[..., s:e]
            neg = np.where(blocked, -np.inf, seg)
            mx = neg.max(axis=-1, keepdims=True)
            safe_mx = np.where(np.isfinite(mx), mx, 0.0)
            ex = np.where(blocked, 0.0, np.exp(seg - safe_mx))
        z = ex.sum(axis=-1, keepdims=True)
        out[..., s:e] = np.where(z > 0, ex / np.where(z > 0, z, 1.0), 0.0)
        start = e

    def backward(g):
        gx = np.empty_like(x)
        for s, e in bounds:
            y = out[..., s:e]
            gy = g[..., s:e]
            dot = (gy * y).sum(axis=-1, keepdims=True)
            gx[..., s:e] = y * (gy - dot)
        _accum(logits, gx)

    return Tensor(out, _parents=(logits,), _backward=backward)


def euclidean_distance(a, b):
    """L2 distance over the last axis: scalar for vectors, per-row for matrices."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"euclidean-distance: shapes {a.data.shape} and {b.data.shape} differ"
        )
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g):
        # Subgradient 0 at coincident points (diff is 0 there anyway).
        denom = np.maximum(dist, np.finfo(dist.dtype).tiny)
        gd = (g / denom)[..., None] * diff
        _accum(a, gd)
        _accum(b, -gd)

    return Tensor(dist, _parents=(a, b), _backward=backward)


def squared_l2(a):
    """Sum of squares over the last axis."""
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g[..., None] * (2.0 * a.data))

    return Tensor((a.data * a.data).sum(axis=-1), _parents=(a,), _backward=backward)


def gaussian_reparameterize(mu, logvar, eps):
    """z = mu + exp(logvar / 2) * eps with a fixed noise draw ``eps``.

    Deterministic given (mu, logvar, eps); the caller owns the noise source.
    """
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    eps = np.asarray(eps)
    _check_broadcast("gaussian-reparameterize", mu, logvar)
    sigma = np.exp(0.5 * logvar.data)
    try:
        out = mu.data + sigma * eps
    except ValueError:
        raise ShapeError(
            f"gaussian-reparameterize: noise shape {eps.shape} does not broadcast "
            f"with parameter shape {mu.data.shape}"
        ) from None

    def backward(g):
        _accum(mu, _unbroadcast(g, mu.data.shape))
        _accum(logvar, _unbroadcast(g * eps * 0.5 * sigma, logvar.data.shape))

    return Tensor(out, _parents=(mu, logvar), _backward=backward)


def sum_all(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(np.asarray(a.data.sum()), _parents=(a,), _backward=backward)


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return Tensor(np.asarray(a.data.mean()), _parents=(a,), _backward=backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "scale": scale,
    "concat": concat,
    "gather-rows": gather_rows,
    "take-per-row": take_per_row,
    "tanh": tanh,
    "leaky-relu": leaky_relu,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "grouped-masked-softmax": grouped_masked_softmax,
    "euclidean-distance": euclidean_distance,
    "squared-l2": squared_l2,
    "gaussian-reparameterize": gaussian_reparameterize,
    "batched-matvec": batched_matvec,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_all,
    "mean": mean_all,
}


def forward_primitive(kind, *inputs, **attrs):
    """Dispatch a primitive op by name; raises for unknown kinds."""
    try:
        op = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive op {kind!r}") from None
    return op(*inputs, **attrs)


def backward(loss):
    """Propagate d(loss)/d(node) to every reachable tensor.

    ``loss`` must be scalar. Leaves that require gradients but are not
    reachable keep ``grad = None``, which readers treat as zero. Call once per
    recorded graph; repeated calls would accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    order = []
    seen = set()
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
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_of(loss, leaf):
    """Gradient of ``loss`` w.r.t. ``leaf`` on a fresh backward pass."""
    leaf.grad = None
    backward(loss)
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    return leaf.grad


def finite_difference_check(loss_fn, leaf, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` re-runs the forward pass from the current leaf values (the
    graph recipe); ``leaf.data`` is perturbed in place and restored. Relative
    error is |analytic - fd| / max(1, |analytic|), maximized over components.
    Meant for float64 leaves.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    analytic = grad_of(loss_fn(), leaf).reshape(-1).copy()

    flat = leaf.data.reshape(-1)
    fd = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(loss_fn().data)
        flat[i] = orig - epsilon
        lo = float(loss_fn().data)
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * epsilon)

    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
