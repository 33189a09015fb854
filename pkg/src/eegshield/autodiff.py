"""Reverse-mode automatic differentiation over dense real tensors.

A :class:`Tensor` wraps a numpy float array.  Operations build an acyclic
graph of parent references plus a backward closure; :func:`grad` runs one
reverse sweep in a fixed, topology-determined order, so identical leaf
values and graph shape give bit-identical gradients in single-threaded
use.  Gradients only flow toward tensors flagged ``requires_grad``;
branches made of constants build no graph at all, which keeps pure
inference cheap.

The operation set is exactly what the surrogate models and perturbation
losses need: matmul/affine pieces, a temporal filter-bank convolution, a
spatial mixing convolution, elementwise activations, temporal mean
pooling, softmax cross-entropy, mean squared error, row gathering and
per-row L2 norms (for per-user perturbation templates).  Heavy inner
loops are delegated to :mod:`eegshield.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, LabelError, NumericalError, ParameterError

ACTIVATION_KINDS = ("relu", "elu", "square")


class Tensor:
    """Graph node holding a dense float32/float64 array."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small conveniences for composing losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, s):
        return scale(self, s)

    __rmul__ = __mul__


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Wrap an array as a non-differentiable leaf."""
    t = as_tensor(x)
    return Tensor(t.data) if t.requires_grad else t


def _accum(t, g):
    if t._grad is None:
        t._grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t._grad = t._grad + g


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, wrt):
    """Gradients of a scalar output with respect to differentiable leaves.

    Leaves not reachable from ``output`` get a zero gradient.  The graph
    is left reusable: accumulated adjoints are cleared before returning.
    """
    if output.data.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.data.shape}")
    for leaf in wrt:
        if not leaf.requires_grad:
            raise ContractError("grad target is not flagged differentiable")
    if not np.isfinite(output.data).all():
        raise NumericalError("loss is not finite")
    order = _toposort(output)
    output._grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
    out = []
    for leaf in wrt:
        g = leaf._grad
        out.append(np.zeros_like(leaf.data) if g is None else np.asarray(g))
    for node in order:
        node._grad = None
    return out


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _make(data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def activation(x, kind):
    x = as_tensor(x)
    if kind == "relu":
        data = np.maximum(x.data, 0)

        def backward(g):
            if x.requires_grad:
                _accum(x, g * (x.data > 0))

    elif kind == "elu":
        neg = x.data < 0
        expm1 = np.expm1(np.minimum(x.data, 0))
        data = np.where(neg, expm1, x.data)

        def backward(g):
            if x.requires_grad:
                _accum(x, g * np.where(neg, expm1 + 1.0, 1.0))

    elif kind == "square":
        data = x.data * x.data

        def backward(g):
            if x.requires_grad:
                _accum(x, g * (2.0 * x.data))

    else:
        raise ParameterError(f"unknown activation kind {kind!r}")
    return _make(data, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def flatten_trailing(x):
    """Collapse all axes after the first: (b, ...) -> (b, prod)."""
    x = as_tensor(x)
    b = x.data.shape[0]
    return reshape(x, (b, int(np.prod(x.data.shape[1:], dtype=np.int64))))


def gather_rows(table, index):
    """out[i] = table[index[i]]; backward scatter-adds per index order."""
    table = as_tensor(table)
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ParameterError("gather_rows needs a 1-D integer index")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise LabelError("gather index out of range")
    data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx, g)
            _accum(table, dt)

    return _make(data, (table,), backward)


def row_l2_norms(x):
    """Euclidean norm of each leading-axis slice; gradient 0 at a zero row."""
    x = as_tensor(x)
    flat = x.data.reshape(x.data.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))

    def backward(g):
        if x.requires_grad:
            safe = np.where(norms > 0, norms, 1.0)
            coef = (g / safe) * (norms > 0)
            _accum(x, (flat * coef[:, None]).reshape(x.data.shape))

    return _make(norms, (x,), backward)


def mean_of(x):
    x = as_tensor(x)
    data = x.data.mean()

    def backward(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, g / x.data.size))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# signal ops (kernel-backed)
# ---------------------------------------------------------------------------

def conv_temporal(x, kernels_t, stride=1):
    """Slide each kernel along the time axis of every channel.

    ``x`` is (b, c, t); kernels are (f, 1, k) or (f, k).  Output is
    (b, c*f, t') with t' = (t - k) // stride + 1, filter index fastest.
    """
    x, kernels_t = as_tensor(x), as_tensor(kernels_t)
    if int(stride) < 1:
        raise ParameterError("stride must be >= 1")
    stride = int(stride)
    w = kernels_t.data.reshape(kernels_t.data.shape[0], -1)
    if x.data.ndim != 3:
        raise DimensionError(f"conv_temporal input must be (b, c, t), got {x.shape}")
    k = w.shape[1]
    t = x.data.shape[2]
    if k > t:
        raise DimensionError(f"kernel width {k} exceeds signal length {t}")
    data = kernels.conv_temporal_fwd(np.ascontiguousarray(x.data), np.ascontiguousarray(w), stride)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, kernels.conv_temporal_bwd_x(g, w, stride, t))
        if kernels_t.requires_grad:
            dw = kernels.conv_temporal_bwd_w(g, np.ascontiguousarray(x.data), stride, k)
            _accum(kernels_t, dw.reshape(kernels_t.data.shape))

    return _make(data, (x, kernels_t), backward)


def conv_spatial(x, mix):
    """Mix channels with learned weights at every time step: (g,c)x(b,c,t)->(b,g,t)."""
    x, mix = as_tensor(x), as_tensor(mix)
    if x.data.ndim != 3 or mix.data.ndim != 2 or mix.data.shape[1] != x.data.shape[1]:
        raise DimensionError(f"conv_spatial: mix {mix.shape} vs input {x.shape}")
    data = np.matmul(mix.data, x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, np.matmul(mix.data.T, g))
        if mix.requires_grad:
            _accum(mix, np.tensordot(g, x.data, axes=([0, 2], [0, 2])))

    return _make(data, (x, mix), backward)


def mean_pool_time(x, window, stride):
    x = as_tensor(x)
    window, stride = int(window), int(stride)
    if x.data.ndim != 3:
        raise DimensionError(f"mean_pool_time input must be (b, c, t), got {x.shape}")
    if stride < 1 or window < 1:
        raise ParameterError("window and stride must be >= 1")
    t = x.data.shape[2]
    if window > t:
        raise DimensionError(f"pool window {window} exceeds signal length {t}")
    data = kernels.mean_pool_fwd(np.ascontiguousarray(x.data), window, stride)

    def backward(g):
        if x.requires_grad:
            _accum(x, kernels.mean_pool_bwd(np.ascontiguousarray(g), window, stride, t))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], max-shifted."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (b, K), got {logits.shape}")
    b, n_classes = logits.data.shape
    if labels.shape != (b,) or not np.issubdtype(labels.dtype, np.integer):
        raise DimensionError("labels must be a 1-D integer array matching the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"label out of range [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    rows = np.arange(b)
    data = -log_probs[rows, labels].mean()

    def backward(g):
        if logits.requires_grad:
            p = exp / denom
            p[rows, labels] -= 1.0
            _accum(logits, p * (g / b))

    return _make(data, (logits,), backward)


def softmax_rows(logits):
    """Row-wise softmax with the standard p * (g - <g, p>) backward."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs (b, K) logits, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    p = exp / exp.sum(axis=1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            inner = (g * p).sum(axis=1, keepdims=True)
            _accum(logits, p * (g - inner))

    return _make(p, (logits,), backward)


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.mean(diff * diff)
    n = diff.size

    def backward(g):
        if a.requires_grad:
            _accum(a, diff * (2.0 * g / n))
        if b.requires_grad:
            _accum(b, diff * (-2.0 * g / n))

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# non-differentiable utilities used by the perturbation loops
# ---------------------------------------------------------------------------

def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def sign(x):
    """Elementwise {-1, 0, +1}; sign(0) = 0."""
    return np.sign(_raw(x))


def project_linf(delta, epsilon):
    """Clamp every element to [-epsilon, +epsilon]."""
    epsilon = float(epsilon)
    if epsilon < 0:
        raise ParameterError("epsilon must be >= 0")
    return np.clip(_raw(delta), -epsilon, epsilon)
