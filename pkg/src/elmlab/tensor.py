"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``backward`` walks the reachable nodes in exact
reverse creation order, so gradients of shared subexpressions accumulate
additively.

Broadcasting is deliberately narrow: a binary op accepts equal shapes, a
scalar (shape ``()``) on either side, or a 1-D row vector matching the last
axis of the other operand. Anything else raises ``ShapeError``.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import NumericalError, RangeError, ShapeError, ContractError

_ids = itertools.count()
_grad_enabled = True
_check_finite = False
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def detect_anomaly():
    """Check every op output for NaN/Inf while active."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype in (np.float32, np.float64) else _default_dtype
        arr = np.asarray(arr, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf node after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {what} (op={self.op})")
        return self

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported kernel")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    out._retain = False
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from op {op}")
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops with scalar / row-bias broadcasting
# ---------------------------------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only scalar and row-bias broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_kind(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_kind(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, ``[..., m, k] @ [k, n]`` (shared right
    operand) and batched ``[..., m, k] @ [..., k, n]`` with identical
    leading dimensions.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        shared = True
    elif ad.shape[:-2] == bd.shape[:-2]:
        shared = False
    else:
        raise ShapeError(f"matmul batch mismatch: {ad.shape} @ {bd.shape}")
    if shared:
        # one large GEMM instead of a loop over leading dimensions
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def bw(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    ax = axis % datas[0].ndim
    for d in datas[1:]:
        if d.ndim != datas[0].ndim or any(d.shape[i] != datas[0].shape[i] for i in range(d.ndim) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate(datas, axis=ax), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    s = tsum(x, axis, keepdims)
    return mul(s, 1.0 / float(n))


# ---------------------------------------------------------------------------
# nonlinearities and normalization (numpy kernels are shared with the
# graph-free inference path in the model)
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    # in-place chains keep the number of full-size temporaries low
    t = xd * xd
    t *= xd
    t *= 0.044715
    t += xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        dt = xd * xd
        dt *= 3 * 0.044715
        dt += 1.0
        dt *= _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        dt *= sech2
        dt *= xd
        dt += t
        dt += 1.0
        dt *= 0.5
        dt *= g
        return (dt,)

    return _make(out, (x,), bw, "gelu")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def rms_norm_np(x: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rms_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit root-mean-square (no mean subtraction)."""
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data * r

    def bw(g):
        return (r * (g - y * np.mean(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "rms_norm")


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    y = softmax_np(x.data)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


MASK_FILL = -1e9


def mask_fill(x: Tensor, keep: np.ndarray, fill: float = MASK_FILL) -> Tensor:
    """Replace entries where ``keep`` is False by ``fill`` (attention masking).

    ``keep`` is a constant boolean array broadcastable to ``x``.
    """
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, x.data.dtype.type(fill))
    return _make(out, (x,), lambda g: (np.where(keep, g, 0.0).astype(g.dtype),), "mask_fill")


def causal_keep(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------

def embedding(table: Tensor, idx) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into those rows only."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RangeError(f"embedding index out of range [0, {n})")
    tshape = table.shape

    def bw(g):
        out = np.zeros(tshape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *tshape[1:]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "embedding")


def where_rows(mask, x: Tensor, row: Tensor) -> Tensor:
    """Rows of ``x`` (last axis = features) selected by ``mask`` are
    replaced by the row vector ``row``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1] or row.shape != (x.shape[-1],):
        raise ShapeError(f"where_rows mask {mask.shape}, x {x.shape}, row {row.shape}")
    m = mask[..., None]
    out = np.where(m, row.data, x.data)

    def bw(g):
        return np.where(m, 0.0, g).astype(g.dtype), g[mask].sum(axis=0)

    return _make(out, (x, row), bw, "where_rows")


# ---------------------------------------------------------------------------
# losses and estimators
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax,
    fused log-sum-exp form."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, K] logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n, k = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise RangeError(f"target out of range [0, {k})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(n)
    loss = np.asarray(np.mean(lse - x[rows, targets]), dtype=x.dtype)

    def bw(g):
        p = e / s
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(loss, (logits,), bw, "cross_entropy")


def straight_through(x: Tensor, quantized) -> Tensor:
    """Forward the quantized values, backward the identity onto ``x``."""
    q = np.asarray(quantized, dtype=x.data.dtype)
    if q.shape != x.shape:
        raise ShapeError(f"straight-through shapes differ: {x.shape} vs {q.shape}")
    return _make(q.copy(), (x,), lambda g: (g,), "straight_through")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list:
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Leaf gradients accumulate across calls; call ``zero_grad`` between
    steps. Non-leaf gradients are kept only for nodes marked
    ``retain_grad``.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss._id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def trace(loss: Tensor) -> list:
    """Operation records ``(op, input_ids, output_id)`` in creation order."""
    return [(n.op, tuple(p._id for p in n._parents), n._id) for n in reversed(_reachable(loss)) if not n.is_leaf]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamWState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adamw_step(params, grads, state: AdamWState, lr: float, wd: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8) -> None:
    """One AdamW update in place: decoupled weight decay, bias-corrected moments.

    Refuses the whole step (raising ``NumericalError``) if any gradient is
    non-finite, leaving parameters and state untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].data.shape:
            raise ShapeError(f"grad {i} shape {g.shape} != param shape {params[i].data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {i}; step refused")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if wd:
            p.data *= (1.0 - lr * wd)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params, lr=1e-4, weight_decay=0.05, betas=(0.9, 0.95), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamWState(self.params)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, self.lr, self.weight_decay,
                   self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
