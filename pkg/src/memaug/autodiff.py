"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

The tape is rebuilt on every forward pass: each op returns a fresh Tensor
holding references to its parents and a closure that pushes gradients back
to them.  Only the 1-D/2-D shapes the encoder needs are supported.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import DataError, DegenerateRowError, EmptyLossError, ShapeError

# Label value marking positions that contribute nothing to cross_entropy.
IGNORE_INDEX = -1

_INV_SQRT_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_GRAD_STACK = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the heavy lifting lives in the module functions.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents, backward_fn) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def bw(g):
        if a.requires_grad:
            a._accum(g * s)

    return _record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul needs (m,k) x (k,n); got {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _record(out, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over stacked 3-D operands with equal leading dims."""
    if a.data.ndim != 3 or b.data.ndim != 3 \
            or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(
            f"bmm needs (B,m,k) x (B,k,n); got {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accum(a.data.transpose(0, 2, 1) @ g)

    return _record(out, (a, b), bw)


def transpose_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accum(g.transpose(inverse))

    return _record(out, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)

    def bw(g):
        if a.requires_grad:
            a._accum(g.T)

    return _record(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()))

    def bw(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(g)))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (1.0 - y * y))

    return _record(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def bw(g):
        if a.requires_grad:
            a._accum(g * y * (1.0 - y))

    return _record(out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT_2))
    out = Tensor(x * phi)

    def bw(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a._accum(g * (phi + x * pdf))

    return _record(out, (a,), bw)


def dropout(a: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout; identity when p <= 0 or no rng is supplied."""
    if p <= 0.0 or rng is None:
        return a
    if p >= 1.0:
        raise ShapeError("dropout probability must be < 1")
    keep = rng.random(a.data.shape) >= p
    factor = keep / (1.0 - p)
    out = Tensor(a.data * factor)

    def bw(g):
        if a.requires_grad:
            a._accum(g * factor)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# indexing / reshaping
# ---------------------------------------------------------------------------

def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows needs 1-D indices, got {idx.shape}")
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError("row index out of range")
    out = Tensor(a.data[idx])

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _record(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(a.data[:, lo:hi])

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, lo:hi] += g

    return _record(out, (a,), bw)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    index = [slice(None)] * out.data.ndim

    def bw(g):
        off = 0
        for p, sz in zip(parts, sizes):
            if p.requires_grad:
                index[axis] = slice(off, off + sz)
                p._accum(g[tuple(index)])
            off += sz

    return _record(out, tuple(parts), bw)


def concat_rows(parts) -> Tensor:
    return concat(parts, axis=0)


def concat_cols(parts) -> Tensor:
    return concat(parts, axis=1)


# ---------------------------------------------------------------------------
# normalization / losses
# ---------------------------------------------------------------------------

def softmax_last(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked entries come out exactly zero.

    mask is a boolean array broadcastable to x (True = keep).  A row with
    every entry masked raises DegenerateRowError.
    """
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(mask, x.data, -np.inf)
    else:
        z = x.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accum(y * (g - dot))

    return _record(out, (x,), bw)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row-wise softmax of a 2-D tensor; see softmax_last."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.data.shape}")
    return softmax_last(x, mask)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],) \
            or beta.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"layer_norm shapes: x {x.data.shape}, gamma {gamma.data.shape}, "
            f"beta {beta.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x._accum(inv * (gh - gh.mean(axis=1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=1, keepdims=True)))

    return _record(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax over targets, skipping IGNORE_INDEX rows."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy shapes: logits {logits.data.shape}, targets {t.shape}"
        )
    kept = t != IGNORE_INDEX
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    tk = t[kept]
    if tk.min() < 0 or tk.max() >= logits.data.shape[1]:
        raise DataError("cross_entropy target out of vocabulary range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    nll = lse[kept] - z[kept, tk]
    out = Tensor(np.asarray(nll.sum() / n_kept))

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z - m)
            p /= p.sum(axis=1, keepdims=True)
            gl = np.zeros_like(z)
            gl[kept] = p[kept]
            gl[kept, tk] -= 1.0
            logits._accum(gl * (float(g) / n_kept))

    return _record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo = []
    seen = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for child in it:
            if child.requires_grad and id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._parents)))
                pushed = True
                break
        if not pushed:
            topo.append(node)
            stack.pop()
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
