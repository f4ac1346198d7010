"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional backward closure; calling
``backward()`` on a scalar walks the tape in reverse topological order.
Tensors are never mutated in place once they participate in a graph.

Precision is a process-global switch: float32 for training and decoding,
float64 for verification (invertibility and Jacobian checks need the
headroom). Use ``set_default_dtype`` or the ``precision`` context manager.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .backend import kernels

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global default dtype (e.g. 'float64')."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (decoding, verification)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    # -- construction -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add g into the grad buffer.

        owned=True promises g is a freshly allocated array the caller
        gives up, so the first accumulation can adopt it without copying.
        Closures that pass through (or view) a child's grad must leave
        owned False or later additions would corrupt that child.
        """
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        # Iterative topological sort; graphs here run to thousands of nodes,
        # too deep for recursion.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    """Wrap an op result, attaching the tape node only when grads are live."""
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and grad_parents:
        out = Tensor(data, requires_grad=True)
        out._parents = grad_parents
        out._bwd = bwd
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape), owned=True)

    return _result(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return _result(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * data / b.data, b.data.shape), owned=True)

    return _result(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(-g, owned=True)

    return _result(-a.data, (a,), bwd)


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**k

    def bwd(g):
        a._accumulate(g * k * a.data ** (k - 1), owned=True)

    return _result(data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * data, owned=True)

    return _result(data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data, owned=True)

    return _result(data, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - data * data), owned=True)

    return _result(data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is stable in both tails and warning-free.
    data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    data = data.astype(a.data.dtype, copy=False)

    def bwd(g):
        a._accumulate(g * data * (1.0 - data), owned=True)

    return _result(data, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def bwd(g):
        a._accumulate(g * (a.data > 0), owned=True)

    return _result(data, (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(g * np.sign(a.data), owned=True)

    return _result(np.abs(a.data), (a,), bwd)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if a.data.ndim > 1 else g * b.data
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape), owned=True)
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            elif b.data.ndim == 2 and a.data.ndim > 2:
                # x [.., n, d] @ W [d, k]: fold leading dims straight into
                # one gemm instead of a stacked product plus a reduction
                d = a.data.shape[-1]
                k = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, d).T, g.reshape(-1, k))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape), owned=True)

    return _result(data, (a, b), bwd)


def affine(x, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-d weights (the linear-layer hot path)."""
    x = as_tensor(x)
    data = np.matmul(x.data, w.data)
    data += b.data

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data.T), owned=True)
        if w.requires_grad:
            d, k = w.data.shape
            w._accumulate(np.matmul(x.data.reshape(-1, d).T, g.reshape(-1, k)), owned=True)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0), owned=True)

    return _result(data, (x, w, b), bwd)


def slogdet(w) -> tuple[np.ndarray, Tensor]:
    """Sign and log|det| of (stacked) square matrices, differentiable in the log part.

    d log|det W| / dW = inv(W)^T, applied per stacked matrix.
    """
    w = as_tensor(w)
    sign, logabs = np.linalg.slogdet(w.data)

    def bwd(g):
        inv_t = np.swapaxes(np.linalg.inv(w.data), -1, -2)
        w._accumulate((np.asarray(g)[..., None, None] * inv_t).astype(w.data.dtype, copy=False))

    return sign, _result(logabs.astype(w.data.dtype, copy=False), (w,), bwd)


# -- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g):
        a._accumulate(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        a._accumulate(np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), bwd)


def take(a, index) -> Tensor:
    """Basic indexing (ints/slices only, no repeats); gradient scatters into zeros."""
    a = as_tensor(a)
    data = a.data[index]

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[index] += g
        a._accumulate(buf, owned=True)

    return _result(np.ascontiguousarray(data), (a,), bwd)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            if p.requires_grad:
                p._accumulate(np.ascontiguousarray(g[tuple(sl)]), owned=True)
            offset += n

    return _result(data, parts, bwd)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.data.shape[axis]}")
    outs = []
    offset = 0
    for n in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(offset, offset + n)
        outs.append(take(a, tuple(sl)))
        offset += n
    return outs


# -- reductions --------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy(), owned=True)
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy(), owned=True)

    return _result(data, (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy(), owned=True)

    return _result(data, (a,), bwd)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        expanded = data if keepdims or axis is None else np.expand_dims(data, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        mask = a.data == expanded
        # Ties split the gradient evenly, keeping the op well-defined.
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        a._accumulate(mask * gg / counts, owned=True)

    return _result(data, (a,), bwd)


# -- fused / kernel-backed ops ------------------------------------------------


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a, mask_additive: Tensor | np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, optionally after adding a mask of -inf."""
    a = as_tensor(a)
    scores = a.data if mask_additive is None else a.data + (
        mask_additive.data if isinstance(mask_additive, Tensor) else mask_additive
    )
    shape = scores.shape
    y = kernels.softmax_fwd(_rows(scores)).reshape(shape)

    def bwd(g):
        dx = kernels.softmax_bwd(_rows(y), _rows(g)).reshape(shape)
        a._accumulate(_unbroadcast(dx, a.data.shape), owned=True)

    return _result(y, (a,), bwd)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis (stable; used by losses and scoring)."""
    a = as_tensor(a)
    m = np.max(a.data, axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    data = shifted - lse

    def bwd(g):
        p = np.exp(data)
        a._accumulate(g - p * g.sum(axis=-1, keepdims=True), owned=True)

    return _result(data, (a,), bwd)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a = as_tensor(a)
    shape = a.data.shape
    x2 = _rows(a.data)
    y2, xhat, rstd = kernels.layernorm_fwd(x2, gain.data, bias.data, eps)

    def bwd(g):
        dx, dg, db = kernels.layernorm_bwd(xhat, rstd, gain.data, _rows(g))
        if a.requires_grad:
            a._accumulate(dx.reshape(shape), owned=True)
        if gain.requires_grad:
            gain._accumulate(dg, owned=True)
        if bias.requires_grad:
            bias._accumulate(db, owned=True)

    return _result(y2.reshape(shape), (a, gain, bias), bwd)


def gather_last(x, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position (loss lookups)."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bwd(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, ids[..., None], g[..., None], axis=-1)
        x._accumulate(buf, owned=True)

    return _result(data, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` with scatter-add gradient into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def bwd(g):
        dw = np.zeros_like(table.data)
        kernels.embedding_bwd(ids.reshape(-1), _rows(g), dw)
        table._accumulate(dw, owned=True)

    return _result(data, (table,), bwd)


# -- capability contract ------------------------------------------------------

_CAPABILITIES = frozenset(
    {
        "matmul",
        "add",
        "mul",
        "exp",
        "log",
        "tanh",
        "affine",
        "softmax_masked",
        "layer_norm",
        "embedding",
        "concat",
        "split",
        "reshape",
        "transpose",
        "sum",
        "mean",
        "max",
        "gaussian_sampling",
        "sigmoid",
        "relu",
        "log_softmax",
        "slogdet",
    }
)


class UnsupportedOpError(RuntimeError):
    pass


def required_op_set() -> frozenset[str]:
    """Capabilities the substrate guarantees, all with reverse-mode gradients
    (sampling excepted: gradients flow only via caller-side reparameterization)."""
    return _CAPABILITIES


def ensure_ops(names: Iterable[str]) -> None:
    missing = sorted(set(names) - _CAPABILITIES)
    if missing:
        raise UnsupportedOpError(f"substrate lacks required ops: {missing}")


def standard_normal_logpdf(x: np.ndarray) -> np.ndarray:
    return -0.5 * x * x - 0.5 * math.log(2.0 * math.pi)
