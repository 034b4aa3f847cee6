"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and, when gradient tracking is on,
remembers which operation produced it. Calling :func:`backward` on a
scalar loss walks the recorded graph in reverse topological order and
accumulates gradients into every tensor that requested them.

Design constraints kept deliberately tight:

* all data is float64, row-major;
* elementwise binary ops accept equal shapes or a scalar operand, nothing
  else (explicit ``tile_rows`` / ``tile_cols`` ops cover the structured
  broadcasts needed elsewhere);
* every op validates its output for NaN/Inf and raises
  :class:`~aplseg.errors.NumericFault` instead of propagating bad values.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from .errors import NumericFault, ShapeMismatch

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"{op} produced or received non-finite values")


class Tensor:
    """A float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    @staticmethod
    def _from_op(data: np.ndarray, op: str, parents: Sequence["Tensor"],
                 bwd: Callable[[np.ndarray], None] | None) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._bwd = bwd if track else None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_operand(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_operand(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return permute(self, (1, 0))

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _as_operand(x, like: Tensor) -> Tensor:
    """Wrap a python scalar as a constant ()-tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(float(x)))


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape if needed."""
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# -- elementwise suite --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    _binary_shapes(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g, b.shape))

    return Tensor._from_op(data, "add", (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    _binary_shapes(a, b, "sub")
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(-g, b.shape))

    return Tensor._from_op(data, "sub", (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    _binary_shapes(a, b, "mul")
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * a.data, b.shape))

    return Tensor._from_op(data, "mul", (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    _binary_shapes(a, b, "div")
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(data, "div", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(-g)

    return Tensor._from_op(-a.data, "neg", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        a._accum(g * data)

    return Tensor._from_op(data, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericFault("log of non-positive value")
    data = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return Tensor._from_op(data, "log", (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericFault("sqrt of negative value")
    data = np.sqrt(a.data)

    def bwd(g):
        a._accum(g * 0.5 / np.maximum(data, 1e-300))

    return Tensor._from_op(data, "sqrt", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accum(g * (a.data > 0.0))

    return Tensor._from_op(data, "relu", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    data = x * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a._accum(g * (phi_cdf + x * pdf))

    return Tensor._from_op(data, "gelu", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        a._accum(g * data * (1.0 - data))

    return Tensor._from_op(data, "sigmoid", (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        a._accum(g * ((a.data >= lo) & (a.data <= hi)))

    return Tensor._from_op(data, "clamp", (a,), bwd)


# -- structure ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return Tensor._from_op(data, "reshape", (a,), bwd)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes).copy()

    def bwd(g):
        a._accum(np.transpose(g, inv))

    return Tensor._from_op(data, "permute", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._from_op(data, "concat", tuple(tensors), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accum(buf)

    return Tensor._from_op(data, "slice", (a,), bwd)


def take_cols(a: Tensor, indices) -> Tensor:
    """Gather columns of a 2-D tensor; repeated indices are allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[:, idx].copy()

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (slice(None), idx), g)
        a._accum(buf)

    return Tensor._from_op(data, "take_cols", (a,), bwd)


def tile_rows(v: Tensor, m: int) -> Tensor:
    """(n,) -> (m, n) by row repetition; gradient sums over rows."""
    if v.ndim != 1:
        raise ShapeMismatch(f"tile_rows expects a vector, got {v.shape}")
    data = np.broadcast_to(v.data, (m, v.shape[0])).copy()

    def bwd(g):
        v._accum(g.sum(axis=0))

    return Tensor._from_op(data, "tile_rows", (v,), bwd)


def tile_cols(v: Tensor, n: int) -> Tensor:
    """(m,) -> (m, n) by column repetition; gradient sums over columns."""
    if v.ndim != 1:
        raise ShapeMismatch(f"tile_cols expects a vector, got {v.shape}")
    data = np.broadcast_to(v.data[:, None], (v.shape[0], n)).copy()

    def bwd(g):
        v._accum(g.sum(axis=1))

    return Tensor._from_op(data, "tile_cols", (v,), bwd)


# -- reductions ---------------------------------------------------------------


def total(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bwd(g):
        a._accum(np.full(a.shape, float(g)))

    return Tensor._from_op(data, "sum", (a,), bwd)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    data = a.data.sum(axis=axis)

    def bwd(g):
        a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return Tensor._from_op(data, "sum_axis", (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.size
    data = np.asarray(a.data.mean())

    def bwd(g):
        a._accum(np.full(a.shape, float(g) / n))

    return Tensor._from_op(data, "mean", (a,), bwd)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._from_op(data, "matmul", (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis: (B,m,k) @ (B,k,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accum(a.data.transpose(0, 2, 1) @ g)

    return Tensor._from_op(data, "bmm", (a, b), bwd)


# -- fused neural-net ops -----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accum(data * (g - inner))

    return Tensor._from_op(data, "softmax", (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gain.data + bias.data

    def bwd(g):
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum(term * inv_std)
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, n).sum(axis=0))

    return Tensor._from_op(data, "layer_norm", (x, gain, bias), bwd)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of a (c_in,h,w) map with (c_out,c_in,k,k) kernels.

    ``padding="same"`` keeps the spatial size (stride 1, odd kernels only);
    ``"valid"`` with stride == k is the patchify case.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 3-D input and 4-D kernels, "
                            f"got {x.shape} and {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in or kh != kw:
        raise ShapeMismatch(f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    k = kh
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if padding == "same":
        if stride != 1:
            raise ValueError("conv2d: same-padding requires stride 1")
        if k % 2 == 0:
            raise ValueError("conv2d: same-padding requires an odd kernel")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeMismatch(f"conv2d: kernel {k} larger than padded input "
                            f"{(h + 2 * pad, w + 2 * pad)}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} does not match c_out {c_out}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    data = np.einsum("oikl,ihwkl->ohw", kernels.data, win, optimize=True)
    if bias is not None:
        data = data + bias.data[:, None, None]
    h_out, w_out = data.shape[1], data.shape[2]
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bwd(g):
        if kernels.requires_grad:
            kernels._accum(np.einsum("ohw,ihwkl->oikl", g, win, optimize=True))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    contrib = np.einsum("ohw,oc->chw", g, kernels.data[:, :, ki, kj],
                                        optimize=True)
                    dxp[:, ki:ki + stride * h_out:stride,
                        kj:kj + stride * w_out:stride] += contrib
            if pad:
                dxp = dxp[:, pad:-pad, pad:-pad]
            x._accum(dxp)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2)))

    return Tensor._from_op(data, "conv2d", parents, bwd)


def _interp_coeffs(n_in: int, n_out: int):
    """Half-pixel-center bilinear coefficients for one axis."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resize a (c,h,w) map to (c,H,W) with half-pixel-center bilinear weights."""
    if x.ndim != 3:
        raise ShapeMismatch(f"bilinear_upsample expects (c,h,w), got {x.shape}")
    c, h, w = x.shape
    H, W = out_hw
    iy0, iy1, fy = _interp_coeffs(h, H)
    ix0, ix1, fx = _interp_coeffs(w, W)
    rows = x.data[:, iy0, :] * (1.0 - fy)[None, :, None] \
        + x.data[:, iy1, :] * fy[None, :, None]
    data = rows[:, :, ix0] * (1.0 - fx) + rows[:, :, ix1] * fx

    def bwd(g):
        drows = np.zeros((c, H, w))
        np.add.at(drows, (slice(None), slice(None), ix0), g * (1.0 - fx))
        np.add.at(drows, (slice(None), slice(None), ix1), g * fx)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), iy0, slice(None)),
                  drows * (1.0 - fy)[None, :, None])
        np.add.at(dx, (slice(None), iy1, slice(None)),
                  drows * fy[None, :, None])
        x._accum(dx)

    return Tensor._from_op(data, "bilinear_upsample", (x,), bwd)


# -- the graph and backward pass ----------------------------------------------


class ComputeGraph:
    """Topologically ordered record of the ops reaching one output tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)

    def validate(self) -> None:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        for n in self.nodes:
            for p in n._parents:
                if pos[id(p)] >= pos[id(n)]:
                    raise AssertionError("graph order violates input precedence")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-mode accumulation from a scalar loss.

    Parameters listed in ``params`` that the loss never touched end up with
    an explicit zero gradient buffer.
    """
    if loss.shape != ():
        raise ShapeMismatch(f"backward expects a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph.from_root(loss)
    loss.grad = np.asarray(1.0)
    for node in reversed(graph.nodes):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
