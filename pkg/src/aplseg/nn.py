"""Neural building blocks on top of the autodiff core.

Conventions used by every module here:

* token sequences are (n, c) arrays, rows are tokens;
* attention q/k/v/o projections carry no bias;
* residual branches that should start as exact no-ops zero-initialize
  their output projection (attention ``wo``, MLP ``fc2``), making whole
  blocks identities at initialization;
* parameters are reachable through ``params()`` with dotted names, which
  is also the checkpoint naming scheme.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


def normal_init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Parameter container with dotted-name traversal."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        self._tensors[name] = t
        return t

    def child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def params(self) -> dict[str, Tensor]:
        out = dict(self._tensors)
        for cname, c in self._children.items():
            for pname, p in c.params().items():
                out[f"{cname}.{pname}"] = p
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    def freeze(self) -> None:
        for p in self.params().values():
            p.requires_grad = False

    def load_state(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy checkpoint arrays into this module's parameters."""
        mine = self.params()
        for name, p in mine.items():
            key = prefix + name
            if key not in values:
                raise ShapeMismatch(f"missing parameter {key} in state")
            arr = values[key]
            if arr.shape != p.data.shape:
                raise ShapeMismatch(
                    f"parameter {key}: stored shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(np.float64).copy()


class Linear(Module):
    """Affine map of token rows: y = x W + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero: bool = False):
        super().__init__()
        std = 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.w = self.register("w", Tensor(w, requires_grad=True))
        self.b = self.register("b", Tensor(np.zeros(d_out), requires_grad=True)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, T.tile_rows(self.b, x.shape[0]))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = self.register("gain", Tensor(np.ones(dim), requires_grad=True))
        self.bias = self.register("bias", Tensor(np.zeros(dim), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over token rows.

    ``project`` selects which of q/k/v get an input projection; callers
    that pre-project keys elsewhere drop "k". The output projection is
    always present and is zero-initialized when ``zero_out`` is set.
    The last forward's attention weights stay readable in ``last_attn``
    with shape (heads, n_q, n_k).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 project: str = "qkv", zero_out: bool = True):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        std = 1.0 / math.sqrt(dim)
        for key in project:
            if key not in "qkv":
                raise ValueError(f"unknown projection {key!r}")
            self.register(f"w{key}", Tensor(rng.normal(0.0, std, (dim, dim)),
                                            requires_grad=True))
        wo = np.zeros((dim, dim)) if zero_out else rng.normal(0.0, std, (dim, dim))
        self.register("wo", Tensor(wo, requires_grad=True))
        self.last_attn: np.ndarray | None = None

    def _proj(self, x: Tensor, key: str) -> Tensor:
        w = self._tensors.get(f"w{key}")
        return T.matmul(x, w) if w is not None else x

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return T.permute(T.reshape(x, (n, self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        n_q = q_in.shape[0]
        q = self._split(self._proj(q_in, "q"))
        k = self._split(self._proj(k_in, "k"))
        v = self._split(self._proj(v_in, "v"))
        scores = T.mul(T.bmm(q, T.permute(k, (0, 2, 1))),
                       1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        self.last_attn = attn.data.copy()
        mixed = T.bmm(attn, v)
        merged = T.reshape(T.permute(mixed, (1, 0, 2)), (n_q, self.dim))
        return T.matmul(merged, self._tensors["wo"])


class MLP(Module):
    """Two-layer feed-forward with GELU; fc2 optionally zero-initialized."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 zero_out: bool = True):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.child("fc2", Linear(hidden, dim, rng, zero=zero_out))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention + pre-norm MLP, both residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 zero_out: bool = True, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads, rng,
                                                          zero_out=zero_out))
        self.ln2 = self.child("ln2", LayerNorm(dim))
        self.mlp = self.child("mlp", MLP(dim, mlp_ratio * dim, rng, zero_out=zero_out))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, h))
        return T.add(x, self.mlp(self.ln2(x)))


class CrossAttentionBlock(Module):
    """Residual cross-attention: queries attend to an external sequence."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 zero_out: bool = True):
        super().__init__()
        self.ln_q = self.child("ln_q", LayerNorm(dim))
        self.ln_kv = self.child("ln_kv", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads, rng,
                                                          zero_out=zero_out))

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        ctx = self.ln_kv(context)
        return T.add(x, self.attn(self.ln_q(x), ctx, ctx))


class Conv(Module):
    """Thin conv2d wrapper owning its kernel and optional bias."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same", bias: bool = True,
                 zero: bool = False, gain: float = 1.0):
        super().__init__()
        std = gain / math.sqrt(c_in * k * k)
        kern = np.zeros((c_out, c_in, k, k)) if zero else \
            rng.normal(0.0, std, (c_out, c_in, k, k))
        self.kernel = self.register("kernel", Tensor(kern, requires_grad=True))
        self.bias = self.register("bias", Tensor(np.zeros(c_out), requires_grad=True)) \
            if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride,
                        padding=self.padding)


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    """(h*w, c) rows -> (c, h, w) feature map."""
    return T.reshape(T.permute(tokens, (1, 0)), (tokens.shape[1], h, w))


def map_to_tokens(fmap: Tensor) -> Tensor:
    """(c, h, w) feature map -> (h*w, c) rows."""
    c, h, w = fmap.shape
    return T.permute(T.reshape(fmap, (c, h * w)), (1, 0))
