"""Multi-level mask decoder.

Each feature level runs one attention block: queries come from the
(possibly prompt-injected) level features, keys are a projection of the
support-mask-gated raw level features, values a further projection of the
same gated features. Block outputs are channel-concatenated and pushed
through a small conv head to per-pixel logits at grid resolution, then
bilinearly upsampled to the image.

The single-level variant keeps only the deepest level's block and uses
its own narrower conv head; it exists as a runnable ablation.

All trainable residual-branch output projections start at zero, so a
fresh decoder maps prompted features through the conv head unchanged by
the attention blocks.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import MultiLevelFeatures
from .errors import ShapeMismatch
from .nn import (MLP, Conv, LayerNorm, Linear, Module, MultiHeadAttention,
                 map_to_tokens, tokens_to_map)
from .tensor import Tensor


class _LevelBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.gate = self.child("gate", Linear(dim, dim, rng, bias=False))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads, rng,
                                                          project="qv", zero_out=True))
        self.ln = self.child("ln", LayerNorm(dim))
        self.mlp = self.child("mlp", MLP(dim, 4 * dim, rng, zero_out=True))


class _Head(Module):
    """conv 1x1 -> GELU -> conv 3x3 -> GELU -> conv 1x1 (zero) -> logit map.

    The hidden convs use a wide (4x) init: AdamW moves each weight about lr
    per step regardless of gradient scale, so larger hidden activations are
    what make early logits responsive under a small, short schedule.
    """

    def __init__(self, c_in: int, c_mid: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = self.child("conv1", Conv(c_in, c_mid, 1, rng, padding="valid",
                                              gain=4.0))
        self.conv2 = self.child("conv2", Conv(c_mid, c_mid, 3, rng, padding="same",
                                              gain=4.0))
        self.conv3 = self.child("conv3", Conv(c_mid, 1, 1, rng, padding="valid",
                                              zero=True))

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv3(T.gelu(self.conv2(T.gelu(self.conv1(x)))))


class Decoder(Module):
    """Parameter names live under ``decoder.``; heads sized for dim c."""

    def __init__(self, dim: int, heads: int, image_size: int,
                 rng: np.random.Generator, single_level: bool = False):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.single_level = single_level
        if single_level:
            self.blocks = [self.child("level3", _LevelBlock(dim, heads, rng))]
            self.head = self.child("single_head", _Head(dim, dim, rng))
        else:
            self.blocks = [self.child(f"level{j}", _LevelBlock(dim, heads, rng))
                           for j in range(4)]
            self.head = self.child("head", _Head(4 * dim, dim, rng))

    # -- stages -------------------------------------------------------------

    def gate_level(self, block: _LevelBlock, e_l: Tensor, mask: np.ndarray) -> Tensor:
        """Mask the level features, then project them as attention keys."""
        c, h, w = e_l.shape
        if mask.shape != (h, w):
            raise ShapeMismatch(f"mask {mask.shape} does not match level grid {(h, w)}")
        tokens = map_to_tokens(e_l)
        gated = T.mul(tokens, T.tile_cols(Tensor(mask.reshape(-1)), c))
        return block.gate(gated)

    def level_block(self, block: _LevelBlock, prompted: Tensor, gated: Tensor) -> Tensor:
        """Cross-attention into the gated keys, residual, pre-norm MLP."""
        c, h, w = prompted.shape
        q = map_to_tokens(prompted)
        x = T.add(q, block.attn(q, gated, gated))
        x = T.add(x, block.mlp(block.ln(x)))
        return tokens_to_map(x, h, w)

    def fuse_and_classify(self, outs: list[Tensor]) -> Tensor:
        """Concatenate level outputs, run the conv head, upsample to image size."""
        want = 1 if self.single_level else 4
        if len(outs) != want:
            raise ShapeMismatch(f"expected {want} level outputs, got {len(outs)}")
        stacked = outs[0] if want == 1 else T.concat(outs, axis=0)
        grid_logits = self.head(stacked)
        return T.bilinear_upsample(grid_logits, (self.image_size, self.image_size))

    # -- full pass ------------------------------------------------------------

    def __call__(self, prompted: MultiLevelFeatures, raw: MultiLevelFeatures,
                 mask_small: np.ndarray) -> Tensor:
        if self.single_level:
            picks = [(self.blocks[0], prompted.levels[3], raw.levels[3])]
        else:
            picks = [(b, p, r) for b, p, r in
                     zip(self.blocks, prompted.levels, raw.levels)]
        outs = [self.level_block(b, p, self.gate_level(b, r, mask_small))
                for b, p, r in picks]
        return self.fuse_and_classify(outs)


def predict_mask(logits: Tensor, threshold: float = 0.5) -> np.ndarray:
    """Binarize sigmoid probabilities; the boundary itself maps to background."""
    if logits.ndim == 3:
        data = logits.data[0]
    elif logits.ndim == 2:
        data = logits.data
    else:
        raise ShapeMismatch(f"logits must be (1,H,W) or (H,W), got {logits.shape}")
    prob = 1.0 / (1.0 + np.exp(-data))
    return (prob > threshold).astype(np.float64)
