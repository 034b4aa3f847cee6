"""Miniature ViT encoder: frozen random backbone plus trainable adapters.

The backbone (patch projection, positional table, transformer layers) is
seeded, scaled by 1/sqrt(dim), and frozen at construction. Adapters feed
on the high-frequency residue of the input image combined with the patch
embedding; their shared up-projection starts at zero, so a freshly built
encoder computes exactly the frozen backbone forward.

Feature taps: layer indices ceil(num_layers * j / 4) for j = 1..4, i.e.
layers 3/6/9/12 of the default 12-layer stack. Shallower stacks (used by
fast gradient checks) tap with the same rule, which may repeat layers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .fourier import suppress_low_frequencies
from .nn import Conv, Linear, Module, TransformerBlock, map_to_tokens, tokens_to_map
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 12
    num_heads: int = 4
    adapter_dim: int = 16
    hfc_ratio: float = 0.25

    def __post_init__(self):
        s = self.image_size
        if s < 2 or (s & (s - 1)) != 0:
            raise ConfigError(f"image_size must be a power of two, got {s}")
        if s % self.patch_size:
            raise ConfigError(
                f"image_size {s} not divisible by patch_size {self.patch_size}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.adapter_dim < 1:
            raise ConfigError(f"adapter_dim must be >= 1, got {self.adapter_dim}")
        if not 0.0 < self.hfc_ratio < 1.0:
            raise ConfigError(f"hfc_ratio must lie in (0,1), got {self.hfc_ratio}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def level_layers(self) -> tuple[int, int, int, int]:
        return tuple(math.ceil(self.num_layers * j / 4) for j in (1, 2, 3, 4))


@dataclass
class MultiLevelFeatures:
    """Four same-shape (c, h, w) feature maps tapped along the stack."""

    levels: tuple

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeMismatch(f"expected 4 levels, got {len(self.levels)}")
        shapes = {lv.shape for lv in self.levels}
        if len(shapes) != 1:
            raise ShapeMismatch(f"level shapes differ: {sorted(shapes)}")


def extract_hfc(image: Tensor, ratio: float) -> Tensor:
    """High-frequency residue of a (1, H, W) image; constant w.r.t. the graph."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeMismatch(f"extract_hfc expects (1, H, W), got {image.shape}")
    residue = suppress_low_frequencies(image.data[0], ratio)
    return Tensor(residue[None, :, :])


class _Backbone(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c, p = cfg.embed_dim, cfg.patch_size
        self.patch = self.child("patch", Conv(1, c, p, rng, stride=p,
                                              padding="valid", bias=False))
        n = cfg.grid * cfg.grid
        self.pos = self.register("pos", Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(c), (n, c)), requires_grad=True))
        self.layers = [
            self.child(f"layer{i:02d}", TransformerBlock(c, cfg.num_heads, rng,
                                                         zero_out=False))
            for i in range(cfg.num_layers)
        ]


class _Adapters(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c, p, d = cfg.embed_dim, cfg.patch_size, cfg.adapter_dim
        self.hfc_conv = self.child("hfc_conv", Conv(1, c, p, rng, stride=p,
                                                    padding="valid"))
        self.hfc_lin = self.child("hfc_lin", Linear(c, c, rng))
        self.down = [self.child(f"down{i:02d}", Linear(c, d, rng))
                     for i in range(cfg.num_layers)]
        # shared up-projection, zero weights and bias: adapters start as no-ops
        self.up = self.child("up", Linear(d, c, rng, zero=True))


class Encoder(Module):
    """Frozen backbone + adapters; parameter names live under ``encoder.``."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        super().__init__()
        self.cfg = cfg
        self.backbone = self.child("backbone", _Backbone(cfg, stream(seed, "encoder", "backbone")))
        self.backbone.freeze()
        self.adapter = self.child("adapter", _Adapters(cfg, stream(seed, "encoder", "adapter")))

    # -- pieces ------------------------------------------------------------

    def _check_image(self, image: Tensor) -> None:
        want = (1, self.cfg.image_size, self.cfg.image_size)
        if image.shape != want:
            raise ShapeMismatch(f"image shape {image.shape}, config expects {want}")

    def patch_embed(self, image: Tensor) -> Tensor:
        """Patchify + positional table, returned as a (c, h, w) map."""
        self._check_image(image)
        g = self.cfg.grid
        tokens = self._embed_tokens(image)
        return tokens_to_map(tokens, g, g)

    def _embed_tokens(self, image: Tensor) -> Tensor:
        return T.add(map_to_tokens(self.backbone.patch(image)), self.backbone.pos)

    def _adapter_input(self, image: Tensor, pe_tokens: Tensor) -> Tensor:
        hfc = extract_hfc(image, self.cfg.hfc_ratio)
        hfc_tokens = self.adapter.hfc_lin(map_to_tokens(self.adapter.hfc_conv(hfc)))
        return T.add(hfc_tokens, pe_tokens)

    def adapter_forward(self, combined: Tensor, layer: int) -> Tensor:
        """Bottleneck branch for one layer: up(gelu(down_i(hfc + pe)))."""
        return self.adapter.up(T.gelu(self.adapter.down[layer](combined)))

    # -- full passes ---------------------------------------------------------

    def _run(self, image: Tensor, with_adapters: bool) -> MultiLevelFeatures:
        self._check_image(image)
        g = self.cfg.grid
        x = self._embed_tokens(image)
        combined = self._adapter_input(image, x) if with_adapters else None
        taps = self.cfg.level_layers
        levels: list[Tensor | None] = [None] * 4
        for i, layer in enumerate(self.backbone.layers):
            if with_adapters:
                x = T.add(x, self.adapter_forward(combined, i))
            x = layer(x)
            for j, tap in enumerate(taps):
                if tap == i + 1:
                    levels[j] = tokens_to_map(x, g, g)
        return MultiLevelFeatures(tuple(levels))

    def encode(self, image: Tensor) -> MultiLevelFeatures:
        return self._run(image, with_adapters=True)

    def backbone_forward(self, image: Tensor) -> MultiLevelFeatures:
        """Adapter-free pass; the identity reference for a fresh encoder."""
        return self._run(image, with_adapters=False)

    def backbone_hash(self) -> str:
        """SHA-256 over the frozen parameters in sorted name order."""
        digest = hashlib.sha256()
        bb = self.backbone.params()
        for name in sorted(bb):
            digest.update(name.encode("utf-8"))
            digest.update(bb[name].data.tobytes())
        return digest.hexdigest()
