"""End-to-end segmentation model: encoder -> prompts -> decoder.

The forward pass is split into stages (features, prompts, injection,
decoding) so callers that probe gradients numerically can cache upstream
stage outputs and re-run only what a perturbed parameter can affect.

Prompt-strategy and decoder variants are fixed at construction:

* ``apl``           adaptive clustering prompts (the full method)
* ``one_prototype`` single masked-average prompt
* ``point_prompt``  sampled foreground positions, sinusoidally embedded
* ``nope``          no prompt encoder at all; decoder sees raw features
* decoder ``mlmd`` (four levels) or ``single_level`` (deepest level only)
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .decoder import Decoder, predict_mask
from .encoder import Encoder, MultiLevelFeatures
from .errors import CheckpointError, ShapeMismatch
from .nn import Module
from .prompts import (PromptEncoder, VisualPrompts, cluster, downsample_mask,
                      masked_average_pooling, masked_features,
                      sample_point_prompts)
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class AblationMode:
    prompt_strategy: str = "apl"
    decoder: str = "mlmd"


class SegModel(Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_cfg = cfg.encoder_config()
        self.apl_cfg = cfg.apl_config()
        self.ablation = AblationMode(cfg.prompt_strategy, cfg.decoder)
        self.encoder = self.child("encoder", Encoder(self.enc_cfg, cfg.seed))
        if self.ablation.prompt_strategy != "nope":
            self.prompt = self.child("prompt", PromptEncoder(
                self.enc_cfg.embed_dim, self.apl_cfg, self.enc_cfg.num_heads,
                stream(cfg.seed, "prompt")))
        else:
            self.prompt = None
        self.decoder = self.child("decoder", Decoder(
            self.enc_cfg.embed_dim, self.enc_cfg.num_heads, self.enc_cfg.image_size,
            stream(cfg.seed, "decoder"),
            single_level=(self.ablation.decoder == "single_level")))

    # -- staged forward -------------------------------------------------------

    def _as_input(self, image: np.ndarray) -> Tensor:
        s = self.enc_cfg.image_size
        if image.shape != (s, s):
            raise ShapeMismatch(f"image shape {image.shape}, model expects {(s, s)}")
        return Tensor(image[None, :, :])

    def support_grid_mask(self, support_mask: np.ndarray) -> np.ndarray:
        g = self.enc_cfg.grid
        return downsample_mask(support_mask, (g, g))

    def encode_image(self, image: np.ndarray) -> MultiLevelFeatures:
        return self.encoder.encode(self._as_input(image))

    def compute_prompts(self, s_feats: MultiLevelFeatures,
                        mask_small: np.ndarray) -> VisualPrompts | None:
        """Strategy-dependent prompt extraction from deepest support features."""
        strat = self.ablation.prompt_strategy
        if strat == "nope":
            return None
        top = s_feats.levels[3]
        if strat == "one_prototype":
            proto = masked_average_pooling(top, mask_small)
            return VisualPrompts(centroids=proto, seed_coords=np.zeros((2, 1), dtype=int),
                                 n_c=1)
        msf = masked_features(top, mask_small)
        if strat == "point_prompt":
            rng = stream(self.cfg.seed, "points", zlib.crc32(mask_small.tobytes()))
            return sample_point_prompts(msf, self.apl_cfg.n_max, rng,
                                        self.enc_cfg.embed_dim)
        return cluster(msf, self.apl_cfg)

    def apply_prompts(self, q_feats: MultiLevelFeatures,
                      prompts: VisualPrompts | None) -> MultiLevelFeatures:
        if prompts is None or self.prompt is None:
            return q_feats
        fused = self.prompt.fuse_prompts(prompts.centroids)
        return self.prompt.inject_prompts(q_feats, fused)

    def decode(self, prompted: MultiLevelFeatures, raw: MultiLevelFeatures,
               mask_small: np.ndarray) -> Tensor:
        return self.decoder(prompted, raw, mask_small)

    # -- public entry points -----------------------------------------------------

    def forward(self, support_image: np.ndarray, support_mask: np.ndarray,
                query_image: np.ndarray) -> Tensor:
        """Logits (1, H, W) for the query, guided by one labeled support."""
        mask_small = self.support_grid_mask(support_mask)
        s_feats = self.encode_image(support_image)
        q_feats = self.encode_image(query_image)
        prompts = self.compute_prompts(s_feats, mask_small)
        prompted = self.apply_prompts(q_feats, prompts)
        return self.decode(prompted, q_feats, mask_small)

    def predict(self, support_image: np.ndarray, support_mask: np.ndarray,
                query_image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return predict_mask(self.forward(support_image, support_mask, query_image),
                            threshold)

    # -- persistence ----------------------------------------------------------------

    def backbone_hash(self) -> str:
        return self.encoder.backbone_hash()

    def save(self, path, train_classes: tuple[str, ...] = ()) -> None:
        arrays = {name: p.data for name, p in self.params().items()}
        meta = {"config": self.cfg.serialize(),
                "train_classes": ",".join(train_classes)}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> tuple["SegModel", dict[str, str]]:
        arrays, meta = load_checkpoint(path)
        if "config" not in meta:
            raise CheckpointError(f"{path}: checkpoint lacks embedded config")
        model = cls(parse_config(meta["config"]))
        model.load_state(arrays)
        return model, meta
