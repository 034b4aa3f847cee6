"""Adaptive visual prompt learning.

Support features under the downsampled foreground mask are summarized
into a small set of prompt vectors. When the foreground is large enough,
prompts come from soft clustering seeded inside the mask (farthest-point
placement on the boundary distance field); otherwise a single prompt is
the masked feature average. Prompts are fused with learned tokens by one
self-attention block and injected into the first and last query feature
levels by residual cross-attention.

Everything downstream of feature extraction stays differentiable: the
clustering iterations are plain tensor arithmetic, so gradients reach the
encoder adapters through the support branch.

Feature layout note: public math here uses column-per-pixel matrices
(c x N), matching the mental model of "a bag of feature vectors"; token
sequences entering attention blocks are row-per-token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import tensor as T
from .encoder import MultiLevelFeatures
from .errors import ConfigError, EmptySupportMask, ShapeMismatch
from .nn import CrossAttentionBlock, Module, TransformerBlock, map_to_tokens
from .tensor import Tensor


@dataclass(frozen=True)
class APLConfig:
    a_sp: int = 100         # target foreground pixels per superpixel
    n_max: int = 7          # prompt count cap
    omega: float = 10.0     # spatial-distance downweighting
    iterations: int = 10    # soft clustering rounds
    n_tokens: int = 4       # learned fusion tokens

    def __post_init__(self):
        if self.a_sp < 1 or self.n_max < 1 or self.n_tokens < 1:
            raise ConfigError("a_sp, n_max and n_tokens must be positive")
        if self.omega <= 0:
            raise ConfigError(f"omega must be positive, got {self.omega}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")


@dataclass
class MaskedSupportFeatures:
    """Foreground support features plus where they came from."""

    features: Tensor          # (c, N_m) columns are retained pixels
    coords: np.ndarray        # (2, N_m) normalized (row, col) in [0, 1]
    n_m: int
    mask: np.ndarray          # (h, w) binary grid the pixels were taken from
    pixel_coords: np.ndarray  # (2, N_m) integer grid positions


@dataclass
class VisualPrompts:
    centroids: Tensor              # (c, N_c)
    seed_coords: np.ndarray        # (2, N_c) integer grid positions
    n_c: int
    centroids_aug: np.ndarray | None = None  # final (c+2, N_c) iterate, clustering path


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block-average a binary mask; block means >= 0.5 become foreground."""
    H, W = mask.shape
    h, w = target
    if H % h or W % w:
        raise ShapeMismatch(f"mask {mask.shape} not divisible by target {target}")
    blocks = mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float64)


def compute_n_centroids(n_m: int, a_sp: int, n_max: int) -> int:
    """Adaptive prompt count: one per a_sp foreground pixels, capped."""
    if n_m < 0:
        raise ValueError(f"n_m must be nonnegative, got {n_m}")
    return min(n_m // a_sp, n_max)


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance to the nearest background pixel or image edge."""
    padded = np.pad(mask.astype(bool), 1, constant_values=False)
    return distance_transform_edt(padded)[1:-1, 1:-1]


def init_centroids_maskslic(mask: np.ndarray, n_c: int) -> np.ndarray:
    """Greedy farthest-point seeds inside the mask; returns (2, n_c) ints.

    Seed 1 sits at the most interior pixel; later seeds maximize the
    smaller of (distance to nearest chosen seed, distance to boundary).
    Ordering of foreground pixels is row-major, which fixes tie-breaks.
    """
    fg = np.argwhere(mask > 0.5)  # (N, 2), row-major order
    if len(fg) < n_c:
        raise EmptySupportMask(
            f"cannot place {n_c} seeds in a mask with {len(fg)} foreground pixels")
    bdist = boundary_distance(mask)[fg[:, 0], fg[:, 1]]
    # np.argmax takes the first maximum, i.e. the smallest linear index
    chosen = [int(np.argmax(bdist))]
    while len(chosen) < n_c:
        diffs = fg[:, None, :] - fg[chosen][None, :, :]
        seed_dist = np.sqrt((diffs ** 2).sum(axis=2)).min(axis=1)
        score = np.minimum(seed_dist, bdist)
        chosen.append(int(np.argmax(score)))
    return fg[chosen].T.copy()


def masked_features(fmap: Tensor, mask: np.ndarray) -> MaskedSupportFeatures:
    """Keep feature columns under the foreground of an (h, w) mask."""
    c, h, w = fmap.shape
    if mask.shape != (h, w):
        raise ShapeMismatch(f"mask {mask.shape} does not match feature grid {(h, w)}")
    fg = np.argwhere(mask > 0.5)
    if len(fg) == 0:
        raise EmptySupportMask("support mask has no foreground pixels")
    flat_idx = fg[:, 0] * w + fg[:, 1]
    cols = T.take_cols(T.reshape(fmap, (c, h * w)), flat_idx)
    denom = np.array([max(h - 1, 1), max(w - 1, 1)], dtype=np.float64)
    coords = fg.T.astype(np.float64) / denom[:, None]
    return MaskedSupportFeatures(features=cols, coords=coords, n_m=len(fg),
                                 mask=mask.copy(), pixel_coords=fg.T.copy())


def augment(features: Tensor, coords: np.ndarray, omega: float) -> Tensor:
    """Append coords/omega rows so Euclidean distance on the result equals
    the combined feature+spatial distance sqrt(d_f^2 + (d_s/omega)^2)."""
    if omega <= 0:
        raise ConfigError(f"omega must be positive, got {omega}")
    if coords.shape != (2, features.shape[1]):
        raise ShapeMismatch(
            f"coords {coords.shape} do not match features {features.shape}")
    return T.concat([features, Tensor(coords / omega)], axis=0)


def soft_assign(f_aug: Tensor, centroids: Tensor) -> Tensor:
    """Similarity of every pixel to every centroid: exp(-squared distance)."""
    d, n_m = f_aug.shape
    d2, n_c = centroids.shape
    if d != d2:
        raise ShapeMismatch(f"feature dim {d} != centroid dim {d2}")
    cols = []
    for i in range(n_c):
        ci = T.slice_axis(centroids, 1, i, i + 1)           # (d, 1)
        diff = T.sub(f_aug, T.tile_cols(T.reshape(ci, (d,)), n_m))
        sq = T.sum_axis(T.mul(diff, diff), axis=0)          # (n_m,)
        cols.append(T.reshape(T.exp(T.neg(sq)), (n_m, 1)))
    return T.concat(cols, axis=1)


def update_centroids(s: Tensor, f_aug: Tensor) -> Tensor:
    """Similarity-weighted means of the augmented features."""
    weight_sums = T.sum_axis(s, axis=0)                     # (n_c,)
    assert np.all(weight_sums.data > 0.0), "degenerate all-zero similarity column"
    numer = T.matmul(f_aug, s)                              # (d, n_c)
    return T.div(numer, T.tile_rows(weight_sums, f_aug.shape[0]))


def masked_average_pooling(fmap: Tensor, mask: np.ndarray) -> Tensor:
    """Mean foreground feature vector, shape (c, 1)."""
    msf = masked_features(fmap, mask)
    mean = T.mul(T.sum_axis(msf.features, axis=1), 1.0 / msf.n_m)
    return T.reshape(mean, (fmap.shape[0], 1))


def cluster(msf: MaskedSupportFeatures, cfg: APLConfig,
            trace: list | None = None) -> VisualPrompts:
    """Summarize masked support features into 1..n_max prompt vectors.

    Small foregrounds fall back to the masked average; otherwise seeds are
    placed by farthest-point, features gain coordinate rows, and a fixed
    number of assign/update rounds runs. ``trace`` (if given) collects
    (iteration, augmented-centroid array) snapshots.
    """
    if msf.n_m == 0:
        raise EmptySupportMask("support mask has no foreground pixels")
    c = msf.features.shape[0]
    n_c = compute_n_centroids(msf.n_m, cfg.a_sp, cfg.n_max)
    interior = init_centroids_maskslic(msf.mask, 1)
    if n_c <= 1:
        mean = T.mul(T.sum_axis(msf.features, axis=1), 1.0 / msf.n_m)
        return VisualPrompts(centroids=T.reshape(mean, (c, 1)),
                             seed_coords=interior, n_c=1)

    seeds = init_centroids_maskslic(msf.mask, n_c)
    f_aug = augment(msf.features, msf.coords, cfg.omega)
    col_of = {(int(r), int(q)): j for j, (r, q) in enumerate(msf.pixel_coords.T)}
    seed_cols = [col_of[(int(r), int(q))] for r, q in seeds.T]
    centroids = T.take_cols(f_aug, seed_cols)
    for it in range(cfg.iterations):
        s = soft_assign(f_aug, centroids)
        centroids = update_centroids(s, f_aug)
        if trace is not None:
            trace.append((it, centroids.data.copy()))
    stripped = T.slice_axis(centroids, 0, 0, c)
    return VisualPrompts(centroids=stripped, seed_coords=seeds, n_c=n_c,
                         centroids_aug=centroids.data.copy())


def sinusoidal_embedding(pixel_coords: np.ndarray, grid: tuple[int, int],
                         dim: int) -> np.ndarray:
    """Fixed positional code for (2, N) integer coordinates, shape (dim, N).

    Half the channels encode the row, half the column, each as interleaved
    sine/cosine at geometrically spaced frequencies on [0, 1] coordinates.
    """
    if dim % 4:
        raise ConfigError(f"sinusoidal embedding needs dim divisible by 4, got {dim}")
    n = pixel_coords.shape[1]
    quarter = dim // 4
    freqs = (2.0 ** np.arange(quarter)) * np.pi
    out = np.zeros((dim, n))
    for axis in range(2):
        x = pixel_coords[axis] / max(grid[axis] - 1, 1)
        ang = freqs[:, None] * x[None, :]
        base = 2 * quarter * axis
        out[base:base + quarter] = np.sin(ang)
        out[base + quarter:base + 2 * quarter] = np.cos(ang)
    return out


def sample_point_prompts(msf: MaskedSupportFeatures, n_points: int,
                         rng: np.random.Generator, dim: int) -> VisualPrompts:
    """Point-style baseline: embed sampled foreground positions, no features."""
    replace = msf.n_m < n_points
    picks = np.sort(rng.choice(msf.n_m, size=n_points, replace=replace))
    coords = msf.pixel_coords[:, picks]
    h = int(msf.mask.shape[0])
    w = int(msf.mask.shape[1])
    emb = sinusoidal_embedding(coords, (h, w), dim)
    return VisualPrompts(centroids=Tensor(emb), seed_coords=coords, n_c=n_points)


class PromptEncoder(Module):
    """Learned tokens + fusion self-attention + per-level injection."""

    def __init__(self, dim: int, cfg: APLConfig, heads: int,
                 rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.tokens = self.register("tokens", Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(dim), (cfg.n_tokens, dim)),
            requires_grad=True))
        self.fuse = self.child("fuse", TransformerBlock(dim, heads, rng, zero_out=True))
        self.inject1 = self.child("inject1", CrossAttentionBlock(dim, heads, rng,
                                                                 zero_out=True))
        self.inject4 = self.child("inject4", CrossAttentionBlock(dim, heads, rng,
                                                                 zero_out=True))

    def fuse_prompts(self, prompts: Tensor) -> Tensor:
        """Concatenate learned tokens with (c, N_c) prompts; returns rows."""
        seq = T.concat([self.tokens, T.permute(prompts, (1, 0))], axis=0)
        return self.fuse(seq)

    def inject_prompts(self, q_feats: MultiLevelFeatures, fused: Tensor) -> MultiLevelFeatures:
        """Cross-attend levels 1 and 4 into the fused sequence; 2, 3 pass through."""
        out = list(q_feats.levels)
        for idx, block in ((0, self.inject1), (3, self.inject4)):
            c, h, w = out[idx].shape
            tokens = map_to_tokens(out[idx])
            prompted = block(tokens, fused)
            out[idx] = T.reshape(T.permute(prompted, (1, 0)), (c, h, w))
        return MultiLevelFeatures(tuple(out))
