"""Datasets, episode sampling, synthetic imagery, and PNG I/O.

On-disk layout: ``root/<class>/images/<name>.png`` paired with
``root/<class>/masks/<name>.png``. Images are 8-bit grayscale mapped to
[0, 1]; masks are strictly {0, 255} mapped to {0, 1}.

The synthetic generator draws elliptical plateau blobs on a flat base
surface and corrupts the height map with Gaussian noise, per-row scanline
offsets, and a signed shadow equal to the horizontal forward difference
of the clean surface. Each named class gets its own blob morphology so
held-out classes look genuinely different from training ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (ConfigError, DatasetError, DimensionMismatch, EmptyDataset,
                     GenerationFailed, InvalidMaskValue, MissingMask,
                     SplitViolation, UnreadableFile)
from .rng import stream


# -- PNG I/O -----------------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """8-bit grayscale PNG -> float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise UnreadableFile(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_image(path: str | Path, arr: np.ndarray) -> None:
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError(f"image values outside [0,1]: [{arr.min()}, {arr.max()}]")
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Binary PNG with values {0, 255} -> float array with values {0, 1}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise UnreadableFile(f"cannot read mask {path}: {exc}") from exc
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise InvalidMaskValue(f"mask {path} contains non-binary value {bad[0]}")
    return (arr == 255).astype(np.float64)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    vals = np.unique(mask)
    if not np.all(np.isin(vals, [0.0, 1.0])):
        raise InvalidMaskValue(f"mask values must be 0/1, got {vals[:5]}")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


# -- dataset ----------------------------------------------------------------------


@dataclass
class Dataset:
    """Class name -> list of (image path, mask path), validated on load."""

    classes: dict[str, list[tuple[Path, Path]]]

    def class_names(self) -> list[str]:
        return sorted(self.classes)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} is not a directory")
    classes: dict[str, list[tuple[Path, Path]]] = {}
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
        img_dir = cdir / "images"
        mask_dir = cdir / "masks"
        if not img_dir.is_dir():
            raise EmptyDataset(f"class {cdir} has no images/ directory")
        pairs: list[tuple[Path, Path]] = []
        for img_path in sorted(img_dir.glob("*.png")):
            mask_path = mask_dir / img_path.name
            if not mask_path.is_file():
                raise MissingMask(f"no mask for image {img_path}: expected {mask_path}")
            try:
                with Image.open(img_path) as im:
                    img_size = im.size
                with Image.open(mask_path) as mm:
                    mask_size = mm.size
            except OSError as exc:
                raise UnreadableFile(f"cannot open {img_path} / {mask_path}: {exc}") from exc
            if img_size != mask_size:
                raise DimensionMismatch(
                    f"image {img_path} is {img_size} but mask {mask_path} is {mask_size}")
            pairs.append((img_path, mask_path))
        if not pairs:
            raise EmptyDataset(f"class {cdir.name} has no image/mask pairs")
        classes[cdir.name] = pairs
    if not classes:
        raise EmptyDataset(f"no class directories under {root}")
    return Dataset(classes)


# -- splits -------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_classes: tuple[str, ...]
    test_classes: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise SplitViolation(f"classes in both splits: {sorted(overlap)}")
        if not self.train_classes or not self.test_classes:
            raise ConfigError("both train and test splits must be non-empty")


def parse_split(text: str) -> SplitSpec:
    """Line format: ``train:<class>`` or ``test:<class>``; # comments allowed."""
    train: list[str] = []
    test: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("train:"):
            train.append(line[len("train:"):].strip())
        elif line.startswith("test:"):
            test.append(line[len("test:"):].strip())
        else:
            raise ConfigError(f"split line {lineno}: expected train:/test: prefix, got {raw!r}")
    return SplitSpec(tuple(train), tuple(test))


# -- episodes ------------------------------------------------------------------------


@dataclass
class Episode:
    """One few-shot task; query_gt is for scoring only, never for the model."""

    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_gt: np.ndarray
    class_name: str


def sample_episode(ds: Dataset, classes: tuple[str, ...] | list[str],
                   rng: np.random.Generator) -> Episode:
    """Uniform class pick, then support/query drawn without replacement."""
    names = sorted(classes)
    missing = [n for n in names if n not in ds.classes]
    if missing:
        raise DatasetError(f"classes not in dataset: {missing}")
    if not names:
        raise DatasetError("no classes to sample from")
    cname = names[int(rng.integers(len(names)))]
    pairs = ds.classes[cname]
    if len(pairs) < 2:
        raise DatasetError(f"class {cname} needs >= 2 samples, has {len(pairs)}")
    i, j = rng.choice(len(pairs), size=2, replace=False)
    s_img, s_mask = pairs[int(i)]
    q_img, q_mask = pairs[int(j)]
    return Episode(support_image=read_image(s_img), support_mask=read_mask(s_mask),
                   query_image=read_image(q_img), query_gt=read_mask(q_mask),
                   class_name=cname)


# -- synthetic generator ----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    base_level: float = 0.2
    noise: float = 0.02
    scanline: float = 0.01
    shadow: float = 0.08
    max_attempts: int = 100

    def __post_init__(self):
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        for nm in ("noise", "scanline", "shadow"):
            if getattr(self, nm) < 0:
                raise ConfigError(f"{nm} must be nonnegative")


@dataclass(frozen=True)
class ClassParams:
    """Blob morphology for one synthetic material."""

    name: str
    blob_count: tuple[int, int] = (1, 2)
    radius: tuple[float, float] = (10.0, 14.0)   # semi-minor axis, px at size 64
    aspect: tuple[float, float] = (1.0, 1.6)     # semi-major / semi-minor
    height: tuple[float, float] = (0.55, 0.75)   # plateau surface level
    threshold: float = 0.5                       # bump cut defining the support


def default_class_params() -> dict[str, ClassParams]:
    """Five stock materials with visibly different blob statistics.

    All classes protrude above the substrate so the foreground cue
    (bright = feature) is consistent across the whole class set; classes
    differ in blob count, size and elongation rather than polarity.
    """
    specs = [
        ClassParams("grains", blob_count=(3, 5), radius=(8.0, 9.5),
                    aspect=(1.0, 1.5), height=(0.6, 0.9)),
        ClassParams("islands", blob_count=(2, 3), radius=(9.0, 12.0),
                    aspect=(1.0, 1.3), height=(0.65, 0.9)),
        ClassParams("dots", blob_count=(5, 8), radius=(4.5, 6.0),
                    aspect=(1.0, 1.2), height=(0.6, 0.9)),
        ClassParams("ridges", blob_count=(2, 3), radius=(8.0, 9.0),
                    aspect=(2.4, 3.2), height=(0.6, 0.9)),
        ClassParams("terraces", blob_count=(1, 2), radius=(14.0, 18.0),
                    aspect=(1.2, 1.8), height=(0.6, 0.85)),
    ]
    return {cp.name: cp for cp in specs}


def _draw_blobs(size: int, cp: ClassParams, base: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample plateau ellipses; returns (surface height map, union mask).

    The surface starts at the base level and each blob shifts its support
    by (height - base), so single blobs sit exactly at their height and
    overlaps stack.
    """
    scale = size / 64.0
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    surface = np.full((size, size), base)
    mask = np.zeros((size, size))
    n = int(rng.integers(cp.blob_count[0], cp.blob_count[1] + 1))
    cut = np.log(1.0 / cp.threshold)  # bump >= threshold <=> ellipse coord <= 1
    for _ in range(n):
        b = rng.uniform(*cp.radius) * scale
        a = b * rng.uniform(*cp.aspect)
        h = rng.uniform(*cp.height)
        theta = rng.uniform(0.0, np.pi)
        margin = min(a + 1.0, size / 2 - 1)
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        bump = np.exp(-cut * ((u / a) ** 2 + (v / b) ** 2))
        support = bump >= cp.threshold
        surface += (h - base) * support
        mask = np.maximum(mask, support.astype(np.float64))
    return surface, mask


def shadow_term(elevation: np.ndarray, strength: float) -> np.ndarray:
    """Signed horizontal forward difference of the surface, zero last column."""
    out = np.zeros_like(elevation)
    out[:, :-1] = elevation[:, 1:] - elevation[:, :-1]
    return strength * out


def generate_synthetic(cfg: SyntheticConfig, cp: ClassParams,
                       seed: int, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; bit-deterministic in (cfg, cp, seed, index)."""
    rng = stream(seed, "synthetic", cp.name, index)
    size = cfg.image_size
    for _ in range(cfg.max_attempts):
        surface, mask = _draw_blobs(size, cp, cfg.base_level, rng)
        frac = mask.mean()
        if frac == 0.0 or frac >= 0.9:
            continue
        image = surface + shadow_term(surface, cfg.shadow)
        if cfg.noise:
            image = image + rng.normal(0.0, cfg.noise, size=(size, size))
        if cfg.scanline:
            image = image + rng.normal(0.0, cfg.scanline, size=size)[:, None]
        span = image.max() - image.min()
        if span < 1e-9:
            continue
        image = (image - image.min()) / span
        return image, mask
    raise GenerationFailed(
        f"no valid sample for class {cp.name} after {cfg.max_attempts} attempts")


def write_synthetic_dataset(root: str | Path, class_params: list[ClassParams],
                            per_class: int, cfg: SyntheticConfig,
                            seed: int) -> dict[str, int]:
    """Materialize the on-disk layout; returns per-class pair counts."""
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    root = Path(root)
    counts: dict[str, int] = {}
    for cp in class_params:
        img_dir = root / cp.name / "images"
        mask_dir = root / cp.name / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            image, mask = generate_synthetic(cfg, cp, seed, index=i)
            write_image(img_dir / f"{i:03d}.png", image)
            write_mask(mask_dir / f"{i:03d}.png", mask)
        counts[cp.name] = per_class
    return counts
