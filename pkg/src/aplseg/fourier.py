"""Unitary 2-D FFT pair and the centered low-band suppression mask.

Transforms are orthonormally scaled (factor 1/sqrt(h*w) both ways) so
Parseval's identity holds exactly and round-trips are numerically tight.
Spatial extents must be powers of two; the miniature geometry guarantees
this and the check catches config mistakes early.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


def _require_pow2(n: int, label: str) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise ShapeMismatch(f"{label} must be a power of two, got {n}")


def fft2(x: np.ndarray) -> np.ndarray:
    """Unitary forward transform of a real or complex h-by-w array."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"fft2 expects a 2-D array, got shape {x.shape}")
    _require_pow2(x.shape[0], "height")
    _require_pow2(x.shape[1], "width")
    return np.fft.fft2(x, norm="ortho")


def ifft2(s: np.ndarray) -> np.ndarray:
    """Unitary inverse transform; returns a complex array."""
    s = np.asarray(s)
    if s.ndim != 2:
        raise ShapeMismatch(f"ifft2 expects a 2-D array, got shape {s.shape}")
    _require_pow2(s.shape[0], "height")
    _require_pow2(s.shape[1], "width")
    return np.fft.ifft2(s, norm="ortho")


def lowband_mask(h: int, w: int, ratio: float) -> np.ndarray:
    """Boolean mask of the centered low-frequency rectangle (shifted layout).

    True marks coefficients to suppress: those whose distance from the DC
    position is strictly below ratio*extent/2 on both axes.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"band ratio must lie in (0,1), got {ratio}")
    iy = np.abs(np.arange(h) - h // 2)
    ix = np.abs(np.arange(w) - w // 2)
    return (iy[:, None] < ratio * h / 2.0) & (ix[None, :] < ratio * w / 2.0)


def suppress_low_frequencies(x: np.ndarray, ratio: float) -> np.ndarray:
    """Remove the centered low band of a real image; returns the real residue."""
    spec = np.fft.fftshift(fft2(x))
    spec[lowband_mask(*x.shape, ratio)] = 0.0
    return ifft2(np.fft.ifftshift(spec)).real
