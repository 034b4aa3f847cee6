"""FFT pair and low-band suppression: oracle comparisons and invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aplseg.errors import ShapeMismatch
from aplseg.fourier import fft2, ifft2, lowband_mask, suppress_low_frequencies


def rand(shape, seed, scale=1.0):
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.normal(0.0, scale, size=shape)


def naive_dft2(x):
    """Direct O(n^4) unitary DFT, coded independently of any FFT routine."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for m in range(h):
                for n in range(w):
                    ang = -2.0 * math.pi * (u * m / h + v * n / w)
                    acc += x[m, n] * complex(math.cos(ang), math.sin(ang))
            out[u, v] = acc / math.sqrt(h * w)
    return out


def test_fft2_matches_naive_dft_oracle():
    x = rand((8, 8), 1)
    assert np.max(np.abs(fft2(x) - naive_dft2(x))) < 1e-9


def test_constant_image_is_dc_only():
    c = 3.7
    x = np.full((16, 8), c)
    spec = fft2(x)
    assert abs(spec[0, 0] - c * math.sqrt(16 * 8)) < 1e-9
    spec[0, 0] = 0.0
    assert np.max(np.abs(spec)) < 1e-9


def test_roundtrip_identity():
    x = rand((32, 32), 2)
    back = ifft2(fft2(x))
    assert np.max(np.abs(back - x)) < 1e-9
    assert np.max(np.abs(back.imag)) < 1e-12


def test_parseval_energy_conservation():
    x = rand((16, 16), 3)
    e_spatial = float((x ** 2).sum())
    e_spectral = float((np.abs(fft2(x)) ** 2).sum())
    assert abs(e_spatial - e_spectral) < 1e-9 * e_spatial


def test_rejects_non_power_of_two():
    with pytest.raises(ShapeMismatch):
        fft2(np.zeros((12, 16)))
    with pytest.raises(ShapeMismatch):
        fft2(np.zeros((16, 10)))
    with pytest.raises(ShapeMismatch):
        ifft2(np.zeros((7, 8), dtype=complex))


def test_rejects_wrong_rank():
    with pytest.raises(ShapeMismatch):
        fft2(np.zeros((4, 4, 4)))


# -- low-band suppression ---------------------------------------------------------


def test_lowband_mask_counts():
    m = lowband_mask(64, 64, 0.25)
    # strict |i-32| < 8 keeps offsets -7..7 -> 15 indices per axis
    assert m.sum() == 15 * 15
    assert m[32, 32]  # DC suppressed
    assert not m[0, 0]  # Nyquist corner kept


def test_lowband_mask_ratio_validation():
    with pytest.raises(ValueError):
        lowband_mask(8, 8, 0.0)
    with pytest.raises(ValueError):
        lowband_mask(8, 8, 1.0)


def test_suppress_constant_image_to_zero():
    x = np.full((32, 32), 0.83)
    out = suppress_low_frequencies(x, 0.25)
    assert np.max(np.abs(out)) < 1e-9


def test_suppress_is_linear():
    a = rand((16, 16), 4)
    b = rand((16, 16), 5)
    lhs = suppress_low_frequencies(a + b, 0.25)
    rhs = suppress_low_frequencies(a, 0.25) + suppress_low_frequencies(b, 0.25)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_suppress_is_idempotent():
    x = rand((32, 32), 6)
    once = suppress_low_frequencies(x, 0.25)
    twice = suppress_low_frequencies(once, 0.25)
    assert np.max(np.abs(once - twice)) < 1e-9


def test_checkerboard_passes_untouched():
    # the alternating pattern concentrates all energy at the Nyquist
    # frequency pair, far outside the suppressed band; verify the band
    # placement against the naive DFT oracle before asserting passthrough
    n = 8
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    board = ((-1.0) ** (ii + jj))
    spec = np.fft.fftshift(naive_dft2(board))
    band = lowband_mask(n, n, 0.25)
    assert np.max(np.abs(spec[band])) < 1e-9
    out = suppress_low_frequencies(board, 0.25)
    assert np.max(np.abs(out - board)) < 1e-9


def test_suppress_output_is_real_valued():
    x = rand((16, 16), 7)
    out = suppress_low_frequencies(x, 0.5)
    assert out.dtype == np.float64


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.integers(0, 2 ** 32 - 1))
def test_roundtrip_property(n, seed):
    x = rand((n, n), seed)
    assert np.max(np.abs(ifft2(fft2(x)).real - x)) < 1e-9
