"""Radix-2 FFT on power-of-two grids, centered and unitary.

Forward and inverse both scale by 1/sqrt(HW), so the pair is unitary
(Parseval holds exactly up to rounding) and each is the other's inverse.
The centered convention places the DC bin at (H/2, W/2) by wrapping the
grid by half its extent before and after the transform.
"""

from __future__ import annotations

import numpy as np

_REV_CACHE: dict = {}
_TW_CACHE: dict = {}


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def require_power_of_two(*extents: int) -> None:
    for n in extents:
        if not is_power_of_two(int(n)):
            raise ValueError(f"extent {n} is not a power of two")


def _bit_reversal(n: int) -> np.ndarray:
    perm = _REV_CACHE.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        x = np.arange(n, dtype=np.int64)
        rev = np.zeros(n, dtype=np.int64)
        for _ in range(bits):
            rev = (rev << 1) | (x & 1)
            x >>= 1
        perm = rev
        _REV_CACHE[n] = perm
    return perm


def _twiddle(size: int, inverse: bool) -> np.ndarray:
    key = (size, inverse)
    tw = _TW_CACHE.get(key)
    if tw is None:
        sign = 1.0 if inverse else -1.0
        tw = np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)
        _TW_CACHE[key] = tw
    return tw


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized DFT along the last axis (Cooley-Tukey, iterative)."""
    n = a.shape[-1]
    require_power_of_two(n)
    out = np.ascontiguousarray(a[..., _bit_reversal(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = _twiddle(size, inverse)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(out.shape)
        size *= 2
    return out


def _fft2(x: np.ndarray, inverse: bool) -> np.ndarray:
    y = _fft_last_axis(np.asarray(x, dtype=np.complex128), inverse)
    y = np.swapaxes(_fft_last_axis(np.swapaxes(y, -1, -2), inverse), -1, -2)
    return y


def _shift2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2], x.shape[-1]
    return np.roll(x, (h // 2, w // 2), axis=(-2, -1))


def fft2_centered(x: np.ndarray) -> np.ndarray:
    """Real or complex [..., H, W] -> complex spectrum with DC at (H/2, W/2)."""
    h, w = x.shape[-2], x.shape[-1]
    require_power_of_two(h, w)
    return _shift2(_fft2(_shift2(x), inverse=False)) / np.sqrt(h * w)


def ifft2_centered(k: np.ndarray) -> np.ndarray:
    h, w = k.shape[-2], k.shape[-1]
    require_power_of_two(h, w)
    return _shift2(_fft2(_shift2(k), inverse=True)) / np.sqrt(h * w)
