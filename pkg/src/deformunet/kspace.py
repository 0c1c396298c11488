"""Frequency-domain simulation of undersampled MRI acquisition.

Provides the centered unitary FFT pair on complex grids, the two
sampling-mask families (Gaussian-weighted full columns and golden-angle
radial spokes), and the zero-filled reconstruction input
x_u = |IFFT(mask * FFT(x))|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fourier
from .engine import ShapeError, Tensor, get_dtype, load_array, save_array
from .fileio import write_pgm

GOLDEN_ANGLE_DEG = 111.246


@dataclass
class ComplexGrid:
    """2-D complex-valued frequency/image grid stored as split re/im planes."""

    height: int
    width: int
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.size != self.height * self.width or im.size != re.size:
            raise ShapeError("ComplexGrid: re/im length must equal height*width")
        self.re = re.reshape(self.height, self.width)
        self.im = im.reshape(self.height, self.width)

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexGrid":
        z = np.asarray(z)
        if z.ndim != 2:
            raise ShapeError(f"ComplexGrid.from_complex wants 2-D, got {z.shape}")
        return cls(z.shape[0], z.shape[1], z.real.copy(), z.imag.copy())

    @classmethod
    def from_real(cls, x: np.ndarray) -> "ComplexGrid":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"ComplexGrid.from_real wants 2-D, got {x.shape}")
        return cls(x.shape[0], x.shape[1], x.copy(), np.zeros_like(x))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)


def fft2d(grid: ComplexGrid) -> ComplexGrid:
    """Centered unitary forward FFT; extents must be powers of two."""
    fourier.require_power_of_two(grid.height, grid.width)
    return ComplexGrid.from_complex(fourier.fft2_centered(grid.to_complex()))


def ifft2d(grid: ComplexGrid) -> ComplexGrid:
    fourier.require_power_of_two(grid.height, grid.width)
    return ComplexGrid.from_complex(fourier.ifft2_centered(grid.to_complex()))


@dataclass
class Mask:
    """Binary k-space sampling pattern."""

    height: int
    width: int
    kept: np.ndarray
    kind: str
    target_ratio: float
    seed: int
    center_fraction: float = 0.0
    spokes: int = field(default=0)

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=np.uint8).reshape(self.height, self.width)

    @property
    def achieved_ratio(self) -> float:
        return float(self.kept.sum()) / (self.height * self.width)

    def save(self, path) -> None:
        save_array(path, self.kept.astype(np.float32))

    def save_pgm(self, path) -> None:
        write_pgm(path, self.kept * 255)

    @classmethod
    def load(cls, path, kind: str = "loaded", target_ratio: float = 0.0, seed: int = -1) -> "Mask":
        kept = load_array(path)
        if kept.ndim != 2:
            raise ShapeError(f"mask file holds a rank-{kept.ndim} array, expected rank 2")
        m = cls(kept.shape[0], kept.shape[1], (kept > 0.5).astype(np.uint8), kind, target_ratio, seed)
        if target_ratio == 0.0:
            m.target_ratio = m.achieved_ratio
        return m


def _check_ratio(ratio: float) -> None:
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"sampling ratio must lie in (0, 1], got {ratio}")


def gaussian1d_mask(h: int, w: int, ratio: float, center_fraction: float = 0.08,
                    seed: int = 0) -> Mask:
    """Keep whole columns: a guaranteed central band plus Gaussian-weighted draws.

    Exactly round(ratio*w) columns are kept. The central round(center_fraction*w)
    columns are always kept; the rest are drawn without replacement with
    probability proportional to a Gaussian pdf centered at w/2 with sigma = w/6.
    """
    _check_ratio(ratio)
    if not (0.0 <= center_fraction < ratio):
        raise ValueError(f"center_fraction must lie in [0, ratio), got {center_fraction}")
    n_total = int(round(ratio * w))
    n_center = min(int(round(center_fraction * w)), n_total)
    start = (w - n_center) // 2
    center_cols = np.arange(start, start + n_center)

    pool = np.setdiff1d(np.arange(w), center_cols)
    sigma = w / 6.0
    weights = np.exp(-0.5 * ((pool - w / 2.0) / sigma) ** 2)
    weights /= weights.sum()
    rng = np.random.Generator(np.random.PCG64(seed))
    n_draw = n_total - n_center
    drawn = rng.choice(pool, size=n_draw, replace=False, p=weights) if n_draw else np.empty(0, np.int64)

    kept = np.zeros((h, w), dtype=np.uint8)
    kept[:, center_cols] = 1
    kept[:, drawn.astype(np.int64)] = 1
    return Mask(h, w, kept, "gaussian1d", ratio, seed, center_fraction=center_fraction)


def radial_mask(h: int, w: int, ratio: float, seed: int = 0) -> Mask:
    """Golden-angle spokes through the k-space center.

    Each spoke is a full line: both half-spokes are rasterized from the
    center cell outward with mirrored integer offsets, so the pattern is
    point-symmetric about the center by construction. Spokes are added
    until the kept-cell count first reaches ratio*h*w.
    """
    _check_ratio(ratio)
    rng = np.random.Generator(np.random.PCG64(seed))
    theta0 = rng.uniform(0.0, 2.0 * math.pi)
    step = math.radians(GOLDEN_ANGLE_DEG)
    cy, cx = h // 2, w // 2
    target = ratio * h * w
    radius = math.hypot(h / 2.0, w / 2.0)
    t = np.arange(0.0, radius + 0.5, 0.5)

    kept = np.zeros((h, w), dtype=np.uint8)
    spokes = 0
    while kept.sum() < target:
        theta = theta0 + spokes * step
        dy = np.floor(t * math.sin(theta) + 0.5).astype(np.int64)
        dx = np.floor(t * math.cos(theta) + 0.5).astype(np.int64)
        for sy, sx in ((dy, dx), (-dy, -dx)):
            yy = cy + sy
            xx = cx + sx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            kept[yy[ok], xx[ok]] = 1
        spokes += 1
    mask = Mask(h, w, kept, "radial", ratio, seed)
    mask.spokes = spokes
    return mask


def undersample(x, mask: Mask) -> Tensor:
    """Zero-filled input |IFFT(mask * FFT(x))| for a real image in [0,1]."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3 or data.shape[0] != 1:
        raise ShapeError(f"undersample wants a [1,H,W] image, got {data.shape}")
    if data.shape[1] != mask.height or data.shape[2] != mask.width:
        raise ShapeError(f"image {data.shape[1:]} does not match mask "
                         f"{(mask.height, mask.width)}")
    spec = fourier.fft2_centered(data[0].astype(np.float64))
    spec *= mask.kept
    mag = np.ascontiguousarray(np.abs(fourier.ifft2_centered(spec)))
    return Tensor(mag[None].astype(get_dtype()))
