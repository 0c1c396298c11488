"""Frequency-domain transforms, sampling masks, and zero-filled inputs."""

import numpy as np
import pytest

from deformunet import fourier, kspace
from deformunet.engine import ShapeError

RNG = np.random.default_rng


# ----------------------------------------------------------------------
# FFT pair
# ----------------------------------------------------------------------

def test_fft_matches_numpy_oracle():
    rng = RNG(0)
    for shape in ((8, 8), (16, 4), (64, 64)):
        z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        mine = fourier.fft2_centered(z)
        ref = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(z), norm="ortho"))
        assert np.abs(mine - ref).max() < 1e-12
        mine_i = fourier.ifft2_centered(z)
        ref_i = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(z), norm="ortho"))
        assert np.abs(mine_i - ref_i).max() < 1e-12


def test_fft_roundtrip_identity():
    rng = RNG(1)
    z = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    back = fourier.ifft2_centered(fourier.fft2_centered(z))
    assert np.abs(back - z).max() <= 1e-10


def test_fft_constant_image_dc_only():
    g = kspace.ComplexGrid.from_real(np.ones((4, 4)))
    spec = kspace.fft2d(g)
    z = spec.to_complex()
    assert abs(z[2, 2] - 4.0) < 1e-12  # sqrt(16) at the center bin
    z[2, 2] = 0.0
    assert np.abs(z).max() < 1e-12


def test_fft_parseval():
    rng = RNG(2)
    x = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    spec = fourier.fft2_centered(x)
    e1 = np.sum(np.abs(x) ** 2)
    e2 = np.sum(np.abs(spec) ** 2)
    assert abs(e1 - e2) / e1 <= 1e-10


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        fourier.fft2_centered(np.zeros((6, 8)))
    with pytest.raises(ValueError):
        kspace.fft2d(kspace.ComplexGrid.from_real(np.zeros((8, 12))))


def test_complex_grid_invariant():
    with pytest.raises(ShapeError):
        kspace.ComplexGrid(4, 4, np.zeros(12), np.zeros(16))


# ----------------------------------------------------------------------
# Gaussian column mask
# ----------------------------------------------------------------------

def test_gaussian_mask_column_count_exact():
    m = kspace.gaussian1d_mask(256, 256, 0.30, seed=0)
    assert m.kept[0].sum() == 77  # round(0.30 * 256)
    assert m.achieved_ratio == 77 / 256


def test_gaussian_mask_full_ratio_all_ones():
    m = kspace.gaussian1d_mask(16, 16, 1.0, center_fraction=0.1, seed=0)
    assert m.kept.all()


def test_gaussian_mask_columns_constant_along_readout():
    m = kspace.gaussian1d_mask(64, 64, 0.4, seed=3)
    assert (m.kept.min(axis=0) == m.kept.max(axis=0)).all()


def test_gaussian_mask_center_band_always_kept():
    for seed in range(5):
        m = kspace.gaussian1d_mask(64, 256, 0.30, center_fraction=0.08, seed=seed)
        n_center = round(0.08 * 256)
        start = (256 - n_center) // 2
        assert m.kept[:, start:start + n_center].all()


def test_gaussian_mask_seed_determinism_and_diversity():
    base = kspace.gaussian1d_mask(32, 128, 0.3, seed=7)
    again = kspace.gaussian1d_mask(32, 128, 0.3, seed=7)
    assert np.array_equal(base.kept, again.kept)
    distinct = sum(
        not np.array_equal(base.kept, kspace.gaussian1d_mask(32, 128, 0.3, seed=s).kept)
        for s in range(8, 28))
    assert distinct == 20


def test_gaussian_mask_ratio_validation():
    with pytest.raises(ValueError):
        kspace.gaussian1d_mask(8, 8, 0.0)
    with pytest.raises(ValueError):
        kspace.gaussian1d_mask(8, 8, 1.2)
    with pytest.raises(ValueError):
        kspace.gaussian1d_mask(8, 8, 0.2, center_fraction=0.3)


# ----------------------------------------------------------------------
# radial mask
# ----------------------------------------------------------------------

def test_radial_single_spoke_is_a_line():
    m = kspace.radial_mask(64, 64, 0.015, seed=1)
    assert m.spokes == 1
    assert m.kept[32, 32] == 1
    ys, xs = np.nonzero(m.kept)
    pts = np.stack([ys - 32.0, xs - 32.0], axis=1)
    # every kept cell within rounding distance of one line through the center
    _, _, vt = np.linalg.svd(pts, full_matrices=False)
    normal = vt[-1]
    assert np.abs(pts @ normal).max() <= 0.75


def test_radial_ratio_band():
    rng = RNG(4)
    for _ in range(20):
        size = int(rng.choice([32, 64, 128]))
        ratio = float(rng.uniform(0.05, 0.35))
        m = kspace.radial_mask(size, size, ratio, seed=int(rng.integers(1000)))
        assert m.achieved_ratio >= ratio
        assert m.achieved_ratio <= ratio + 2.0 / size


def test_radial_point_symmetry():
    for seed in range(6):
        m = kspace.radial_mask(64, 64, 0.15, seed=seed)
        k = m.kept
        sym = np.zeros_like(k)
        # partner of (y, x) about the center cell (32, 32) is (64-y, 64-x)
        ys, xs = np.nonzero(k)
        py, px = 64 - ys, 64 - xs
        ok = (py >= 0) & (py < 64) & (px >= 0) & (px < 64)
        assert k[py[ok], px[ok]].all()


def test_radial_determinism():
    a = kspace.radial_mask(64, 64, 0.1, seed=9)
    b = kspace.radial_mask(64, 64, 0.1, seed=9)
    assert np.array_equal(a.kept, b.kept)
    assert a.spokes == b.spokes


# ----------------------------------------------------------------------
# undersample
# ----------------------------------------------------------------------

def test_undersample_full_mask_is_identity():
    rng = RNG(5)
    x = rng.random((1, 32, 32))
    full = kspace.Mask(32, 32, np.ones((32, 32)), "full", 1.0, 0)
    xu = kspace.undersample(x, full)
    assert np.abs(xu.data - x).max() <= 1e-8


def test_undersample_zero_image():
    full = kspace.gaussian1d_mask(16, 16, 0.5, seed=0)
    xu = kspace.undersample(np.zeros((1, 16, 16)), full)
    assert np.abs(xu.data).max() == 0.0


def test_undersample_energy_inequality():
    rng = RNG(6)
    for seed in range(5):
        x = rng.random((1, 64, 64))
        m = kspace.gaussian1d_mask(64, 64, 0.3, seed=seed)
        xu = kspace.undersample(x, m)
        assert (xu.data ** 2).sum() <= (x ** 2).sum() + 1e-8


def test_undersample_shape_mismatch_errors():
    m = kspace.gaussian1d_mask(16, 16, 0.5, seed=0)
    with pytest.raises(ShapeError):
        kspace.undersample(np.zeros((1, 32, 32)), m)
    with pytest.raises(ShapeError):
        kspace.undersample(np.zeros((2, 16, 16)), m)


def test_mask_file_roundtrip(tmp_path):
    m = kspace.radial_mask(32, 32, 0.2, seed=3)
    p = tmp_path / "mask.dtns"
    m.save(p)
    back = kspace.Mask.load(p)
    assert np.array_equal(back.kept, m.kept)
    m.save_pgm(tmp_path / "mask.pgm")
    from deformunet.fileio import read_pgm
    img = read_pgm(tmp_path / "mask.pgm")
    assert np.array_equal(img > 0, m.kept > 0)


def test_complex_grid_fft_roundtrip():
    rng = RNG(7)
    g = kspace.ComplexGrid(32, 32, rng.standard_normal((32, 32)),
                           rng.standard_normal((32, 32)))
    back = kspace.ifft2d(kspace.fft2d(g))
    assert np.abs(back.to_complex() - g.to_complex()).max() <= 1e-10
