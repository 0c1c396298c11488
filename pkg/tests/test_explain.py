"""Phantom generator, deformation exports, and attention heatmaps."""

import numpy as np
import pytest

from deformunet.engine import load_array
from deformunet.explain import (HeatmapRequest, attention_heatmap,
                                capture_deformation, offset_field, run_capture,
                                splat_attention_row)
from deformunet.fileio import read_pgm, write_pgm
from deformunet.kspace import gaussian1d_mask, undersample
from deformunet.model import BLOCK_IDS, init_params
from deformunet.phantom import load_dataset, phantom_gen, save_dataset

from helpers import tiny_model_config

RNG = np.random.default_rng


# ----------------------------------------------------------------------
# phantoms
# ----------------------------------------------------------------------

def test_phantom_empty_dataset():
    assert phantom_gen(0, 0, 64) == []


def test_phantom_determinism():
    a = phantom_gen(3, 4, 64)
    b = phantom_gen(3, 4, 64)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.image, pb.image)
    c = phantom_gen(4, 1, 64)
    assert not np.array_equal(a[0].image, c[0].image)


def test_phantom_values_in_unit_range():
    for p in phantom_gen(5, 10, 64):
        assert p.image.min() >= 0.0 and p.image.max() <= 1.0


def test_phantom_mean_intensity_band():
    means = [p.image.mean() for p in phantom_gen(6, 100, 64)]
    assert all(0.05 < m < 0.6 for m in means)


def test_phantom_dataset_roundtrip(tmp_path):
    phantoms = phantom_gen(7, 3, 32)
    save_dataset(tmp_path, phantoms)
    back = load_dataset(tmp_path)
    assert len(back) == 3
    for ph, arr in zip(phantoms, back):
        assert np.array_equal(arr.astype(np.float32), ph.image.astype(np.float32))


# ----------------------------------------------------------------------
# PGM round trips
# ----------------------------------------------------------------------

def test_pgm_roundtrip_uint8(tmp_path):
    img = RNG(0).integers(0, 256, size=(17, 23)).astype(np.uint8)
    p = tmp_path / "img.pgm"
    write_pgm(p, img)
    assert np.array_equal(read_pgm(p), img)


def test_pgm_float_quantization(tmp_path):
    img = np.linspace(0, 1, 64).reshape(8, 8)
    p = tmp_path / "f.pgm"
    write_pgm(p, img)
    back = read_pgm(p).astype(np.float64) / 255.0
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


# ----------------------------------------------------------------------
# deformation capture
# ----------------------------------------------------------------------

def _setup_model(extent=64, seed=0):
    cfg = tiny_model_config(extent)
    params = init_params(cfg, seed=seed)
    img = phantom_gen(9, 1, extent)[0].image
    mask = gaussian1d_mask(extent, extent, 0.30, seed=3)
    xu = undersample(img[None], mask)
    return cfg, params, xu.data


def test_zero_init_deformation_field_is_zero(tmp_path):
    cfg, params, xu = _setup_model()
    cap, paths = capture_deformation(cfg, params, xu, "E1", out_dir=str(tmp_path))
    assert np.abs(cap.offsets).max() == 0.0
    field = load_array(paths["offset_field"])
    assert field.shape == (64, 64)
    assert np.abs(field).max() == 0.0
    assert (tmp_path / "index.txt").exists()
    assert (tmp_path / "deformed_points_overlay.pgm").exists()


def test_offset_bound_in_exported_fields():
    cfg, params, xu = _setup_model()
    rng = RNG(1)
    for bid in BLOCK_IDS:
        for lp in params.blocks[bid].layers:
            lp.attn.off_pw_w.data = rng.standard_normal(lp.attn.off_pw_w.shape) * 2
            lp.attn.off_pw_b.data = rng.standard_normal(2) * 2
    for bid in ("E1", "E3", "D1"):
        cap = run_capture(cfg, params, xu, bid)
        assert np.abs(cap.offsets).max() <= cfg.offset_scale
        field = offset_field(cap)
        assert field.max() <= cfg.offset_scale * np.sqrt(2) + 1e-12


def test_capture_export_roundtrip(tmp_path):
    cfg, params, xu = _setup_model()
    cap, paths = capture_deformation(cfg, params, xu, "E2", out_dir=str(tmp_path))
    assert np.array_equal(load_array(paths["offsets"]).astype(np.float32),
                          cap.offsets.astype(np.float32))
    assert np.array_equal(load_array(paths["reference_points"]).astype(np.float32),
                          cap.reference_points.astype(np.float32))


# ----------------------------------------------------------------------
# attention heatmaps
# ----------------------------------------------------------------------

def test_heatmap_mass_is_one_before_normalization():
    cfg, params, xu = _setup_model()
    for block, query in (("E1", (10, 12)), ("E3", (5, 5))):
        cap = run_capture(cfg, params, xu, block, query=query)
        stage = {s["id"]: s for s in cfg.stage_plan()}[block]
        for head in range(stage["heads"]):
            canvas = splat_attention_row(cap, head)
            assert abs(canvas.sum() - 1.0) <= 1e-6


def test_windowed_heatmap_confined_to_query_window():
    cfg, params, xu = _setup_model()
    req = HeatmapRequest(block="E1", layer=0, head=0, query=(18, 37))
    canvas = attention_heatmap(cfg, params, xu, req)
    assert canvas.shape == (64, 64)
    wy, wx = 18 // 8, 37 // 8
    inside = canvas[wy * 8:(wy + 1) * 8, wx * 8:(wx + 1) * 8].copy()
    canvas[wy * 8:(wy + 1) * 8, wx * 8:(wx + 1) * 8] = 0.0
    assert inside.sum() > 0
    assert np.abs(canvas).max() == 0.0


def test_dense_heatmap_covers_full_map():
    cfg, params, xu = _setup_model()
    req = HeatmapRequest(block="E3", layer=0, head=0, query=(8, 8))
    canvas = attention_heatmap(cfg, params, xu, req)   # E3 runs at 16x16
    assert canvas.shape == (16, 16)
    # mass appears outside any single 8x8 window around the query
    assert canvas[:8, :8].sum() < canvas.sum() - 1e-6


def test_heatmap_pgm_export(tmp_path):
    cfg, params, xu = _setup_model()
    req = HeatmapRequest(block="E1", layer=0, head=1, query=(3, 3))
    out = tmp_path / "heat.pgm"
    canvas = attention_heatmap(cfg, params, xu, req, out_path=str(out))
    img = read_pgm(out)
    assert img.shape == canvas.shape
    assert img.max() == 255  # normalized to full range


def test_heatmap_request_validation():
    cfg, params, xu = _setup_model()
    with pytest.raises(ValueError):
        attention_heatmap(cfg, params, xu, HeatmapRequest("E1", 0, 9, (0, 0)))
    with pytest.raises(ValueError):
        attention_heatmap(cfg, params, xu, HeatmapRequest("E1", 7, 0, (0, 0)))
    with pytest.raises(ValueError):
        attention_heatmap(cfg, params, xu, HeatmapRequest("E1", 0, 0, (99, 0)))


def test_shifted_layer_heatmap_mass_preserved():
    cfg, params, xu = _setup_model()
    req = HeatmapRequest(block="E1", layer=1, head=0, query=(12, 12))  # odd layer shifts
    canvas = attention_heatmap(cfg, params, xu, req)
    assert abs(canvas.sum() - 1.0) <= 1e-6
