"""Explainability exports: deformation state (reference points, offsets,
deformed points, an offset-magnitude field) and per-query attention
heatmaps, written as binary tensors, PGM rasters, and an index file."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .attention import DeformCapture
from .engine import Tensor, save_array
from .fileio import atomic_write_text, write_pgm
from .model import ModelCaptureRequest, ModelConfig, ModelParams, model_forward


@dataclass
class HeatmapRequest:
    block: str
    layer: int
    head: int
    query: Tuple[int, int]


def _as_input(x_u) -> Tensor:
    arr = x_u.data if isinstance(x_u, Tensor) else np.asarray(x_u)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr)


def run_capture(cfg: ModelConfig, params: ModelParams, x_u, block: str,
                layer: int = 0, query: Optional[Tuple[int, int]] = None) -> DeformCapture:
    req = ModelCaptureRequest(block=block, layer=layer, query=query)
    _, cap = model_forward(cfg, params, _as_input(x_u), capture=req)
    if cap is None:
        raise RuntimeError(f"no capture produced for block {block}")
    return cap


def offset_field(cap: DeformCapture) -> np.ndarray:
    """Per-reference-point offset magnitude assembled onto the feature map.

    Offsets are in normalized window units; each point's magnitude fills
    its r x r cell, and shifted layers are rolled back into map coordinates.
    """
    wh, wwd = cap.window_extent
    gy, gx = cap.window_grid
    r = cap.downsample
    ny, nx = wh // r, wwd // r
    mag = np.linalg.norm(cap.offsets, axis=-1)          # [N_w, P]
    grid = mag.reshape(gy, gx, ny, nx).transpose(0, 2, 1, 3).reshape(gy * ny, gx * nx)
    field = np.repeat(np.repeat(grid, r, axis=0), r, axis=1)
    if cap.shift:
        field = np.roll(field, (cap.shift, cap.shift), axis=(0, 1))
    return field


def deformed_points_on_map(cap: DeformCapture) -> np.ndarray:
    """Deformed sampling positions in (unshifted) feature-map pixels, [N_w*P, 2]."""
    gy, gx = cap.window_grid
    wh, wwd = cap.window_extent
    hh, ww = cap.map_extent
    pts = []
    for wi in range(gy * gx):
        oy, ox = (wi // gx) * wh, (wi % gx) * wwd
        local = np.clip(cap.deformed_px[wi], [0, 0],
                        [wh - 1, wwd - 1])
        g = local + [oy, ox]
        if cap.shift:
            g = (g + cap.shift) % [hh, ww]
        pts.append(g)
    return np.concatenate(pts, axis=0)


def capture_deformation(cfg: ModelConfig, params: ModelParams, x_u, block: str,
                        layer: int = 0, out_dir: Optional[str] = None
                        ) -> Tuple[DeformCapture, Dict[str, str]]:
    """Record deformation state and optionally export it.

    Exports: reference/deformed points and offsets as binary tensors, an
    offset-magnitude field upsampled (nearest) to the image extent, a PGM
    overlay marking deformed points on the input, and an index file.
    """
    cap = run_capture(cfg, params, x_u, block, layer)
    x_arr = _as_input(x_u).data[0]
    h, w = x_arr.shape
    scale = h // cap.map_extent[0]  # image pixels per feature-map cell
    field = offset_field(cap)
    field_img = np.repeat(np.repeat(field, scale, axis=0), scale, axis=1)

    overlay = np.clip(x_arr, 0.0, 1.0).copy()
    pts = deformed_points_on_map(cap)
    iy = np.clip(np.round(pts[:, 0] * scale).astype(int), 0, h - 1)
    ix = np.clip(np.round(pts[:, 1] * scale).astype(int), 0, w - 1)
    overlay[iy, ix] = 1.0

    paths: Dict[str, str] = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        records = {
            "reference_points": cap.reference_points,
            "offsets": cap.offsets,
            "deformed_points": cap.deformed_points,
            "offset_field": field_img,
        }
        index_lines = []
        for name, arr in records.items():
            fn = f"{name}.dtns"
            save_array(os.path.join(out_dir, fn), arr.astype(np.float32))
            shape = "x".join(str(e) for e in arr.shape)
            index_lines.append(f"{name}\t{fn}\t{shape}")
            paths[name] = os.path.join(out_dir, fn)
        ov_path = os.path.join(out_dir, "deformed_points_overlay.pgm")
        write_pgm(ov_path, overlay)
        paths["overlay"] = ov_path
        index_lines.append(f"deformed_points_overlay\tdeformed_points_overlay.pgm\t{h}x{w}")
        atomic_write_text(os.path.join(out_dir, "index.txt"), "\n".join(index_lines) + "\n")
        paths["index"] = os.path.join(out_dir, "index.txt")
    return cap, paths


def splat_attention_row(cap: DeformCapture, head: int) -> np.ndarray:
    """Distribute one query's attention row over key positions.

    Each key's weight lands on the four cells around its (clamped)
    deformed position with bilinear weights, on the block's feature map;
    the pre-normalization total equals the softmax row sum (one).
    """
    if cap.attention is None:
        raise RuntimeError("capture holds no attention rows; request a query")
    hh, ww = cap.map_extent
    wh, wwd = cap.window_extent
    gy, gx = cap.window_grid
    wi = cap.query_window
    row = cap.attention[head]
    local = np.clip(cap.deformed_px[wi], [0, 0], [wh - 1, wwd - 1])
    oy, ox = (wi // gx) * wh, (wi % gx) * wwd

    canvas = np.zeros((hh, ww), dtype=np.float64)
    py = local[:, 0] + oy
    px = local[:, 1] + ox
    y0 = np.minimum(np.floor(py), hh - 2).astype(int)
    x0 = np.minimum(np.floor(px), ww - 2).astype(int)
    wy = py - y0
    wx = px - x0
    np.add.at(canvas, (y0, x0), row * (1 - wy) * (1 - wx))
    np.add.at(canvas, (y0, x0 + 1), row * (1 - wy) * wx)
    np.add.at(canvas, (y0 + 1, x0), row * wy * (1 - wx))
    np.add.at(canvas, (y0 + 1, x0 + 1), row * wy * wx)
    if cap.shift:
        canvas = np.roll(canvas, (cap.shift, cap.shift), axis=(0, 1))
    return canvas


def attention_heatmap(cfg: ModelConfig, params: ModelParams, x_u,
                      req: HeatmapRequest, out_path: Optional[str] = None
                      ) -> np.ndarray:
    """Heatmap of one query's attention over (deformed) keys.

    Validates the request against the config, splats the row onto the
    block's feature map, and optionally writes a max-normalized PGM.
    """
    stage = {s["id"]: s for s in cfg.stage_plan()}[req.block]
    if not (0 <= req.layer < cfg.layers):
        raise ValueError(f"layer {req.layer} outside 0..{cfg.layers - 1}")
    if not (0 <= req.head < stage["heads"]):
        raise ValueError(f"head {req.head} outside 0..{stage['heads'] - 1}")
    hh, ww = stage["resolution"]
    qr, qc = req.query
    if not (0 <= qr < hh and 0 <= qc < ww):
        raise ValueError(f"query {req.query} outside feature map {hh}x{ww}")

    cap = run_capture(cfg, params, x_u, req.block, req.layer, query=(qr, qc))
    canvas = splat_attention_row(cap, req.head)
    if out_path is not None:
        peak = canvas.max()
        write_pgm(out_path, canvas / peak if peak > 0 else canvas)
    return canvas
