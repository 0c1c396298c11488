"""Deformable multi-head self-attention over shifted windows.

The windowed form splits the map into W_s x W_s tiles and attends within
each tile; the dense form treats the whole (square) map as one window.
Keys and values are resampled at learned offset positions: a uniform
reference grid is displaced by a small offset network fed with the
head-averaged query map, clamped through a*tanh, and the displaced
points read the feature map bilinearly. Attention logits get a
relative-position bias interpolated from a learnable table so that
fractional key positions stay differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import ops
from .engine import ShapeError, Tensor, get_dtype

__all__ = [
    "AttentionConfig",
    "AttentionParams",
    "CaptureRequest",
    "DeformCapture",
    "window_partition",
    "window_reverse",
    "cyclic_shift",
    "reference_points",
    "reference_points_px",
    "offset_net_forward",
    "relative_position_bias",
    "attention_forward",
    "init_attention_params",
]


@dataclass
class AttentionConfig:
    channels: int
    heads: int
    window: int
    downsample: int = 1
    offset_scale: float = 1.0
    dense: bool = False
    shifted: bool = False
    offsets_enabled: bool = True

    def __post_init__(self):
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} not divisible by heads {self.heads}")
        if not self.dense and self.window % self.downsample:
            raise ShapeError(f"window {self.window} not divisible by downsample {self.downsample}")
        if self.dense and self.shifted:
            raise ShapeError("dense attention never shifts")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    off_dw_w: Tensor
    off_dw_b: Tensor
    off_pw_w: Tensor
    off_pw_b: Tensor
    bias_table: Tensor


@dataclass
class CaptureRequest:
    """Ask the forward pass to record deformation state and, optionally,
    the attention rows of one query position (map coordinates)."""

    query: Optional[Tuple[int, int]] = None


@dataclass
class DeformCapture:
    """Recorded deformation geometry for one attention call (batch of 1)."""

    map_extent: Tuple[int, int]
    window_extent: Tuple[int, int]
    window_grid: Tuple[int, int]
    shift: int
    downsample: int
    offset_scale: float
    reference_points: np.ndarray          # [P,2] normalized window coords
    reference_px: np.ndarray              # [P,2] window-local pixels
    offsets: np.ndarray                   # [N_w,P,2] normalized
    deformed_points: np.ndarray           # [N_w,P,2] normalized, ref + offsets
    deformed_px: np.ndarray               # [N_w,P,2] window-local pixels
    attention: Optional[np.ndarray] = None       # [heads,K] rows of one query
    query_window: Optional[int] = None
    query_in_window: Optional[Tuple[int, int]] = None
    query_global: Optional[Tuple[int, int]] = None

    def records(self) -> Dict[str, np.ndarray]:
        out = {
            "reference_points": self.reference_points,
            "reference_px": self.reference_px,
            "offsets": self.offsets,
            "deformed_points": self.deformed_points,
            "deformed_px": self.deformed_px,
        }
        if self.attention is not None:
            out["attention_rows"] = self.attention
        return out


def window_partition(x: Tensor, window: int) -> Tensor:
    """[C,H,W] or [N,C,H,W] -> [N*N_w, C, ws, ws], windows in row-major order."""
    squeeze = x.ndim == 3
    x4 = ops.reshape(x, (1,) + x.shape) if squeeze else x
    n, c, h, w = x4.shape
    if h % window or w % window:
        raise ShapeError(f"map {h}x{w} not divisible by window {window}")
    gy, gx = h // window, w // window
    t = ops.reshape(x4, (n, c, gy, window, gx, window))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
    return ops.reshape(t, (n * gy * gx, c, window, window))


def window_reverse(wins: Tensor, h: int, w: int) -> Tensor:
    """Inverse of window_partition; returns [C,H,W] when one map's worth."""
    b, c, ws, ws2 = wins.shape
    if ws != ws2:
        raise ShapeError(f"windows must be square, got {wins.shape}")
    if h % ws or w % ws:
        raise ShapeError(f"map {h}x{w} not divisible by window {ws}")
    gy, gx = h // ws, w // ws
    if b % (gy * gx):
        raise ShapeError(f"window count {b} inconsistent with map {h}x{w}, window {ws}")
    n = b // (gy * gx)
    t = ops.reshape(wins, (n, gy, gx, c, ws, ws))
    t = ops.transpose(t, (0, 3, 1, 4, 2, 5))
    out = ops.reshape(t, (n, c, h, w))
    return ops.reshape(out, (c, h, w)) if n == 1 else out


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the last two axes; inverse is (-dy, -dx)."""
    return ops.roll2d(x, dy, dx)


def reference_points(window: int, downsample: int) -> np.ndarray:
    """Cell-center grid in normalized window coordinates [-1,1]^2, (y,x) order."""
    return _reference_grid(window, window, downsample)[0]


def reference_points_px(window: int, downsample: int) -> np.ndarray:
    return _reference_grid(window, window, downsample)[1]


def _reference_grid(wh: int, ww: int, r: int) -> Tuple[np.ndarray, np.ndarray]:
    if wh % r or ww % r:
        raise ShapeError(f"window {wh}x{ww} not divisible by downsample {r}")
    ny, nx = wh // r, ww // r
    ty = (2.0 * np.arange(ny) + 1.0) / ny - 1.0
    tx = (2.0 * np.arange(nx) + 1.0) / nx - 1.0
    norm = np.stack(np.meshgrid(ty, tx, indexing="ij"), axis=-1).reshape(ny * nx, 2)
    py = np.arange(ny) * r + (r - 1) / 2.0
    px = np.arange(nx) * r + (r - 1) / 2.0
    pix = np.stack(np.meshgrid(py, px, indexing="ij"), axis=-1).reshape(ny * nx, 2)
    return norm.astype(np.float64), pix.astype(np.float64)


def offset_net_forward(params: AttentionParams, window_feat: Tensor,
                       cfg: AttentionConfig) -> Tensor:
    """Two-layer offset network with the a*tanh clamp.

    window_feat is the (head-averaged) query-projected window map,
    [d, ws, ws] or [B, d, ws, ws]. Returns normalized offsets
    [(ws/r)^2, 2] (or batched), bounded by cfg.offset_scale per component.
    """
    squeeze = window_feat.ndim == 3
    feat = ops.reshape(window_feat, (1,) + window_feat.shape) if squeeze else window_feat
    hidden = ops.depthwise_conv2d(feat, params.off_dw_w, params.off_dw_b,
                                  stride=cfg.downsample, padding=2)
    raw = ops.conv2d(ops.gelu(hidden), params.off_pw_w, params.off_pw_b)
    clamped = ops.scale(ops.tanh(raw), cfg.offset_scale)
    b, two, ny, nx = clamped.shape
    out = ops.reshape(ops.transpose(clamped, (0, 2, 3, 1)), (b, ny * nx, 2))
    return ops.reshape(out, (ny * nx, 2)) if squeeze else out


def relative_position_bias(bias_table: Tensor, query_px: np.ndarray,
                           key_px: Tensor, span: int) -> Tensor:
    """Bias logits from continuous (key - query) displacements.

    The table covers integer displacements -(span-1)..(span-1) per axis;
    fractional displacements interpolate bilinearly, integer ones hit the
    table entries exactly. query_px is a fixed [Q,2] pixel grid, key_px a
    differentiable [B,P,2] tensor of (possibly deformed) key positions.
    """
    heads = bias_table.shape[0]
    if bias_table.shape[1] != 2 * span - 1 or bias_table.shape[2] != 2 * span - 1:
        raise ShapeError(f"bias table {bias_table.shape} does not match span {span}")
    b, p, _ = key_px.shape
    q = query_px.shape[0]
    keyr = ops.repeat_axis(key_px, q, 1)                      # [B,Q,P,2]
    qtile = Tensor(np.broadcast_to(
        query_px.astype(key_px.data.dtype)[None, :, None, :], (b, q, p, 2)).copy())
    coord = ops.add_scalar(ops.sub(keyr, qtile), float(span - 1))
    pts = ops.reshape(coord, (b * q * p, 2))
    sampled = ops.bilinear_sample_px(bias_table, pts)          # [heads, B*Q*P]
    return ops.transpose(ops.reshape(sampled, (heads, b, q, p)), (1, 0, 2, 3))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    vals = rng.standard_normal(shape) * std
    return np.clip(vals, -2.0 * std, 2.0 * std)


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator,
                          span: Optional[int] = None) -> AttentionParams:
    """Draw projection weights; the offset net's final layer starts at zero
    so training begins from plain window attention."""
    c, d = cfg.channels, cfg.head_dim
    span = cfg.window if span is None else span
    t = 2 * span - 1

    def conv_w(shape):
        return Tensor(_trunc_normal(rng, shape).astype(get_dtype()), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=True)

    return AttentionParams(
        wq=conv_w((c, c, 1, 1)), bq=zeros((c,)),
        wk=conv_w((c, c, 1, 1)), bk=zeros((c,)),
        wv=conv_w((c, c, 1, 1)), bv=zeros((c,)),
        wo=conv_w((c, c, 1, 1)), bo=zeros((c,)),
        off_dw_w=conv_w((d, 5, 5)), off_dw_b=zeros((d,)),
        off_pw_w=zeros((2, d, 1, 1)), off_pw_b=zeros((2,)),
        bias_table=conv_w((cfg.heads, t, t)),
    )


def attention_forward(cfg: AttentionConfig, params: AttentionParams, x: Tensor,
                      capture: Optional[CaptureRequest] = None
                      ) -> Tuple[Tensor, Optional[DeformCapture]]:
    """Full attention pass; output shape equals input shape.

    x is [C,H,W] or [N,C,H,W]. Capture is only supported for a single map.
    """
    squeeze = x.ndim == 3
    x4 = ops.reshape(x, (1,) + x.shape) if squeeze else x
    if x4.ndim != 4:
        raise ShapeError(f"attention wants [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, w = x4.shape
    if c != cfg.channels:
        raise ShapeError(f"input has {c} channels, config says {cfg.channels}")
    if capture is not None and n != 1:
        raise ShapeError("capture is only supported for a single map")

    if cfg.dense:
        if h != w:
            raise ShapeError(f"dense attention needs a square map, got {h}x{w}")
        wh = ww = h
        shift = 0
    else:
        wh = ww = cfg.window
        if h % wh or w % ww:
            raise ShapeError(f"map {h}x{w} not divisible by window {cfg.window}")
        shift = cfg.window // 2 if cfg.shifted else 0
    if wh < 2 or ww < 2:
        raise ShapeError(f"window extent must be at least 2, got {wh}x{ww}")
    r = cfg.downsample
    if wh % r or ww % r:
        raise ShapeError(f"window {wh} not divisible by downsample {r}")

    xs = cyclic_shift(x4, -shift, -shift) if shift else x4
    qf = ops.conv2d(xs, params.wq, params.bq)
    kf = ops.conv2d(xs, params.wk, params.bk)
    vf = ops.conv2d(xs, params.wv, params.bv)

    if cfg.dense:
        qw, kw, vw = qf, kf, vf
        grid = (1, 1)
    else:
        qw = window_partition(qf, wh)
        kw = window_partition(kf, wh)
        vw = window_partition(vf, wh)
        grid = (h // wh, w // ww)
    bsz = qw.shape[0]

    heads, d = cfg.heads, cfg.head_dim
    ref_norm, ref_px = _reference_grid(wh, ww, r)
    npts = ref_norm.shape[0]

    if cfg.offsets_enabled:
        qh = ops.reshape(qw, (bsz, heads, d, wh, ww))
        qmean = ops.scale(ops.sum_axis(qh, 1), 1.0 / heads)
        offsets = offset_net_forward(params, qmean, cfg)          # [B,P,2]
    else:
        offsets = Tensor(np.zeros((bsz, npts, 2), dtype=get_dtype()))

    ref_t = Tensor(np.broadcast_to(ref_norm.astype(get_dtype()), (bsz, npts, 2)).copy())
    deformed = ops.add(ref_t, offsets)                            # normalized, = ref + dp
    # normalized [-1,1] spans the whole window of cell centers: 1 unit = ws/2 px
    deformed_px = ops.add_scalar(ops.scale(ops.add_scalar(deformed, 1.0), wh / 2.0), -0.5)

    kt = ops.bilinear_sample_px(kw, deformed_px)                  # [B,C,P]
    vt = ops.bilinear_sample_px(vw, deformed_px)

    q3 = ops.transpose(ops.reshape(qw, (bsz, heads, d, wh * ww)), (0, 1, 3, 2))
    k3 = ops.reshape(kt, (bsz, heads, d, npts))
    scores = ops.scale(ops.matmul(q3, k3), 1.0 / math.sqrt(d))    # [B,heads,Q,P]

    qy, qx = np.meshgrid(np.arange(wh), np.arange(ww), indexing="ij")
    query_px = np.stack([qy.ravel(), qx.ravel()], axis=-1).astype(np.float64)
    bias = relative_position_bias(params.bias_table, query_px, deformed_px, wh)
    attn = ops.softmax(ops.add(scores, bias), axis=-1)

    v3 = ops.transpose(ops.reshape(vt, (bsz, heads, d, npts)), (0, 1, 3, 2))
    ctx = ops.matmul(attn, v3)                                    # [B,heads,Q,d]
    merged = ops.reshape(ops.transpose(ctx, (0, 1, 3, 2)), (bsz, c, wh, ww))

    if cfg.dense:
        back = merged
    else:
        back = window_reverse(merged, h, w)
        if back.ndim == 3:
            back = ops.reshape(back, (1, c, h, w))
    out = ops.conv2d(back, params.wo, params.bo)
    if shift:
        out = cyclic_shift(out, shift, shift)

    cap = None
    if capture is not None:
        cap = DeformCapture(
            map_extent=(h, w),
            window_extent=(wh, ww),
            window_grid=grid,
            shift=shift,
            downsample=r,
            offset_scale=cfg.offset_scale,
            reference_points=ref_norm.copy(),
            reference_px=ref_px.copy(),
            offsets=np.array(offsets.data, dtype=np.float64),
            deformed_points=np.array(deformed.data, dtype=np.float64),
            deformed_px=np.array(deformed_px.data, dtype=np.float64),
        )
        if capture.query is not None:
            qr, qc = capture.query
            if not (0 <= qr < h and 0 <= qc < w):
                raise ShapeError(f"query {capture.query} outside map {h}x{w}")
            sr, sc = (qr - shift) % h, (qc - shift) % w
            widx = (sr // wh) * grid[1] + (sc // ww)
            iy, ix = sr % wh, sc % ww
            cap.attention = np.array(attn.data[widx, :, iy * ww + ix, :], dtype=np.float64)
            cap.query_window = int(widx)
            cap.query_in_window = (int(iy), int(ix))
            cap.query_global = (int(qr), int(qc))

    return (ops.reshape(out, (c, h, w)) if squeeze else out), cap
