"""Transformer layers and residual blocks of the U-shaped network.

A layer is the standard pre-norm pair (attention residual, MLP residual).
A block stacks L layers, resamples (2x merge on the way down, 2x expand
on the way up), applies a 3x3 convolution, and adds a shortcut of the
resampled block input. Windowed blocks alternate unshifted/shifted
layers; dense blocks attend over the whole map and never shift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .attention import (AttentionConfig, AttentionParams, CaptureRequest,
                        DeformCapture, attention_forward, init_attention_params,
                        _trunc_normal)
from .engine import ShapeError, Tensor, get_dtype

MLP_EXPANSION = 2  # hidden width factor; fixed by the complexity budget


@dataclass
class BlockConfig:
    kind: str                  # "K" windowed, "D" dense
    direction: str             # "down" or "up"
    layers: int
    channels: int
    heads: int
    window: int
    downsample: int = 1
    offsets_enabled: bool = True
    offset_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("K", "D"):
            raise ValueError(f"block kind must be 'K' or 'D', got {self.kind!r}")
        if self.direction not in ("down", "up"):
            raise ValueError(f"block direction must be 'down' or 'up', got {self.direction!r}")
        if self.layers < 1:
            raise ValueError(f"block needs at least one layer, got {self.layers}")

    def attention_config(self, layer_index: int) -> AttentionConfig:
        dense = self.kind == "D"
        return AttentionConfig(
            channels=self.channels,
            heads=self.heads,
            window=self.window,
            downsample=self.downsample,
            offset_scale=self.offset_scale,
            dense=dense,
            shifted=(not dense) and layer_index % 2 == 1,
            offsets_enabled=self.offsets_enabled,
        )


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class ResampleParams:
    """Patch merge (down) or patch expand (up)."""
    w: Tensor
    norm_g: Tensor
    norm_b: Tensor


@dataclass
class BlockParams:
    layers: List[LayerParams]
    resample_main: ResampleParams
    resample_short: ResampleParams
    conv_w: Tensor
    conv_b: Tensor


@dataclass
class FuseParams:
    w: Tensor
    b: Tensor


def _to_last(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


def _to_first(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))


def mlp_forward(lp: LayerParams, x: Tensor) -> Tensor:
    """Two-layer MLP over the channel (last) axis with GeLU between."""
    return ops.linear(ops.gelu(ops.linear(x, lp.mlp_w1, lp.mlp_b1)), lp.mlp_w2, lp.mlp_b2)


def transformer_layer_forward(attn_cfg: AttentionConfig, lp: LayerParams, x: Tensor,
                              capture: Optional[CaptureRequest] = None
                              ) -> Tuple[Tensor, Optional[DeformCapture]]:
    """Pre-norm residual attention followed by pre-norm residual MLP."""
    normed = _to_first(ops.layer_norm(_to_last(x), lp.ln1_g, lp.ln1_b))
    a, cap = attention_forward(attn_cfg, lp.attn, normed, capture)
    x = ops.add(x, a)
    m = _to_first(mlp_forward(lp, ops.layer_norm(_to_last(x), lp.ln2_g, lp.ln2_b)))
    return ops.add(x, m), cap


def patch_merge(p: ResampleParams, x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,2C,H/2,W/2]: gather 2x2 neighborhoods, normalize, reduce."""
    u = _to_last(ops.pixel_unshuffle(x, 2))
    y = ops.linear(ops.layer_norm(u, p.norm_g, p.norm_b), p.w)
    return _to_first(y)


def patch_expand(p: ResampleParams, x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C/2,2H,2W]: widen to 2C, space out by 2, normalize."""
    if x.shape[1] % 2:
        raise ShapeError(f"patch_expand needs even channels, got {x.shape[1]}")
    y = _to_first(ops.linear(_to_last(x), p.w))
    up = ops.pixel_shuffle(y, 2)
    return _to_first(ops.layer_norm(_to_last(up), p.norm_g, p.norm_b))


def resample_forward(direction: str, p: ResampleParams, x: Tensor) -> Tensor:
    return patch_merge(p, x) if direction == "down" else patch_expand(p, x)


def residual_block_forward(bc: BlockConfig, bp: BlockParams, x: Tensor,
                           capture_layer: Optional[int] = None,
                           capture: Optional[CaptureRequest] = None
                           ) -> Tuple[Tensor, Optional[DeformCapture]]:
    """L transformer layers, resample, 3x3 conv, plus resampled shortcut."""
    y = x
    cap_out = None
    for j, lp in enumerate(bp.layers):
        req = capture if capture is not None and j == capture_layer else None
        y, cap = transformer_layer_forward(bc.attention_config(j), lp, y, req)
        if cap is not None:
            cap_out = cap
    main = resample_forward(bc.direction, bp.resample_main, y)
    short = resample_forward(bc.direction, bp.resample_short, x)
    out = ops.add(ops.conv2d(main, bp.conv_w, bp.conv_b, padding=1), short)
    return out, cap_out


def skip_fuse(fp: FuseParams, decoder_feat: Tensor, encoder_feat: Tensor) -> Tensor:
    """Concatenate decoder and encoder channels (decoder first), reduce to C."""
    if decoder_feat.shape != encoder_feat.shape:
        raise ShapeError(f"skip_fuse: {decoder_feat.shape} vs {encoder_feat.shape}")
    cat = ops.concat([decoder_feat, encoder_feat], axis=1)
    return ops.conv2d(cat, fp.w, fp.b)


# ----------------------------------------------------------------------
# parameter construction
# ----------------------------------------------------------------------

def init_layer_params(bc: BlockConfig, rng: np.random.Generator, span: int) -> LayerParams:
    c = bc.channels
    hidden = MLP_EXPANSION * c
    dt = get_dtype()

    def tn(shape):
        return Tensor(_trunc_normal(rng, shape).astype(dt), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    attn_cfg = bc.attention_config(0)
    return LayerParams(
        ln1_g=ones((c,)), ln1_b=zeros((c,)),
        attn=init_attention_params(attn_cfg, rng, span=span),
        ln2_g=ones((c,)), ln2_b=zeros((c,)),
        mlp_w1=tn((hidden, c)), mlp_b1=zeros((hidden,)),
        mlp_w2=tn((c, hidden)), mlp_b2=zeros((c,)),
    )


def init_resample_params(direction: str, c: int, rng: np.random.Generator) -> ResampleParams:
    dt = get_dtype()
    if direction == "down":
        w = Tensor(_trunc_normal(rng, (2 * c, 4 * c)).astype(dt), requires_grad=True)
        g = Tensor(np.ones(4 * c, dtype=dt), requires_grad=True)
        b = Tensor(np.zeros(4 * c, dtype=dt), requires_grad=True)
    else:
        w = Tensor(_trunc_normal(rng, (2 * c, c)).astype(dt), requires_grad=True)
        g = Tensor(np.ones(c // 2, dtype=dt), requires_grad=True)
        b = Tensor(np.zeros(c // 2, dtype=dt), requires_grad=True)
    return ResampleParams(w=w, norm_g=g, norm_b=b)


def init_block_params(bc: BlockConfig, resolution: Tuple[int, int],
                      rng: np.random.Generator) -> BlockParams:
    h, w = resolution
    if bc.kind == "D":
        if h != w:
            raise ShapeError(f"dense block needs a square map, got {h}x{w}")
        span = h
    else:
        if h % bc.window or w % bc.window:
            raise ShapeError(f"block resolution {h}x{w} not divisible by window {bc.window}")
        span = bc.window
    dt = get_dtype()
    layers = [init_layer_params(bc, rng, span) for _ in range(bc.layers)]
    out_c = 2 * bc.channels if bc.direction == "down" else bc.channels // 2
    conv_w = Tensor(_trunc_normal(rng, (out_c, out_c, 3, 3)).astype(dt), requires_grad=True)
    conv_b = Tensor(np.zeros(out_c, dtype=dt), requires_grad=True)
    return BlockParams(
        layers=layers,
        resample_main=init_resample_params(bc.direction, bc.channels, rng),
        resample_short=init_resample_params(bc.direction, bc.channels, rng),
        conv_w=conv_w,
        conv_b=conv_b,
    )


def init_fuse_params(c: int, rng: np.random.Generator) -> FuseParams:
    dt = get_dtype()
    return FuseParams(
        w=Tensor(_trunc_normal(rng, (c, 2 * c, 1, 1)).astype(dt), requires_grad=True),
        b=Tensor(np.zeros(c, dtype=dt), requires_grad=True),
    )
