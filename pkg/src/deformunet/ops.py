"""Differentiable primitives for the tensor engine.

Each primitive computes its value with numpy, screens the result for
non-finite scalars, and installs a vector-Jacobian closure on the output
node. There is no implicit broadcasting: elementwise operations demand
equal shapes, matmul demands equal leading batch extents.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf as _erf

from .engine import ShapeError, Tensor, check_finite

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], vjp, where: str) -> Tensor:
    check_finite(data, where)
    return Tensor._node(data, parents, vjp)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, (x,), lambda g: (g,), "add_scalar")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "absolute")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), vjp, "gelu")


# ----------------------------------------------------------------------
# reductions / rearrangements
# ----------------------------------------------------------------------

def total_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),), "sum")


def total_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    ax = axis % x.ndim
    return _make(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),),
        "sum_axis",
    )


def repeat_axis(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of extent n at position axis by repetition."""
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(data, (x,), lambda g: (g.sum(axis=axis),), "repeat_axis")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp, "concat")


def roll2d(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal shift over the last two axes."""
    data = np.roll(x.data, (dy, dx), axis=(-2, -1))
    return _make(data, (x,), lambda g: (np.roll(g, (-dy, -dx), axis=(-2, -1)),), "roll2d")


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Depth-to-space: [N, C*s*s, H, W] -> [N, C, H*s, W*s]."""
    if s == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "pixel_shuffle")
    n, c2, h, w = _expect4(x, "pixel_shuffle")
    if c2 % (s * s):
        raise ShapeError(f"pixel_shuffle: channels {c2} not divisible by s^2={s * s}")
    c = c2 // (s * s)
    data = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)

    def vjp(g):
        return (g.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c2, h, w),)

    return _make(data, (x,), vjp, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Space-to-depth: [N, C, H*s, W*s] -> [N, C*s*s, H, W]."""
    if s == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "pixel_unshuffle")
    n, c, hs, ws = _expect4(x, "pixel_unshuffle")
    if hs % s or ws % s:
        raise ShapeError(f"pixel_unshuffle: extents {(hs, ws)} not divisible by s={s}")
    h, w = hs // s, ws // s
    data = x.data.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)

    def vjp(g):
        return (g.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hs, ws),)

    return _make(data, (x,), vjp, "pixel_unshuffle")


def _expect4(x: Tensor, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D tensor, got shape {x.shape}")
    return x.shape


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: [..., K] x [M, K] -> [..., M]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with w {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data
    lead = xd.shape[:-1]
    k, m = wd.shape[1], wd.shape[0]

    def vjp(g):
        gf = g.reshape(-1, m)
        xf = xd.reshape(-1, k)
        gx = (gf @ wd).reshape(xd.shape)
        gw = gf.T @ xf
        gb = gf.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, vjp, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = (-1, c)
        ggamma = (g * xhat).reshape(lead).sum(axis=0)
        gbeta = g.reshape(lead).sum(axis=0)
        return (gx, ggamma, gbeta)

    return _make(y, (x, gamma, beta), vjp, "layer_norm")


# ----------------------------------------------------------------------
# convolutions
# ----------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] kernels."""
    if stride <= 0:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    n, cin, h, wd = _expect4(x, "conv2d")
    if w.ndim != 4 or w.shape[1] != cin:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    cout, _, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} incompatible with kernel {w.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, kernel {w.shape}, "
                         f"stride {stride}, padding {padding}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, cin, h * wd)
        pad_geom = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols5 = np.empty((n, cin, kh * kw, ho, wo), dtype=x.data.dtype)
        for ky in range(kh):
            for kx in range(kw):
                cols5[:, :, ky * kw + kx] = xp[:, :, ky:ky + 1 + (ho - 1) * stride:stride,
                                               kx:kx + 1 + (wo - 1) * stride:stride]
        cols = cols5.reshape(n, cin * kh * kw, ho * wo)
        pad_geom = xp.shape

    w2 = w.data.reshape(cout, -1)
    out = w2 @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def vjp(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.swapaxes(w2, 0, 1) @ g2
        if pad_geom is None:
            gx = gcols.reshape(n, cin, h, wd)
        else:
            gxp = np.zeros(pad_geom, dtype=g.dtype)
            gc5 = gcols.reshape(n, cin, kh * kw, ho, wo)
            for ky in range(kh):
                for kx in range(kw):
                    gxp[:, :, ky:ky + 1 + (ho - 1) * stride:stride,
                        kx:kx + 1 + (wo - 1) * stride:stride] += gc5[:, :, ky * kw + kx]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, vjp, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution: [N,C,H,W] with one [k,k] kernel per channel."""
    if stride <= 0:
        raise ShapeError(f"depthwise_conv2d: stride must be positive, got {stride}")
    n, c, h, wd = _expect4(x, "depthwise_conv2d")
    if w.ndim != 3 or w.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: kernel {w.shape} incompatible with input {x.shape}")
    _, kh, kw = w.shape
    if b is not None and b.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias {b.shape} incompatible with channels {c}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("depthwise_conv2d: empty output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = np.empty((kh * kw, n, c, ho, wo), dtype=x.data.dtype)
    for ky in range(kh):
        for kx in range(kw):
            patches[ky * kw + kx] = xp[:, :, ky:ky + 1 + (ho - 1) * stride:stride,
                                       kx:kx + 1 + (wo - 1) * stride:stride]
    out = np.einsum("tnchw,ct->nchw", patches, w.data.reshape(c, kh * kw))
    if b is not None:
        out = out + b.data[None, :, None, None]

    def vjp(g):
        gw = np.einsum("nchw,tnchw->ct", g, patches).reshape(w.shape)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        wt = w.data.reshape(c, kh * kw)
        for ky in range(kh):
            for kx in range(kw):
                gxp[:, :, ky:ky + 1 + (ho - 1) * stride:stride,
                    kx:kx + 1 + (wo - 1) * stride:stride] += g * wt[:, ky * kw + kx][None, :, None, None]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if b is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, vjp, "depthwise_conv2d")


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------

def bilinear_sample(feat: Tensor, points: Tensor) -> Tensor:
    """Sample feature maps at fractional positions.

    Positions are normalized to [-1, 1] per axis with the align-corners
    convention (-1 is cell center 0, +1 is cell center n-1); coordinates
    are ordered (y, x). Out-of-range points clamp to the border.

    feat [C,H,W] with points [P,2] gives [C,P]; a leading batch axis on
    both gives [B,C,P]. Differentiable in both the features and the
    point coordinates.
    """
    return _bilinear(feat, points, normalized=True)


def bilinear_sample_px(feat: Tensor, points: Tensor) -> Tensor:
    """Like bilinear_sample but with points given directly in pixel units."""
    return _bilinear(feat, points, normalized=False)


def _bilinear(feat: Tensor, points: Tensor, normalized: bool) -> Tensor:
    squeeze = feat.ndim == 3
    if squeeze:
        if points.ndim != 2 or points.shape[-1] != 2:
            raise ShapeError(f"bilinear_sample: points {points.shape} must be [P,2]")
    elif feat.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2 or points.shape[0] != feat.shape[0]:
        raise ShapeError(f"bilinear_sample: got feat {feat.shape}, points {points.shape}")

    f = feat.data[None] if squeeze else feat.data
    p = points.data[None] if squeeze else points.data
    bsz, c, h, w = f.shape
    _, np_, _ = p.shape

    if normalized:
        sy = 0.5 * (h - 1)
        sx = 0.5 * (w - 1)
        py_raw = (p[..., 0] + 1.0) * sy
        px_raw = (p[..., 1] + 1.0) * sx
    else:
        sy = sx = 1.0
        py_raw = p[..., 0]
        px_raw = p[..., 1]
    in_y = (py_raw >= 0.0) & (py_raw <= h - 1)
    in_x = (px_raw >= 0.0) & (px_raw <= w - 1)
    py = np.clip(py_raw, 0.0, h - 1)
    px = np.clip(px_raw, 0.0, w - 1)

    y0 = np.minimum(np.floor(py), max(h - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(px), max(w - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (py - y0)[:, None, :]
    wx = (px - x0)[:, None, :]

    # absolute indices into the flattened [B*C*H*W] value array, one per corner
    gf = np.ascontiguousarray(f).reshape(-1)
    base = (np.arange(bsz, dtype=np.int64) * c)[:, None, None] + np.arange(c, dtype=np.int64)[None, :, None]
    base = base * (h * w)

    i00 = base + (y0 * w + x0)[:, None, :]
    dx = (x1 - x0)[:, None, :]
    dyw = ((y1 - y0) * w)[:, None, :]
    i01 = i00 + dx
    i10 = i00 + dyw
    i11 = i10 + dx
    v00 = gf.take(i00)
    v01 = gf.take(i01)
    v10 = gf.take(i10)
    v11 = gf.take(i11)
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def vjp(g):
        total = bsz * c * h * w
        acc = np.zeros(total, dtype=np.float64)
        for idx, ww in (
            (i00, (1 - wy) * (1 - wx)),
            (i01, (1 - wy) * wx),
            (i10, wy * (1 - wx)),
            (i11, wy * wx),
        ):
            acc += np.bincount(idx.ravel(), weights=(g * ww).ravel(), minlength=total)
        gfeat = acc.astype(g.dtype).reshape(f.shape)

        dvy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        dvx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        gpy = (g * dvy).sum(axis=1) * sy * in_y
        gpx = (g * dvx).sum(axis=1) * sx * in_x
        gpts = np.stack([gpy, gpx], axis=-1).astype(g.dtype)
        if squeeze:
            return (gfeat[0], gpts[0])
        return (gfeat, gpts)

    result = out[0] if squeeze else out
    return _make(result, (feat, points), vjp, "bilinear_sample")


# ----------------------------------------------------------------------
# spectral
# ----------------------------------------------------------------------

def fft2_channels(x: Tensor) -> Tensor:
    """Centered unitary 2-D FFT of a real map, as stacked (re, im) channels.

    [..., H, W] -> [..., 2, H, W]. The adjoint of a unitary transform is
    its inverse, so the backward pass is the real part of the centered
    inverse FFT of the gradient read as a complex grid.
    """
    from . import fourier

    spec = fourier.fft2_centered(x.data)
    data = np.stack([spec.real, spec.imag], axis=-3).astype(x.data.dtype)
    shape = x.shape

    def vjp(g):
        gc = g[..., 0, :, :] + 1j * g[..., 1, :, :]
        return (fourier.ifft2_centered(gc).real.astype(g.dtype).reshape(shape),)

    return _make(data, (x,), vjp, "fft2_channels")
