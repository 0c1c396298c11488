"""Shared test machinery: central finite-difference gradient checks and
independent plain-attention oracles. The oracles never call the code
paths they verify."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from deformunet.engine import Tensor, backward


def numeric_grad(fn: Callable[[List[np.ndarray]], float], arrays: List[np.ndarray],
                 wrt: int, coords: Sequence[Tuple[int, ...]], h: float = 1e-5) -> Dict:
    """Central finite differences of fn at selected coordinates of one input."""
    work = [a.copy() for a in arrays]
    out = {}
    for idx in coords:
        a = work[wrt]
        orig = a[idx]
        step = h * max(1.0, abs(float(orig)))
        a[idx] = orig + step
        f_plus = fn(work)
        a[idx] = orig - step
        f_minus = fn(work)
        a[idx] = orig
        out[idx] = (f_plus - f_minus) / (2.0 * step)
    return out


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def sample_coords(rng: np.random.Generator, shape: Tuple[int, ...], k: int):
    total = int(np.prod(shape))
    picks = rng.choice(total, size=min(k, total), replace=False)
    return [np.unravel_index(int(p), shape) for p in picks]


def gradcheck(build: Callable[[List[Tensor]], Tensor], arrays: List[np.ndarray],
              tol: float, rng: np.random.Generator, samples: int = 4,
              check_inputs: Sequence[int] = None) -> float:
    """Compare tape gradients of a scalar-valued graph against finite
    differences on sampled coordinates; returns the worst relative error."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = build(tensors)
    backward(loss)

    def value(work: List[np.ndarray]) -> float:
        ts = [Tensor(a.astype(np.float64)) for a in work]
        return float(build(ts).data)

    worst = 0.0
    targets = range(len(arrays)) if check_inputs is None else check_inputs
    for i in targets:
        analytic = tensors[i].grad
        assert analytic is not None, f"input {i} received no gradient"
        for idx in sample_coords(rng, arrays[i].shape, samples):
            num = numeric_grad(value, arrays, i, [idx])[idx]
            err = rel_err(float(analytic[idx]), num)
            assert err <= tol, (f"input {i} coord {idx}: analytic {analytic[idx]:.8g} "
                                f"vs numeric {num:.8g} (rel err {err:.2e} > {tol})")
            worst = max(worst, err)
    return worst


def plain_window_attention(xd: np.ndarray, params, window: int, heads: int) -> np.ndarray:
    """Straightforward loop implementation of window multi-head attention
    (no deformation, no bias); the reference for the zero-offset check."""
    c, h, w = xd.shape
    d = c // heads
    wq = params.wq.data[:, :, 0, 0]
    wk = params.wk.data[:, :, 0, 0]
    wv = params.wv.data[:, :, 0, 0]
    wo = params.wo.data[:, :, 0, 0]
    out = np.zeros_like(xd)
    for wy in range(h // window):
        for wx in range(w // window):
            tile = xd[:, wy * window:(wy + 1) * window, wx * window:(wx + 1) * window]
            xf = tile.reshape(c, window * window)
            q = wq @ xf + params.bq.data[:, None]
            k = wk @ xf + params.bk.data[:, None]
            v = wv @ xf + params.bv.data[:, None]
            ctx = np.zeros_like(xf)
            for hh in range(heads):
                qs = q[hh * d:(hh + 1) * d]
                ks = k[hh * d:(hh + 1) * d]
                vs = v[hh * d:(hh + 1) * d]
                logits = qs.T @ ks / np.sqrt(d)
                logits -= logits.max(axis=1, keepdims=True)
                a = np.exp(logits)
                a /= a.sum(axis=1, keepdims=True)
                ctx[hh * d:(hh + 1) * d] = vs @ a.T
            z = wo @ ctx + params.bo.data[:, None]
            out[:, wy * window:(wy + 1) * window, wx * window:(wx + 1) * window] = \
                z.reshape(c, window, window)
    return out


def plain_dense_attention(xd: np.ndarray, params, heads: int) -> np.ndarray:
    """Whole-map multi-head attention oracle (single window)."""
    c, h, w = xd.shape
    return plain_window_attention(xd, params, h, heads) if h == w else None


def tiny_model_config(extent: int = 64, layers: int = 2):
    from deformunet.model import ModelConfig

    if extent == 64:
        return ModelConfig(patch_size=1, block_pattern="KKDDKK", layers=layers,
                           channels=(8, 16, 32, 64, 32, 16), heads=(2, 2, 2, 2, 2, 2),
                           input_extent=(64, 64))
    if extent == 32:
        return ModelConfig(patch_size=1, block_pattern="KKDDKK", layers=layers,
                           channels=(4, 8, 16, 32, 16, 8), heads=(1, 1, 2, 2, 2, 1),
                           input_extent=(32, 32))
    raise ValueError(extent)
