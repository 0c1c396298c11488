"""Training objectives: pixel and frequency Charbonnier terms plus a
perceptual term computed from a fixed, seed-pinned random convolutional
pyramid (no pretrained weights are involved; the interface accepts any
extractor with the same ``features`` signature)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import ops
from .engine import ShapeError, Tensor, get_dtype

CHARBONNIER_EPS = 1e-3


@dataclass
class LossWeights:
    alpha: float = 15.0
    beta: float = 0.1
    gamma: float = 0.0025

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def charbonnier(a: Tensor, b: Tensor, eps: float = CHARBONNIER_EPS) -> Tensor:
    """mean(sqrt((a-b)^2 + eps^2)); equals eps exactly when a == b."""
    if a.shape != b.shape:
        raise ShapeError(f"charbonnier: {a.shape} vs {b.shape}")
    d = ops.sub(a, b)
    return ops.total_mean(ops.sqrt(ops.add_scalar(ops.mul(d, d), eps * eps)))


def freq_loss(xhat: Tensor, x: Tensor, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Charbonnier over the stacked re/im spectra of both images."""
    return charbonnier(ops.fft2_channels(xhat), ops.fft2_channels(x), eps)


class FeatureExtractor:
    """Three-stage strided conv pyramid with fixed random weights.

    Weights are drawn once from the seed and never trained; the pyramid
    only has to produce structure-sensitive features for the perceptual
    distance.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (8, 16, 32)):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.seed = seed
        self.widths = tuple(widths)
        dt = get_dtype()
        self.kernels: List[Tensor] = []
        self.biases: List[Tensor] = []
        cin = 1
        for cout in self.widths:
            std = np.sqrt(2.0 / (9 * cin))
            w = rng.standard_normal((cout, cin, 3, 3)) * std
            self.kernels.append(Tensor(w.astype(dt)))
            self.biases.append(Tensor(np.zeros(cout, dtype=dt)))
            cin = cout

    def features(self, img: Tensor) -> List[Tensor]:
        y = ops.reshape(img, (1,) + img.shape) if img.ndim == 3 else img
        outs = []
        for w, b in zip(self.kernels, self.biases):
            y = ops.gelu(ops.conv2d(y, w, b, stride=2, padding=1))
            outs.append(y)
        return outs


def perceptual_loss(extractor: FeatureExtractor, xhat: Tensor, x: Tensor) -> Tensor:
    """Mean absolute difference of pyramid features, averaged over stages."""
    fa = extractor.features(xhat)
    fb = extractor.features(x)
    terms = [ops.total_mean(ops.absolute(ops.sub(a, b))) for a, b in zip(fa, fb)]
    acc = terms[0]
    for t in terms[1:]:
        acc = ops.add(acc, t)
    return ops.scale(acc, 1.0 / len(terms))


def total_loss(w: LossWeights, xhat: Tensor, x: Tensor,
               extractor: FeatureExtractor) -> Tensor:
    """alpha * pixel + beta * frequency + gamma * perceptual."""
    acc = ops.scale(charbonnier(xhat, x), w.alpha)
    if w.beta:
        acc = ops.add(acc, ops.scale(freq_loss(xhat, x), w.beta))
    if w.gamma:
        acc = ops.add(acc, ops.scale(perceptual_loss(extractor, xhat, x), w.gamma))
    return acc
