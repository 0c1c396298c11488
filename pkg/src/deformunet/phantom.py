"""Synthetic head-like test images: a bright elliptical shell around a
dim interior, with a handful of random ellipses inside. Stands in for
clinical data at desk scale; values live in [0,1]."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List

import numpy as np

from .engine import load_array, save_array


@dataclass
class EllipseSpec:
    cy: float
    cx: float
    ay: float
    ax: float
    angle: float
    intensity: float


@dataclass
class Phantom:
    extent: int
    ellipses: List[EllipseSpec]
    image: np.ndarray


def _render(extent: int, ellipses: List[EllipseSpec]) -> np.ndarray:
    y = np.linspace(-1.0, 1.0, extent)
    x = np.linspace(-1.0, 1.0, extent)
    yy, xx = np.meshgrid(y, x, indexing="ij")
    img = np.zeros((extent, extent), dtype=np.float64)
    for e in ellipses:
        c, s = np.cos(e.angle), np.sin(e.angle)
        u = (yy - e.cy) * c + (xx - e.cx) * s
        v = -(yy - e.cy) * s + (xx - e.cx) * c
        inside = (u / e.ay) ** 2 + (v / e.ax) ** 2 <= 1.0
        img[inside] += e.intensity
    return np.clip(img, 0.0, 1.0)


def make_phantom(rng: np.random.Generator, extent: int) -> Phantom:
    ellipses = [
        EllipseSpec(0.0, 0.0, 0.86, 0.70, 0.0, 0.95),      # skull shell
        EllipseSpec(0.0, 0.0, 0.78, 0.62, 0.0, -0.72),     # interior drop
    ]
    for _ in range(int(rng.integers(6, 13))):
        ellipses.append(EllipseSpec(
            cy=rng.uniform(-0.45, 0.45),
            cx=rng.uniform(-0.38, 0.38),
            ay=rng.uniform(0.06, 0.30),
            ax=rng.uniform(0.06, 0.30),
            angle=rng.uniform(0.0, np.pi),
            intensity=rng.uniform(-0.18, 0.42),
        ))
    return Phantom(extent=extent, ellipses=ellipses, image=_render(extent, ellipses))


def phantom_gen(seed: int, n: int, extent: int) -> List[Phantom]:
    """Deterministic dataset of n phantoms."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return [make_phantom(rng, extent) for _ in range(n)]


def save_dataset(directory, phantoms: List[Phantom]) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, ph in enumerate(phantoms):
        path = os.path.join(directory, f"phantom_{i:03d}.dtns")
        save_array(path, ph.image.astype(np.float32))
        paths.append(path)
    return paths


def load_dataset(directory) -> List[np.ndarray]:
    names = sorted(f for f in os.listdir(directory) if f.endswith(".dtns"))
    if not names:
        raise FileNotFoundError(f"no .dtns images found in {directory}")
    return [np.asarray(load_array(os.path.join(directory, f)), dtype=np.float64)
            for f in names]
