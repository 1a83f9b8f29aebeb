"""Deterministic natural-image crops for tests, demos and calibration.

Crops come from the photographs bundled with scikit-image. Every crop is
rescaled by a random factor below 0.9: the sources are JPEG-derived, and
resampling removes their 8x8 block grid besides varying texture scale.
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from skimage import data
from skimage.transform import rescale

from .raster import write_png

SOURCES = ("astronaut", "coffee", "chelsea", "rocket")


@lru_cache(maxsize=None)
def _source(name: str) -> np.ndarray:
    return getattr(data, name)().astype(np.float64) / 255.0


def natural_crops(n: int, size: int = 128, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    crops = []
    for i in range(n):
        src = _source(SOURCES[i % len(SOURCES)])
        min_scale = size / min(src.shape[:2])
        scale = rng.uniform(max(min_scale, 0.35), 0.9)
        img = rescale(src, scale, channel_axis=-1, anti_aliasing=True, order=1)
        y = rng.integers(0, img.shape[0] - size + 1)
        x = rng.integers(0, img.shape[1] - size + 1)
        crops.append(np.clip(img[y:y + size, x:x + size].copy(), 0.0, 1.0))
    return crops


def write_corpus(out_dir, n: int, size: int = 128, seed: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(natural_crops(n, size, seed)):
        p = out / f"clean_{i:04d}.png"
        write_png(p, img)
        paths.append(p)
    return paths
