"""Synthetic degradations and the 15 mixed-degradation cases.

Each degradation is split into a parameter sampler and a pure operator so
that every random draw can be recorded and replayed exactly.
"""
from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from .raster import (
    Kernel,
    RasterError,
    as_raster,
    clamp,
    convolve2d,
    hsv_to_rgb,
    read_png,
    rgb_to_hsv,
    write_png,
)

log = logging.getLogger(__name__)


class DegradationKind(str, enum.Enum):
    DARK = "dark"
    DEFOCUS_BLUR = "defocus_blur"
    MOTION_BLUR = "motion_blur"
    RAIN = "rain"
    NOISE = "noise"
    HAZE = "haze"
    JPEG = "jpeg"


K = DegradationKind


@dataclass(frozen=True)
class CaseRecipe:
    case_id: int
    setting: str
    sequence: tuple[DegradationKind, ...]

    @property
    def name(self) -> str:
        return "+".join(k.value for k in self.sequence)


CASES: dict[int, CaseRecipe] = {
    r.case_id: r
    for r in [
        CaseRecipe(1, "I", (K.DARK, K.NOISE)),
        CaseRecipe(2, "I", (K.DEFOCUS_BLUR, K.JPEG)),
        CaseRecipe(3, "I", (K.MOTION_BLUR, K.DARK)),
        CaseRecipe(4, "I", (K.NOISE, K.JPEG)),
        CaseRecipe(5, "I", (K.RAIN, K.HAZE)),
        CaseRecipe(6, "II", (K.HAZE, K.NOISE)),
        CaseRecipe(7, "II", (K.MOTION_BLUR, K.JPEG)),
        CaseRecipe(8, "II", (K.RAIN, K.DARK)),
        CaseRecipe(9, "III", (K.DARK, K.DEFOCUS_BLUR, K.JPEG)),
        CaseRecipe(10, "III", (K.MOTION_BLUR, K.DEFOCUS_BLUR, K.NOISE)),
        CaseRecipe(11, "III", (K.RAIN, K.DARK, K.NOISE)),
        CaseRecipe(12, "III", (K.RAIN, K.HAZE, K.NOISE)),
        CaseRecipe(13, "IV", (K.HAZE, K.DARK, K.MOTION_BLUR, K.JPEG)),
        CaseRecipe(14, "IV", (K.RAIN, K.HAZE, K.DEFOCUS_BLUR, K.JPEG)),
        CaseRecipe(15, "IV", (K.RAIN, K.MOTION_BLUR, K.DEFOCUS_BLUR, K.NOISE, K.JPEG)),
    ]
}

SETTINGS = {s: [c.case_id for c in CASES.values() if c.setting == s] for s in ("I", "II", "III", "IV")}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


# ---------------------------------------------------------------- dark

def darken(img: np.ndarray, strategy: str, amount: float) -> np.ndarray:
    """Lower the HSV value channel; ``amount`` is alpha, gamma or the offset."""
    hsv = rgb_to_hsv(img)
    v = hsv[..., 2]
    if strategy == "linear":
        v = v * amount
    elif strategy == "gamma":
        v = v ** amount
    elif strategy == "constant":
        v = np.maximum(v - amount, 0.0)
    else:
        raise ValueError(f"unknown dark strategy {strategy!r}")
    hsv[..., 2] = v
    return hsv_to_rgb(hsv)


def sample_dark(rng, strategy: str | None = None) -> dict:
    if strategy is None:
        strategy = str(rng.choice(["linear", "gamma", "constant"]))
    lo, hi = {"linear": (0.3, 0.6), "gamma": (1.8, 3.0), "constant": (0.25, 0.5)}[strategy]
    return {"strategy": strategy, "amount": float(rng.uniform(lo, hi))}


def apply_dark(img, strategy: str | None = None, rng=None, **params) -> np.ndarray:
    p = params or sample_dark(rng, strategy)
    p.setdefault("strategy", strategy)
    return darken(as_raster(img), p["strategy"], p["amount"])


# ---------------------------------------------------------------- blur

def defocus(img: np.ndarray, radius: float) -> np.ndarray:
    return convolve2d(img, Kernel.disk(radius))


def sample_defocus(rng) -> dict:
    return {"radius": int(rng.integers(2, 7))}


def apply_defocus_blur(img, rng=None, **params) -> np.ndarray:
    p = params or sample_defocus(rng)
    return defocus(as_raster(img), p["radius"])


def motion(img: np.ndarray, length: int, angle: float) -> np.ndarray:
    return convolve2d(img, Kernel.line(length, angle))


def sample_motion(rng) -> dict:
    return {"length": int(rng.integers(5, 16)), "angle": float(rng.uniform(0.0, np.pi))}


def apply_motion_blur(img, rng=None, **params) -> np.ndarray:
    p = params or sample_motion(rng)
    return motion(as_raster(img), p["length"], p["angle"])


# ---------------------------------------------------------------- noise

def add_noise(img: np.ndarray, kind: str, scale: float, rng) -> np.ndarray:
    """Gaussian (``scale`` = sigma) or Poisson (``scale`` = photon count s)."""
    if kind == "gaussian":
        if scale == 0:
            return img.copy()
        return clamp(img + rng.normal(0.0, scale, size=img.shape))
    if kind == "poisson":
        return clamp(rng.poisson(img * scale) / scale)
    raise ValueError(f"unknown noise kind {kind!r}")


def sample_noise(rng, kind: str | None = None) -> dict:
    if kind is None:
        kind = str(rng.choice(["gaussian", "poisson"]))
    if kind == "gaussian":
        scale = float(rng.uniform(0.02, 0.1))
    else:
        scale = float(rng.uniform(50.0, 200.0))
    return {"kind": kind, "scale": scale, "noise_seed": int(rng.integers(0, 2**63 - 1))}


def apply_noise(img, kind: str | None = None, rng=None, **params) -> np.ndarray:
    p = params or sample_noise(rng, kind)
    p.setdefault("kind", kind)
    noise_rng = make_rng(p["noise_seed"]) if "noise_seed" in p else rng
    return add_noise(as_raster(img), p["kind"], p["scale"], noise_rng)


# ---------------------------------------------------------------- rain

def rain(img: np.ndarray, density: float, amplitude: float, length: int, angle: float, rng) -> np.ndarray:
    """Composite bright streaks: sparse drops smeared by a line kernel.

    An isolated streak has brightness ``amplitude / sqrt(length)``; overlaps add.
    """
    if density == 0:
        return img.copy()
    drops = (rng.random(img.shape[:2]) < density) * amplitude * np.sqrt(length)
    streak = Kernel.line(length, angle).weights
    layer = ndimage.correlate(drops, streak, mode="constant")
    return clamp(img + layer[..., None])


def sample_rain(rng) -> dict:
    return {
        "density": float(rng.uniform(0.01, 0.05)),
        "amplitude": float(rng.uniform(0.4, 0.8)),
        "length": int(rng.integers(7, 16)),
        "angle": float(rng.uniform(np.pi / 3, 2 * np.pi / 3)),
        "noise_seed": int(rng.integers(0, 2**63 - 1)),
    }


def apply_rain(img, rng=None, **params) -> np.ndarray:
    p = params or sample_rain(rng)
    drop_rng = make_rng(p["noise_seed"]) if "noise_seed" in p else rng
    return rain(as_raster(img), p["density"], p["amplitude"], p["length"], p["angle"], drop_rng)


# ---------------------------------------------------------------- haze

def depth_ramp(h: int, w: int) -> np.ndarray:
    """Vertical depth from 1.0 at the top row to 0.5 at the bottom row.

    A deeper ramp adds a top-to-bottom luminance gradient strong enough to
    raise global luma std on flat scenes, so haze would no longer lower it.
    """
    d = np.linspace(1.0, 0.5, h) if h > 1 else np.array([0.75])
    return np.repeat(d[:, None], w, axis=1)


def haze(img: np.ndarray, airlight: float, beta: float, transmission: np.ndarray | None = None) -> np.ndarray:
    if transmission is None:
        transmission = np.exp(-beta * depth_ramp(*img.shape[:2]))
    t = transmission[..., None]
    return clamp(img * t + airlight * (1.0 - t))


def sample_haze(rng) -> dict:
    return {"airlight": float(rng.uniform(0.7, 1.0)), "beta": float(rng.uniform(1.0, 2.5))}


def apply_haze(img, rng=None, **params) -> np.ndarray:
    p = params or sample_haze(rng)
    return haze(as_raster(img), p["airlight"], p["beta"])


# ---------------------------------------------------------------- jpeg

JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
_YCC_INV = np.linalg.inv(_YCC)


def quant_table(quality: int) -> np.ndarray:
    """Annex-K scaled luminance table, entries clamped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantization round trip in YCbCr (no entropy coding).

    The DC coefficient is kept exact so flat blocks survive unchanged; all AC
    coefficients are quantized with the scaled table.
    """
    q = quant_table(quality)
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    ycc = (img * 255.0) @ _YCC.T
    ycc[..., 0] -= 128.0
    ycc = np.pad(ycc, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = ycc.shape[:2]
    out = np.empty_like(ycc)
    for ch in range(3):
        blocks = ycc[..., ch].reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
        coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
        dc = coef[..., 0, 0].copy()
        coef = np.round(coef / q) * q
        coef[..., 0, 0] = dc
        rec = fft.idctn(coef, axes=(2, 3), norm="ortho")
        out[..., ch] = rec.transpose(0, 2, 1, 3).reshape(H, W)
    out = out[:h, :w]
    out[..., 0] += 128.0
    return clamp((out @ _YCC_INV.T) / 255.0)


def sample_jpeg(rng, quality=None) -> dict:
    if quality is None or quality == "random":
        quality = int(rng.choice([5, 40, 90]))
    return {"quality": int(quality)}


def apply_jpeg(img, quality=None, rng=None, **params) -> np.ndarray:
    p = params or sample_jpeg(rng, quality)
    return jpeg_roundtrip(as_raster(img), p["quality"])


# ---------------------------------------------------------------- cases

_SAMPLERS = {
    K.DARK: sample_dark,
    K.DEFOCUS_BLUR: sample_defocus,
    K.MOTION_BLUR: sample_motion,
    K.RAIN: sample_rain,
    K.NOISE: sample_noise,
    K.HAZE: sample_haze,
    K.JPEG: sample_jpeg,
}
_APPLIERS = {
    K.DARK: apply_dark,
    K.DEFOCUS_BLUR: apply_defocus_blur,
    K.MOTION_BLUR: apply_motion_blur,
    K.RAIN: apply_rain,
    K.NOISE: apply_noise,
    K.HAZE: apply_haze,
    K.JPEG: apply_jpeg,
}


def sample_params(kind: DegradationKind, rng, /, **fixed) -> dict:
    return _SAMPLERS[DegradationKind(kind)](rng, **fixed)


def apply_degradation(img, kind: DegradationKind, params: dict) -> np.ndarray:
    """Replay one degradation from recorded parameters (pure)."""
    return _APPLIERS[DegradationKind(kind)](img, **dict(params))


def synth_case(clean, recipe: CaseRecipe | int, rng, overrides: dict | None = None):
    """Apply ``recipe.sequence`` in order with fresh draws from ``rng``.

    ``overrides`` maps a kind to fixed sampler arguments, e.g.
    ``{DegradationKind.DARK: {"strategy": "gamma"}}``.
    Returns ``(image, records)``; each record is ``{"kind", "params"}``.
    """
    if isinstance(recipe, int):
        recipe = CASES[recipe]
    overrides = overrides or {}
    img = as_raster(clean)
    records = []
    for kind in recipe.sequence:
        params = sample_params(kind, rng, **overrides.get(kind, {}))
        img = apply_degradation(img, kind, params)
        records.append({"kind": kind.value, "params": params})
    return img, records


def replay_case(clean, records: list[dict]) -> np.ndarray:
    img = as_raster(clean)
    for rec in records:
        img = apply_degradation(img, rec["kind"], rec["params"])
    return img


# ---------------------------------------------------------------- dataset

class DatasetError(RasterError):
    pass


def list_pngs(clean_dir: str | os.PathLike) -> list[Path]:
    d = Path(clean_dir)
    if not d.is_dir():
        raise DatasetError(f"clean directory does not exist: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DatasetError(f"no PNG files in {d}")
    return files


def synth_dataset(clean_dir, out_dir, cases=(1, 2, 3, 4, 5), n_per_case: int = 20, seed: int = 0,
                  overrides: dict | None = None) -> Path:
    """Degrade clean PNGs round-robin and write ``manifest.jsonl`` in ``out_dir``.

    Row ``i`` (global index over all cases) uses ``make_rng(seed ^ i)``.
    """
    files = list_pngs(clean_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict[Path, np.ndarray] = {}
    rows = []
    index = 0
    for cid in cases:
        recipe = CASES[int(cid)]
        for i in range(n_per_case):
            src = files[i % len(files)]
            if src not in cache:
                cache[src] = read_png(src)
            row_seed = seed ^ index
            img, records = synth_case(cache[src], recipe, make_rng(row_seed), overrides)
            name = f"case{recipe.case_id:02d}_{i:04d}.png"
            write_png(out / name, img)
            rows.append({
                "clean": str(src.resolve()),
                "degraded": name,
                "case_id": recipe.case_id,
                "setting": recipe.setting,
                "seed": row_seed,
                "params": records,
            })
            index += 1
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("wrote %d rows to %s", len(rows), manifest)
    return manifest


def read_manifest(path) -> list[dict]:
    """Load manifest rows with ``clean`` and ``degraded`` resolved to absolute paths."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            for key in ("clean", "degraded"):
                if key in row and row[key] is not None and not os.path.isabs(row[key]):
                    row[key] = str((path.parent / row[key]).resolve())
            rows.append(row)
    return rows
