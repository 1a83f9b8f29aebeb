"""Handcrafted degradation-sensitive image features and the policy state.

The feature vector has a fixed width of 32. Global statistics are measured
at a canonical scale (integer block-mean downsampling towards a 128-pixel
short side) so the same scene at different resolutions gives close values;
blockiness is measured at native resolution because the 8-pixel grid does
not survive resampling.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .raster import RasterError, luma, rgb_to_hsv

FEATURE_DIM = 32
MIN_SIDE = 32
CANONICAL_SIDE = 128

SLOTS = (
    "mean_luma",
    "std_luma",
    *(f"hist_{i}" for i in range(8)),
    "mean_v",
    "mean_s",
    "gradient_mean",
    "sharpness",
    "noise",
    "dark_channel",
    "blockiness",
    "directional",
    "high_freq",
)
SLOT = {name: i for i, name in enumerate(SLOTS)}

# x / (x + kappa) squashing constants, calibrated on clean natural crops
KAPPA = {
    "std_luma": 0.05,
    "gradient_mean": 0.05,
    "sharpness": 0.0003,
    "noise": 0.08,
    "dark_channel": 2.0,
    "blockiness": 0.015,
    "high_freq": 0.02,
}
# logistic centre and width for the near-vertical streak energy share
DIRECTIONAL_CENTER = 0.25
DIRECTIONAL_WIDTH = 0.05
DIRECTIONAL_BAND_DEG = 35.0

_LAPLACE4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def squash(x: float, kappa: float) -> float:
    x = max(float(x), 0.0)
    return x / (x + kappa)


def canonical(img: np.ndarray) -> np.ndarray:
    f = min(img.shape[0], img.shape[1]) // CANONICAL_SIDE
    if f <= 1:
        return img
    h, w = (img.shape[0] // f) * f, (img.shape[1] // f) * f
    return img[:h, :w].reshape(h // f, f, w // f, f, 3).mean(axis=(1, 3))


def noise_sigma(y: np.ndarray) -> float:
    """Robust noise std from the median absolute 4-neighbour Laplacian."""
    lap = ndimage.correlate(y, _LAPLACE4, mode="nearest")[1:-1, 1:-1]
    return float(1.4826 * np.median(np.abs(lap)) / np.sqrt(20.0))


def blockiness_raw(y: np.ndarray, block: int = 8) -> float:
    """Mean |step| across 8-aligned boundaries minus the mean |step| of the
    two interior neighbours on either side, over both axes, floored at 0."""
    vals = []
    for arr in (y, y.T):
        d = np.abs(np.diff(arr, axis=1))  # d[:, j] is the step between columns j and j+1
        bounds = np.arange(block - 1, d.shape[1] - 1, block)
        if bounds.size == 0:
            continue
        baseline = 0.5 * (d[:, bounds - 1] + d[:, bounds + 1])
        vals.append(float(np.mean(d[:, bounds] - baseline)))
    return max(float(np.mean(vals)) if vals else 0.0, 0.0)


def _band_share(y: np.ndarray, band_deg: float) -> float:
    gx = ndimage.sobel(y, axis=1, mode="nearest")
    gy = ndimage.sobel(y, axis=0, mode="nearest")
    energy = gx * gx + gy * gy
    total = float(energy.sum())
    if total <= 1e-20:
        return 0.0
    in_band = np.abs(gy) <= np.tan(np.radians(band_deg)) * np.abs(gx)
    return float(energy[in_band].sum()) / total


def directional_ratio(y: np.ndarray, band_deg: float = DIRECTIONAL_BAND_DEG) -> float:
    """Near-vertical share of thin-bright-structure gradient energy, minus the
    same share for the coarse scene.

    The share is the fraction of gradient energy whose gradient lies within
    ``band_deg`` of horizontal. Thin bright structures come from a 3x3 white
    top-hat; the coarse scene is a sigma=2 Gaussian blur. Subtracting the
    coarse share keeps vertical scene structure (buildings, trunks) from
    reading as streaks. Result lies in [-1, 1].
    """
    th = y - ndimage.grey_opening(y, size=(3, 3), mode="nearest")
    coarse = ndimage.gaussian_filter(y, 2.0, mode="nearest")
    return _band_share(th, band_deg) - _band_share(coarse, band_deg)


def raw_statistics(img: np.ndarray) -> dict:
    """Unsquashed statistics behind every named slot."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise RasterError(f"expected an (H, W, 3) raster, got {img.shape}")
    if min(img.shape[:2]) < MIN_SIDE:
        raise RasterError(f"image too small for feature extraction: {img.shape[:2]} (min side {MIN_SIDE})")
    native_y = luma(img)
    small = canonical(img)
    y = luma(small)
    hsv = rgb_to_hsv(small)

    gx = np.diff(y, axis=1)[:-1, :]
    gy = np.diff(y, axis=0)[:, :-1]
    lap = ndimage.correlate(y, _LAPLACE4, mode="nearest")
    smooth = ndimage.gaussian_filter(y, 1.0, mode="nearest")
    dark = ndimage.minimum_filter(small.min(axis=-1), size=7, mode="nearest")

    hist = np.histogram(np.clip(y, 0, 1), bins=8, range=(0.0, 1.0))[0] / y.size
    sigma = noise_sigma(y)
    # remove the white-noise share so noise does not read as contrast or detail
    return {
        "mean_luma": float(y.mean()),
        # shifting by one pixel keeps the variance and makes flat fields exactly 0
        "std_luma": float(np.sqrt(max((y - y.flat[0]).var() - sigma ** 2, 0.0))),
        "hist": hist,
        "mean_v": float(hsv[..., 2].mean()),
        "mean_s": float(hsv[..., 1].mean()),
        "gradient_mean": float(np.mean(np.hypot(gx, gy))),
        "sharpness": float(max(lap.var() - 20.0 * sigma ** 2, 0.0)),
        "noise": sigma,
        "dark_channel": float(dark.mean()),
        "blockiness": blockiness_raw(native_y),
        "directional": directional_ratio(y),
        "high_freq": float(np.sqrt(np.mean((y - smooth) ** 2))),
    }


def extract_features(img: np.ndarray) -> np.ndarray:
    raw = raw_statistics(img)
    f = np.zeros(FEATURE_DIM)
    f[SLOT["mean_luma"]] = raw["mean_luma"]
    f[SLOT["std_luma"]] = squash(raw["std_luma"], KAPPA["std_luma"])
    f[SLOT["hist_0"]:SLOT["hist_0"] + 8] = raw["hist"]
    f[SLOT["mean_v"]] = raw["mean_v"]
    f[SLOT["mean_s"]] = raw["mean_s"]
    for name in ("gradient_mean", "sharpness", "noise", "dark_channel", "blockiness", "high_freq"):
        f[SLOT[name]] = squash(raw[name], KAPPA[name])
    z = (raw["directional"] - DIRECTIONAL_CENTER) / DIRECTIONAL_WIDTH
    f[SLOT["directional"]] = 1.0 / (1.0 + np.exp(-z))
    return f


def empty_record(n_actions: int) -> np.ndarray:
    return np.zeros(n_actions)


def update_action_record(record: np.ndarray, chosen: int) -> np.ndarray:
    if not 0 <= chosen < len(record):
        raise IndexError(f"action {chosen} out of range for a record of length {len(record)}")
    out = np.array(record, dtype=np.float64, copy=True)
    out[chosen] = 1.0
    return out


def assemble_state(features: np.ndarray, record: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(features, dtype=np.float64), np.asarray(record, dtype=np.float64)])


def state_dim(n_actions: int) -> int:
    return FEATURE_DIM + n_actions
