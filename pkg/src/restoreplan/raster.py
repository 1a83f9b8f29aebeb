"""Raster primitives: float RGB images in [0, 1], HSV conversion, convolution,
full-reference metrics and PNG I/O.

A raster is a plain ``numpy`` array of shape ``(H, W, 3)`` and dtype float64.
Every public function returns a fresh, clamped array and never mutates its
input.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class RasterError(ValueError):
    """Invalid raster input (shape, range, or size)."""


def as_raster(img) -> np.ndarray:
    """Validate and copy ``img`` into a clamped float64 (H, W, 3) array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise RasterError(f"expected an (H, W, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RasterError("raster must have positive width and height")
    if not np.all(np.isfinite(arr)):
        raise RasterError("raster contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


def clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def luma(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV with every channel in [0, 1] (hue in [0, 1))."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    vmax = img.max(axis=-1)
    vmin = img.min(axis=-1)
    delta = vmax - vmin

    s = np.zeros_like(vmax)
    np.divide(delta, vmax, out=s, where=vmax > 0)

    h = np.zeros_like(vmax)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (vmax - r) / safe
    gc = (vmax - g) / safe
    bc = (vmax - b) / safe
    is_r = (vmax == r) & (delta > 0)
    is_g = (vmax == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = np.where(is_r, bc - gc, h)
    h = np.where(is_g, 2.0 + rc - bc, h)
    h = np.where(is_b, 4.0 + gc - rc, h)
    h = (h / 6.0) % 1.0
    return np.stack([h, s, vmax], axis=-1)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, s, v = img[..., 0] % 1.0, img[..., 1], img[..., 2]
    h6 = h * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return clamp(np.stack([r, g, b], axis=-1))


@dataclass(frozen=True)
class Kernel:
    """Odd-sized square correlation kernel."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise RasterError(f"kernel must be odd-sized and square, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls) -> "Kernel":
        return cls(np.ones((1, 1)))

    @classmethod
    def box(cls, k: int) -> "Kernel":
        return cls(np.full((k, k), 1.0 / (k * k)))

    @classmethod
    def disk(cls, radius: float) -> "Kernel":
        """Normalized disk with a one-pixel anti-aliased rim."""
        half = int(np.ceil(radius))
        yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
        dist = np.hypot(xx, yy)
        w = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        return cls(w / w.sum())

    @classmethod
    def line(cls, length: int, angle: float, normalize: bool = True) -> "Kernel":
        """Line segment of ``length`` taps through the centre, ``angle`` in
        radians counter-clockwise from the +x axis, bilinearly splatted."""
        length = max(int(length), 1)
        k = length if length % 2 else length + 1
        c = k // 2
        w = np.zeros((k, k))
        offsets = np.arange(length) - (length - 1) / 2.0
        xs = c + offsets * np.cos(angle)
        ys = c - offsets * np.sin(angle)
        for x, y in zip(xs, ys):
            x0, y0 = int(np.floor(x + 1e-9)), int(np.floor(y + 1e-9))
            fx, fy = x - x0, y - y0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    weight = wx * wy
                    if weight > 1e-12 and 0 <= y0 + dy < k and 0 <= x0 + dx < k:
                        w[y0 + dy, x0 + dx] += weight
        if normalize:
            w /= w.sum()
        return cls(w)


def convolve2d(img: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Per-channel correlation with replicate border padding."""
    img = np.asarray(img, dtype=np.float64)
    if kernel.size == 1:
        return clamp(img * kernel.weights[0, 0])
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.correlate(img[..., ch], kernel.weights, mode="nearest")
    return clamp(out)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RasterError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with peak 1.0, capped at ``PSNR_CAP`` for MSE < 1e-10."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _box_mean_valid(x: np.ndarray, w: int) -> np.ndarray:
    c = np.pad(np.cumsum(np.cumsum(x, axis=0), axis=1), ((1, 0), (1, 0)))
    s = c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]
    return s / (w * w)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all 8x8 luminance windows (stride 1, uniform weights)."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise RasterError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x, y = luma(a), luma(b)
    w = SSIM_WINDOW
    mx, my = _box_mean_valid(x, w), _box_mean_valid(y, w)
    vx = np.maximum(_box_mean_valid(x * x, w) - mx * mx, 0.0)
    vy = np.maximum(_box_mean_valid(y * y, w) - my * my, 0.0)
    cxy = _box_mean_valid(x * y, w) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def read_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise RasterError(f"cannot read image {os.fspath(path)}: {exc}") from exc
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(clamp(img) * 255.0).astype(np.uint8)


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")
