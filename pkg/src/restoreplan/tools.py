"""Action space: classical restoration operators plus an explicit STOP.

Registry order is part of the checkpoint contract; ``fingerprint`` hashes the
serialized registry so a policy cannot be loaded against a different one.
"""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .raster import as_raster, clamp, hsv_to_rgb, read_png, rgb_to_hsv, write_png

STOP_NAME = "stop"


class ToolError(RuntimeError):
    """A tool could not produce an output image."""


@dataclass(frozen=True)
class ToolSpec:
    index: int
    name: str
    target: str
    params: dict = field(default_factory=dict)
    description: str = ""
    command: tuple[str, ...] | None = None

    @property
    def is_stop(self) -> bool:
        return self.target == STOP_NAME

    def to_dict(self) -> dict:
        d = asdict(self)
        d["command"] = list(self.command) if self.command else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToolSpec":
        cmd = d.get("command")
        return cls(d["index"], d["name"], d["target"], dict(d.get("params") or {}),
                   d.get("description", ""), tuple(cmd) if cmd else None)


# ---------------------------------------------------------------- operators

def _map_value(img: np.ndarray, fn) -> np.ndarray:
    hsv = rgb_to_hsv(img)
    hsv[..., 2] = np.clip(fn(hsv[..., 2]), 0.0, 1.0)
    return hsv_to_rgb(hsv)


def brighten_gamma(img, gamma: float = 2.0 / 3.0):
    return _map_value(img, lambda v: v ** gamma)


def brighten_const(img, offset: float = 40.0 / 255.0):
    return _map_value(img, lambda v: v + offset)


def clahe(img, tiles: int = 8, clip: float = 2.0):
    """Contrast-limited adaptive histogram equalization of the V channel."""
    op = cv2.createCLAHE(clipLimit=clip, tileGridSize=(tiles, tiles))

    def fn(v):
        v8 = np.round(v * 255.0).astype(np.uint8)
        return op.apply(v8).astype(np.float64) / 255.0

    return _map_value(img, fn)


def unsharp(img, radius: float, amount: float):
    blurred = np.stack([ndimage.gaussian_filter(img[..., c], radius, mode="nearest") for c in range(3)], -1)
    return clamp(img + amount * (img - blurred))


def median(img, size: int):
    # selection filter in float64, so untouched values come back bit-exact
    return np.stack([ndimage.median_filter(img[..., c], size=size, mode="nearest") for c in range(3)], -1)


def gauss_denoise(img, sigma: float = 1.0):
    return clamp(np.stack([ndimage.gaussian_filter(img[..., c], sigma, mode="nearest") for c in range(3)], -1))


def _deblock_axis(x: np.ndarray, block: int, threshold: float) -> np.ndarray:
    # operates along axis 1; boundaries between columns b-1 and b
    x = x.copy()
    for b in range(block, x.shape[1] - 1, block):
        if b < 2:
            continue
        p1, p0, q0, q1 = x[:, b - 2], x[:, b - 1], x[:, b], x[:, b + 1]
        step = q0 - p0
        step = np.where(np.abs(step) < threshold, step, 0.0)
        x[:, b - 2] = p1 + step / 6.0
        x[:, b - 1] = p0 + step / 3.0
        x[:, b] = q0 - step / 3.0
        x[:, b + 1] = q1 - step / 6.0
    return x


def deblock(img, block: int = 8, threshold: float = 0.12):
    """Turn small steps across block boundaries into ramps; large steps are
    treated as real edges and kept."""
    out = _deblock_axis(img, block, threshold)
    out = _deblock_axis(out.transpose(1, 0, 2), block, threshold).transpose(1, 0, 2)
    return clamp(out)


def dark_channel(img: np.ndarray, patch: int = 7) -> np.ndarray:
    return ndimage.minimum_filter(img.min(axis=-1), size=patch, mode="nearest")


def dcp_dehaze(img, patch: int = 7, omega: float = 0.95, t_min: float = 0.1, top: float = 0.001):
    """Dark-channel-prior dehazing without transmission refinement."""
    img = as_raster(img)
    dc = dark_channel(img, patch)
    flat = dc.ravel()
    n = max(int(np.ceil(flat.size * top)), 1)
    idx = np.argsort(flat, kind="stable")[-n:]
    airlight = np.maximum(img.reshape(-1, 3)[idx].mean(axis=0), 1e-3)
    t = 1.0 - omega * dark_channel(img / airlight, patch)
    t = np.maximum(t, t_min)[..., None]
    return clamp((img - airlight) / t + airlight)


_OPS = {
    "brighten_gamma": brighten_gamma,
    "brighten_const": brighten_const,
    "clahe": clahe,
    "unsharp_weak": unsharp,
    "unsharp_strong": unsharp,
    "median3": median,
    "median5": median,
    "gauss_denoise": gauss_denoise,
    "deblock": deblock,
    "dcp_dehaze": dcp_dehaze,
}


def default_registry() -> list[ToolSpec]:
    rows = [
        ("brighten_gamma", "dark", {"gamma": 2.0 / 3.0}, "V <- V^(2/3)"),
        ("brighten_const", "dark", {"offset": 40.0 / 255.0}, "V <- V + 40/255"),
        ("clahe", "dark", {"tiles": 8, "clip": 2.0}, "CLAHE on V, 8x8 tiles, clip 2.0"),
        ("unsharp_weak", "defocus_blur", {"radius": 1.0, "amount": 0.5}, "unsharp mask r=1 a=0.5"),
        ("unsharp_strong", "motion_blur", {"radius": 2.0, "amount": 1.0}, "unsharp mask r=2 a=1.0"),
        ("median3", "noise", {"size": 3}, "3x3 median filter"),
        ("median5", "rain", {"size": 5}, "5x5 median filter"),
        ("gauss_denoise", "noise", {"sigma": 1.0}, "Gaussian smoothing sigma=1"),
        ("deblock", "jpeg", {"block": 8, "threshold": 0.12}, "8x8 boundary ramp smoothing"),
        ("dcp_dehaze", "haze", {"patch": 7, "omega": 0.95, "t_min": 0.1, "top": 0.001},
         "dark channel prior dehazing"),
    ]
    reg = [ToolSpec(i, name, target, params, desc) for i, (name, target, params, desc) in enumerate(rows)]
    reg.append(ToolSpec(len(reg), STOP_NAME, STOP_NAME, {}, "end the episode"))
    return reg


def validate_registry(registry: list[ToolSpec]) -> None:
    if [t.index for t in registry] != list(range(len(registry))):
        raise ValueError("registry indices must be dense 0..n-1 in order")
    if not registry or not registry[-1].is_stop or any(t.is_stop for t in registry[:-1]):
        raise ValueError("STOP must be the last and only stop entry")


def serialize_registry(registry: list[ToolSpec]) -> str:
    return json.dumps([t.to_dict() for t in registry], sort_keys=True, separators=(",", ":"))


def deserialize_registry(text: str) -> list[ToolSpec]:
    reg = [ToolSpec.from_dict(d) for d in json.loads(text)]
    validate_registry(reg)
    return reg


def fingerprint(registry: list[ToolSpec]) -> str:
    return hashlib.sha256(serialize_registry(registry).encode()).hexdigest()


def stop_index(registry: list[ToolSpec]) -> int:
    return len(registry) - 1


def _run_external(spec: ToolSpec, img: np.ndarray) -> np.ndarray:
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = os.path.join(tmp, "in.png"), os.path.join(tmp, "out.png")
        write_png(src, img)
        try:
            proc = subprocess.run([*spec.command, src, dst], capture_output=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ToolError(f"tool {spec.name}: {exc}") from exc
        if proc.returncode != 0:
            raise ToolError(f"tool {spec.name} exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
        if not os.path.exists(dst):
            raise ToolError(f"tool {spec.name} produced no output")
        out = read_png(dst)
    if out.shape != img.shape:
        raise ToolError(f"tool {spec.name} changed dimensions {img.shape} -> {out.shape}")
    return out


def apply_tool(spec: ToolSpec, img: np.ndarray) -> np.ndarray:
    if spec.is_stop:
        raise ToolError("STOP is handled by the environment, not applied as a tool")
    img = as_raster(img)
    if spec.command:
        return _run_external(spec, img)
    try:
        op = _OPS[spec.name]
    except KeyError:
        raise ToolError(f"unknown tool {spec.name!r}") from None
    return op(img, **spec.params)
