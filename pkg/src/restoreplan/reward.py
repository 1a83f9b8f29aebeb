"""Quality evaluators. A step reward is always ``score(next) - score(current)``.

Three providers share the ``score(img) -> float`` interface:

* ``OraclePsnrProvider``: PSNR against a hidden clean image (supervised).
* ``ProxyProvider``: deterministic no-reference score on a 1..5 scale built
  from the degradation slots of the feature extractor.
* ``RemoteProvider``: HTTP client for an external scorer service.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import time
import urllib.error
import urllib.request

import numpy as np
from PIL import Image

from .features import SLOT, extract_features
from .raster import PSNR_CAP, psnr, to_uint8

log = logging.getLogger(__name__)


class ProviderError(RuntimeError):
    """The evaluator could not produce a score."""


class RewardProvider:
    name = "base"
    score_range = (-np.inf, np.inf)

    def score(self, img: np.ndarray) -> float:
        raise NotImplementedError

    def reward(self, before: np.ndarray, after: np.ndarray) -> float:
        return self.score(after) - self.score(before)


class OraclePsnrProvider(RewardProvider):
    name = "oracle"
    score_range = (0.0, PSNR_CAP)

    def __init__(self, clean: np.ndarray):
        self.clean = np.asarray(clean, dtype=np.float64)

    def score(self, img):
        return psnr(img, self.clean)


# mean V below this counts as underexposed; the dark penalty is linear below it
DARK_THRESHOLD = 0.5

PROXY_TERMS = ("noise", "blockiness", "blur", "haze", "dark", "rain", "contrast")


def proxy_penalties(features: np.ndarray) -> dict[str, float]:
    f = features
    return {
        "noise": f[SLOT["noise"]],
        "blockiness": f[SLOT["blockiness"]],
        "blur": 1.0 - f[SLOT["sharpness"]],
        "haze": f[SLOT["dark_channel"]],
        "dark": max(0.0, DARK_THRESHOLD - f[SLOT["mean_v"]]) / DARK_THRESHOLD,
        "rain": f[SLOT["directional"]],
        "contrast": 1.0 - f[SLOT["std_luma"]],
    }


class ProxyProvider(RewardProvider):
    """``clamp(5 - sum_k w_k * penalty_k, 1, 5)`` over the penalty terms."""

    name = "proxy"
    score_range = (1.0, 5.0)

    def __init__(self, weights: dict[str, float] | None = None):
        self.weights = {k: 1.0 for k in PROXY_TERMS}
        if weights:
            unknown = set(weights) - set(PROXY_TERMS)
            if unknown:
                raise ValueError(f"unknown proxy terms: {sorted(unknown)}")
            self.weights.update({k: float(v) for k, v in weights.items()})

    def score_features(self, features: np.ndarray) -> float:
        pen = proxy_penalties(features)
        total = sum(self.weights[k] * pen[k] for k in PROXY_TERMS)
        return float(min(max(5.0 - total, 1.0), 5.0))

    def score(self, img):
        return self.score_features(extract_features(img))


def encode_png_b64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(text: str) -> np.ndarray:
    data = base64.b64decode(text)
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


class RemoteProvider(RewardProvider):
    """Client for ``POST /score`` with body ``{"image": "<base64 png>"}``.

    Connection errors, timeouts and 5xx responses are retried with
    exponential backoff; a malformed body fails immediately. ``SCORER_URL``
    in the environment overrides ``endpoint``.
    """

    name = "remote"

    def __init__(self, endpoint: str | None = None, timeout: float = 10.0, retries: int = 3,
                 backoff: float = 0.1, score_range=(1.0, 5.0)):
        endpoint = os.environ.get("SCORER_URL") or endpoint
        if not endpoint:
            raise ValueError("remote provider needs an endpoint (config or SCORER_URL)")
        self.url = endpoint.rstrip("/") + "/score"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.score_range = tuple(score_range)
        self.calls = 0

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"content-type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read()

    def score(self, img):
        body = json.dumps({"image": encode_png_b64(img)}).encode()
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self.calls += 1
            try:
                raw = self._post(body)
                break
            except urllib.error.HTTPError as exc:
                last = exc
                if exc.code < 500:
                    raise ProviderError(f"scorer rejected request: HTTP {exc.code}") from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
            log.warning("scorer attempt %d/%d failed: %s", attempt + 1, self.retries + 1, last)
        else:
            raise ProviderError(f"scorer unavailable after {self.retries + 1} attempts: {last}")
        try:
            value = json.loads(raw)["score"]
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
                raise TypeError(f"non-numeric score {value!r}")
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"malformed scorer response: {raw[:200]!r}") from exc
        return float(value)


def make_provider(kind: str, clean: np.ndarray | None = None, **options) -> RewardProvider:
    if kind == "proxy":
        return ProxyProvider(options.get("weights"))
    if kind == "oracle":
        if clean is None:
            raise ValueError("oracle provider needs the clean image")
        return OraclePsnrProvider(clean)
    if kind == "remote":
        return RemoteProvider(options.get("endpoint"), options.get("timeout", 10.0),
                              options.get("retries", 3), options.get("backoff", 0.1))
    raise ValueError(f"unknown provider {kind!r}")
