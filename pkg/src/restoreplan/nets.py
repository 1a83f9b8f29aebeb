"""Actor and critic MLPs (Linear -> LayerNorm -> ReLU -> Linear) with exact
reverse-mode gradients, an Adam optimizer, and checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

HIDDEN = 128
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    def copy(self) -> "MlpParams":
        return MlpParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.as_dict().items()}

    @classmethod
    def from_json(cls, d: dict) -> "MlpParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def init_params(d_in: int, d_out: int, seed: int, hidden: int = HIDDEN) -> MlpParams:
    """He-uniform weights, zero biases, unit LayerNorm gain."""
    if d_in <= 0 or d_out <= 0 or hidden <= 0:
        raise ShapeError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / d_in)
    lim2 = np.sqrt(6.0 / hidden)
    return MlpParams(
        W1=rng.uniform(-lim1, lim1, (d_in, hidden)),
        b1=np.zeros(hidden),
        ln_gain=np.ones(hidden),
        ln_bias=np.zeros(hidden),
        W2=rng.uniform(-lim2, lim2, (hidden, d_out)),
        b2=np.zeros(d_out),
    )


def _as_batch(p: MlpParams, s) -> np.ndarray:
    x = np.asarray(s, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.d_in:
        raise ShapeError(f"state width {x.shape[-1]} does not match network input {p.d_in}")
    return x


def mlp_forward(p: MlpParams, s):
    """Batch forward; returns ``(out, cache)`` with ``out`` of shape (B, d_out)."""
    x = _as_batch(p, s)
    h = x @ p.W1 + p.b1
    mu = h.mean(axis=1, keepdims=True)
    var = h.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (h - mu) * inv
    y = xhat * p.ln_gain + p.ln_bias
    a = np.maximum(y, 0.0)
    out = a @ p.W2 + p.b2
    return out, (x, xhat, inv, y, a)


def mlp_backward(p: MlpParams, cache, dout) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dout * out)`` w.r.t. every parameter."""
    x, xhat, inv, y, a = cache
    dout = np.asarray(dout, dtype=np.float64)
    if dout.ndim == 1:
        dout = dout.reshape(x.shape[0], -1) if dout.size == x.shape[0] * p.d_out else dout[None, :]
    if dout.shape != (x.shape[0], p.d_out):
        raise ShapeError(f"upstream gradient shape {dout.shape} != {(x.shape[0], p.d_out)}")
    g = {"W2": a.T @ dout, "b2": dout.sum(axis=0)}
    da = dout @ p.W2.T
    dy = da * (y > 0)
    g["ln_gain"] = (dy * xhat).sum(axis=0)
    g["ln_bias"] = dy.sum(axis=0)
    dxhat = dy * p.ln_gain
    n = xhat.shape[1]
    dh = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    g["W1"] = x.T @ dh
    g["b1"] = dh.sum(axis=0)
    return g


def backward(p: MlpParams, s, upstream) -> dict[str, np.ndarray]:
    _, cache = mlp_forward(p, s)
    return mlp_backward(p, cache, upstream)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def actor_forward(p: MlpParams, s):
    """Return ``(logits, probs)``; a single state gives 1-D arrays."""
    logits, _ = mlp_forward(p, s)
    probs = softmax(logits)
    if np.ndim(s) == 1:
        return logits[0], probs[0]
    return logits, probs


def critic_forward(p: MlpParams, s):
    out, _ = mlp_forward(p, s)
    if np.ndim(s) == 1:
        return float(out[0, 0])
    return out[:, 0]


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: MlpParams, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        self.t = 0

    def step(self, params: MlpParams, grads: dict[str, np.ndarray]) -> MlpParams:
        """Update ``params`` in place and return it."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {k}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            setattr(params, k, getattr(params, k) - step)
        return params


def adam_step(params: MlpParams, grads, state: Adam, lr: float | None = None) -> tuple[MlpParams, Adam]:
    if lr is not None:
        state.lr = lr
    return state.step(params, grads), state


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, actor: MlpParams, critic: MlpParams | None, registry_fingerprint: str,
                    registry_json: str, config: dict, extra: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "d_in": actor.d_in,
        "d_out": actor.d_out,
        "registry_fingerprint": registry_fingerprint,
        "registry": json.loads(registry_json),
        "config": config,
        "actor": actor.to_json(),
        "critic": critic.to_json() if critic is not None else None,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path, expected_fingerprint: str | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    if expected_fingerprint is not None and doc["registry_fingerprint"] != expected_fingerprint:
        raise CheckpointError("registry fingerprint mismatch: checkpoint was trained with a different tool registry")
    doc["actor"] = MlpParams.from_json(doc["actor"])
    if doc.get("critic") is not None:
        doc["critic"] = MlpParams.from_json(doc["critic"])
    return doc
