"""Sequential restoration environment: state = features + action record,
step = apply one tool, reward = change in evaluator score."""
from __future__ import annotations

import numpy as np

from .features import assemble_state, empty_record, extract_features, update_action_record
from .raster import as_raster
from .reward import ProxyProvider, RewardProvider
from .tools import ToolSpec, apply_tool, stop_index, validate_registry


class EnvError(RuntimeError):
    pass


class TransitionMemo:
    """Memo of (features, score, image) per (start key, action prefix).

    Only valid when the provider is deterministic and fixed per start key.
    Images are kept only for prefixes shorter than ``keep_depth`` (deeper
    nodes are never expanded) and only up to ``max_images``; a missing image
    is rebuilt by replaying the prefix.
    """

    def __init__(self, keep_depth: int, max_images: int = 512):
        self.keep_depth = keep_depth
        self.max_images = max_images
        self.n_images = 0
        self.table: dict = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self.table)


class RestorationEnv:
    def __init__(self, registry: list[ToolSpec], provider: RewardProvider | None = None,
                 t_max: int = 5, memo: TransitionMemo | None = None):
        validate_registry(registry)
        if t_max < 1:
            raise ValueError("t_max must be >= 1")
        self.registry = registry
        self.n_actions = len(registry)
        self.stop = stop_index(registry)
        self.provider = provider
        self.t_max = t_max
        self.memo = memo
        self.score_calls = 0
        self.done = True
        self.image = None

    # the proxy scores from the same features the state uses; reuse them
    def _score(self, img, feats) -> float:
        self.score_calls += 1
        if isinstance(self.provider, ProxyProvider):
            return self.provider.score_features(feats)
        return float(self.provider.score(img))

    def _observe(self, img):
        feats = extract_features(img)
        return feats, self._score(img, feats)

    def reset(self, image: np.ndarray, provider: RewardProvider | None = None, key=None) -> np.ndarray:
        if provider is not None:
            self.provider = provider
        if self.provider is None:
            raise EnvError("no reward provider configured")
        self.key = key
        self.actions: list[int] = []
        self.step_count = 0
        self.record = empty_record(self.n_actions)
        self.done = False
        self.root = as_raster(image)
        hit = self._memo_get(self.actions)
        if hit is not None:
            self.features, self.score = hit[0], hit[1]
            self.image = self.root
        else:
            self.image = self.root
            self.features, self.score = self._observe(self.image)
            self._memo_put()
        self.initial_score = self.score
        return self.state()

    def state(self) -> np.ndarray:
        return assemble_state(self.features, self.record)

    def _memo_get(self, actions):
        if self.memo is None or self.key is None:
            return None
        hit = self.memo.table.get((self.key, tuple(actions)))
        if hit is None:
            self.memo.misses += 1
        else:
            self.memo.hits += 1
        return hit

    def _memo_put(self):
        if self.memo is None or self.key is None:
            return
        keep = None
        if len(self.actions) < self.memo.keep_depth and self.memo.n_images < self.memo.max_images:
            keep = self.image
            self.memo.n_images += 1
        self.memo.table[(self.key, tuple(self.actions))] = (self.features, self.score, keep)

    def current_image(self) -> np.ndarray:
        if self.image is None:
            img = self.root
            for a in self.actions:
                img = apply_tool(self.registry[a], img)
            self.image = img
        return self.image

    def step(self, action: int):
        if self.done:
            raise EnvError("episode is done; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise EnvError(f"action {action} out of range")
        if action == self.stop:
            self.done = True
            return self.state(), 0.0, True
        prev = self.score
        hit = self._memo_get(self.actions + [action])
        if hit is not None:
            self.actions.append(action)
            self.features, self.score, self.image = hit
        else:
            try:
                img = apply_tool(self.registry[action], self.current_image())
                self.actions.append(action)
                self.image = img
                self.features, self.score = self._observe(img)
            except Exception:
                # no partial episodes: the caller discards this trajectory
                self.done = True
                raise
            self._memo_put()
        self.record = update_action_record(self.record, action)
        self.step_count += 1
        if self.step_count >= self.t_max:
            self.done = True
        return self.state(), self.score - prev, self.done
