"""Training loop, greedy planning and evaluation helpers."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .degrade import read_manifest
from .env import RestorationEnv, TransitionMemo
from .features import assemble_state, empty_record, extract_features, state_dim, update_action_record
from .nets import Adam, MlpParams, actor_forward, init_params, load_checkpoint, save_checkpoint
from .po import PoConfig, Trajectory, build_batch, collect_trajectory, ppo_update
from .raster import as_raster, read_png
from .reward import ProviderError, RewardProvider
from .tools import ToolError, ToolSpec, apply_tool, default_registry, fingerprint, serialize_registry, stop_index

log = logging.getLogger(__name__)

TELESCOPING_TOL = 1e-9


class TrainingAborted(RuntimeError):
    pass


@dataclass
class Sample:
    key: str
    degraded: np.ndarray
    clean: np.ndarray | None = None
    case_id: int | None = None
    setting: str | None = None


def load_samples(manifest_path) -> list[Sample]:
    out = []
    for row in read_manifest(manifest_path):
        out.append(Sample(key=str(row["degraded"]), degraded=read_png(row["degraded"]),
                          clean=read_png(row["clean"]) if row.get("clean") else None,
                          case_id=row.get("case_id"), setting=row.get("setting")))
    return out


ProviderFor = Callable[[Sample], RewardProvider]


# ---------------------------------------------------------------- inference

@dataclass
class Plan:
    actions: list[int]
    names: list[str]
    image: np.ndarray
    scores: list[float]
    forwards: int
    tool_calls: int

    def to_json(self, input_path: str = "", output_path: str = "") -> dict:
        return {"input": str(input_path), "actions": self.names, "scores": self.scores, "output": str(output_path)}


def infer_plan(actor: MlpParams, image: np.ndarray, registry: list[ToolSpec], t_max: int,
               provider: RewardProvider | None = None) -> Plan:
    """Greedy argmax loop. One forward per decision; when the cap is reached
    the final decision is still evaluated, so forwards == len(plan) + 1.
    ``scores`` holds the provider score of the input and after each tool."""
    stop = stop_index(registry)
    img = as_raster(image)
    record = empty_record(len(registry))
    actions: list[int] = []
    scores = [float(provider.score(img))] if provider is not None else []
    forwards = 0
    while True:
        logits, _ = actor_forward(actor, assemble_state(extract_features(img), record))
        forwards += 1
        a = int(np.argmax(logits))
        if a == stop or len(actions) >= t_max:
            break
        img = apply_tool(registry[a], img)
        actions.append(a)
        record = update_action_record(record, a)
        if provider is not None:
            scores.append(float(provider.score(img)))
    return Plan(actions, [registry[a].name for a in actions], img, scores, forwards, len(actions))


def greedy_rollout(env: RestorationEnv, actor: MlpParams, image, key=None) -> tuple[list[int], float, float]:
    """Greedy episode through the env (shares its memo). Returns (actions, initial, final score)."""
    state = env.reset(image, key=key)
    initial = env.score
    done = False
    actions = []
    while not done:
        logits, _ = actor_forward(actor, state)
        a = int(np.argmax(logits))
        state, _, done = env.step(a)
        if a != env.stop:
            actions.append(a)
    return actions, initial, env.score


def execute_plan(registry: list[ToolSpec], image, actions) -> np.ndarray:
    img = as_raster(image)
    for a in actions:
        img = apply_tool(registry[a], img)
    return img


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    actor: MlpParams
    critic: MlpParams
    log: list[dict] = field(default_factory=list)
    failures: int = 0
    episodes: int = 0
    max_telescoping_error: float = 0.0
    initial_eval: float | None = None
    seconds: float = 0.0


def _memo_key(tag: str, sample: Sample):
    return (tag, sample.key)


def greedy_eval(env: RestorationEnv, actor: MlpParams, samples: list[Sample], provider_for: ProviderFor) -> float:
    finals = []
    for s in samples:
        env.provider = provider_for(s)
        finals.append(greedy_rollout(env, actor, s.degraded, key=_memo_key("eval", s))[2])
    return float(np.mean(finals))


def train(cfg: PoConfig, samples: list[Sample], provider_for: ProviderFor,
          registry: list[ToolSpec] | None = None, heldout: list[Sample] | None = None,
          out_dir=None, memoize: bool = True, on_update: Callable[[dict], None] | None = None,
          augment: Callable[[Sample, np.random.Generator], Sample] | None = None) -> TrainResult:
    """Alternate rollout and update phases (single worker, bit-reproducible).

    ``provider_for(sample)`` returns the evaluator for one sample, which lets
    the PSNR oracle see that sample's clean image. With ``memoize`` the env
    caches transitions per (sample, action prefix); this assumes the
    provider is deterministic. ``augment(sample, rng)`` may return a fresh
    degraded version of a training sample for every episode (memo unused).
    """
    if not samples:
        raise ValueError("training set is empty")
    registry = registry or default_registry()
    t0 = time.perf_counter()
    n_actions = len(registry)
    rng = np.random.default_rng(cfg.seed)
    actor = init_params(state_dim(n_actions), n_actions, cfg.seed)
    critic = init_params(state_dim(n_actions), 1, cfg.seed + 1)
    actor_opt = Adam(actor, cfg.lr)
    critic_opt = Adam(critic, cfg.lr)
    use_critic = cfg.optimizer_variant == "ppo"
    aug_rng = np.random.default_rng([cfg.seed, 1])
    memo = TransitionMemo(cfg.t_max) if memoize else None
    env = RestorationEnv(registry, None, cfg.t_max, memo=memo)
    result = TrainResult(actor, critic)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    def checkpoint():
        if out is not None:
            save_checkpoint(out / "checkpoint.json", actor, critic, fingerprint(registry),
                            serialize_registry(registry), cfg.to_dict(),
                            {"updates_done": len(result.log)})

    def run_episode(sample: Sample) -> Trajectory | None:
        env.provider = provider_for(sample)
        key = None if augment else _memo_key("train", sample)
        try:
            tr = collect_trajectory(env, actor, critic if use_critic else None, rng,
                                    image=sample.degraded, key=key)
        except (ToolError, ProviderError) as exc:
            result.failures += 1
            log.warning("trajectory on %s discarded: %s", sample.key, exc)
            if result.failures > cfg.failure_budget:
                raise TrainingAborted(f"{result.failures} failed episodes exceed the budget "
                                      f"of {cfg.failure_budget}; last error: {exc}") from exc
            return None
        err = abs(tr.episode_return - (tr.final_score - tr.initial_score))
        result.max_telescoping_error = max(result.max_telescoping_error, err)
        if err > TELESCOPING_TOL:
            raise TrainingAborted(f"reward does not telescope on {sample.key}: error {err}")
        result.episodes += 1
        return tr

    if heldout:
        result.initial_eval = greedy_eval(env, actor, heldout, provider_for)
    cursor = 0
    try:
        for u in range(cfg.updates):
            trajs: list[Trajectory] = []
            if cfg.optimizer_variant == "grpo":
                for _ in range(cfg.episodes_per_update // cfg.grpo_group):
                    sample = samples[cursor % len(samples)]
                    cursor += 1
                    if augment:
                        sample = augment(sample, aug_rng)
                    group = [t for t in (run_episode(sample) for _ in range(cfg.grpo_group)) if t is not None]
                    # build_batch groups by fixed stride; incomplete groups are dropped
                    if len(group) == cfg.grpo_group:
                        trajs.extend(group)
            else:
                for _ in range(cfg.episodes_per_update):
                    sample = samples[cursor % len(samples)]
                    cursor += 1
                    if augment:
                        sample = augment(sample, aug_rng)
                    tr = run_episode(sample)
                    if tr is not None:
                        trajs.append(tr)
            if not trajs:
                raise TrainingAborted(f"update {u}: every episode failed")
            batch = build_batch(trajs, cfg)
            stats = ppo_update(batch, actor, critic if use_critic else None, actor_opt,
                               critic_opt if use_critic else None, cfg, u, rng)
            row = {
                "update": u,
                "mean_return": float(np.mean([t.episode_return for t in trajs])),
                "entropy": stats["loss_eb"],
                "loss_po": stats["loss_po"],
                "loss_vf": stats["loss_vf"],
                "loss_eb": stats["loss_eb"],
                "greedy_eval": None,
            }
            if heldout and ((u + 1) % cfg.eval_every == 0 or u == cfg.updates - 1):
                row["greedy_eval"] = greedy_eval(env, actor, heldout, provider_for)
            result.log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if on_update:
                on_update(row)
            if cfg.checkpoint_every and (u + 1) % cfg.checkpoint_every == 0:
                checkpoint()
        checkpoint()
    finally:
        if log_fh:
            log_fh.close()
    result.seconds = time.perf_counter() - t0
    return result


def load_policy(path, registry: list[ToolSpec] | None = None) -> tuple[MlpParams, dict]:
    registry = registry or default_registry()
    doc = load_checkpoint(path, expected_fingerprint=fingerprint(registry))
    return doc["actor"], doc
