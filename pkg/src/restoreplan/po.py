"""Rollouts, GAE, the clipped-surrogate update and group-relative advantages."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nets import Adam, MlpParams, critic_forward, log_softmax, mlp_backward, mlp_forward, softmax

log = logging.getLogger(__name__)


@dataclass
class PoConfig:
    lr: float = 0.01
    c1: float = 0.5
    c2: float = 0.05
    entropy_decay: float = 0.99
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    t_max: int = 5
    episodes_per_update: int = 32
    update_epochs: int = 4
    minibatch: int = 8
    updates: int = 300
    optimizer_variant: str = "ppo"
    grpo_group: int = 8
    seed: int = 0
    checkpoint_every: int = 50
    eval_every: int = 10
    failure_budget: int = 10
    max_grad_norm: float | None = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip epsilon must be positive")
        if self.optimizer_variant not in ("ppo", "grpo"):
            raise ValueError(f"unknown optimizer variant {self.optimizer_variant!r}")
        if self.t_max < 1 or self.episodes_per_update < 1 or self.minibatch < 1 or self.update_epochs < 1:
            raise ValueError("t_max, episodes_per_update, minibatch and update_epochs must be >= 1")
        if self.updates < 0:
            raise ValueError("updates must be >= 0")
        if self.optimizer_variant == "grpo":
            if self.grpo_group < 2:
                raise ValueError("grpo_group must be >= 2")
            if self.episodes_per_update % self.grpo_group:
                raise ValueError("episodes_per_update must be a multiple of grpo_group")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PoConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def entropy_coef(self, update_index: int) -> float:
        return self.c2 * self.entropy_decay ** update_index


@dataclass
class Transition:
    state: np.ndarray
    action: int
    log_prob_old: float
    value_old: float
    reward: float
    done: bool


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)
    terminal_value: float = 0.0
    initial_score: float = 0.0
    final_score: float = 0.0
    key: object = None

    def __len__(self):
        return len(self.transitions)

    @property
    def episode_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    @property
    def actions(self) -> list[int]:
        return [t.action for t in self.transitions]


def collect_trajectory(env, actor: MlpParams, critic: MlpParams | None, rng: np.random.Generator,
                       image=None, key=None) -> Trajectory:
    """Sample one episode. If ``image`` is given the env is reset on it first.

    Episodes end at STOP or at the env's step cap; either way the terminal
    value is 0. Tool or provider failures propagate; the partial trajectory
    is dropped by the caller.
    """
    state = env.reset(image, key=key) if image is not None else env.state()
    traj = Trajectory(initial_score=env.score, key=key)
    done = False
    while not done:
        logits, _ = mlp_forward(actor, state)
        logp = log_softmax(logits[0])
        probs = np.exp(logp)
        action = int(rng.choice(len(probs), p=probs / probs.sum()))
        value = critic_forward(critic, state) if critic is not None else 0.0
        next_state, reward, done = env.step(action)
        traj.transitions.append(Transition(state, action, float(logp[action]), value, float(reward), done))
        state = next_state
    traj.final_score = env.score
    return traj


def compute_gae(rewards, values, terminal_value: float, gamma: float, lam: float):
    """Backward recursion A_t = delta_t + gamma*lam*A_{t+1}; returns (adv, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError(f"rewards {rewards.shape} and values {values.shape} must be equal-length vectors")
    n = len(rewards)
    adv = np.zeros(n)
    next_value = terminal_value
    running = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def grpo_advantages(group_returns) -> np.ndarray:
    r = np.asarray(group_returns, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least two trajectories")
    return (r - r.mean()) / (r.std() + 1e-8)


# ---------------------------------------------------------------- objective

def surrogate(ratio, adv, eps: float) -> np.ndarray:
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def surrogate_ratio_grad(ratio, adv, eps: float) -> np.ndarray:
    """d surrogate / d ratio: ``adv`` where the unclipped branch is the
    minimum and the ratio is not beyond the clip bound in the advantage's
    favour, else exactly 0."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    clipped = ((adv > 0) & (ratio > 1.0 + eps)) | ((adv < 0) & (ratio < 1.0 - eps))
    return np.where(clipped, 0.0, adv)


def entropy(probs: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return -(probs * logp).sum(axis=-1)


@dataclass
class BatchLoss:
    loss_po: float
    loss_vf: float
    loss_eb: float
    total: float
    actor_grads: dict
    critic_grads: dict | None


def policy_loss_grads(actor: MlpParams, critic: MlpParams | None, states, actions, logp_old, adv,
                      returns, c1: float, ent_coef: float, eps: float) -> BatchLoss:
    """Loss ``-(L_PO - c1*L_VF + ent_coef*L_EB)`` on one minibatch and its
    exact gradients for actor and critic."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    b = len(actions)
    logits, cache = mlp_forward(actor, states)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    logp = logp_all[np.arange(b), actions]
    ratio = np.exp(logp - logp_old)
    obj = surrogate(ratio, adv, eps)
    ent = entropy(probs, logp_all)
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), actions] = 1.0
    g_ratio = surrogate_ratio_grad(ratio, adv, eps)
    d_obj = (g_ratio * ratio)[:, None] * (onehot - probs)
    d_ent = -probs * (logp_all + ent[:, None])
    d_logits = -(d_obj + ent_coef * d_ent) / b
    actor_grads = mlp_backward(actor, cache, d_logits)

    loss_vf = 0.0
    critic_grads = None
    if critic is not None and c1 > 0:
        v, ccache = mlp_forward(critic, states)
        err = v[:, 0] - returns
        loss_vf = float(np.mean(err ** 2))
        critic_grads = mlp_backward(critic, ccache, (2.0 * c1 * err / b)[:, None])
    loss_po = float(obj.mean())
    loss_eb = float(ent.mean())
    total = -(loss_po - c1 * loss_vf + ent_coef * loss_eb)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss: po={loss_po} vf={loss_vf} eb={loss_eb}")
    return BatchLoss(loss_po, loss_vf, loss_eb, total, actor_grads, critic_grads)


def naive_policy_grads(actor: MlpParams, states, actions, adv) -> dict:
    """Gradient of ``-mean(adv * log pi(a|s))``, the plain policy-gradient loss."""
    states = np.asarray(states, dtype=np.float64)
    b = len(actions)
    logits, cache = mlp_forward(actor, states)
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), actions] = 1.0
    return mlp_backward(actor, cache, -(np.asarray(adv)[:, None] * (onehot - probs)) / b)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)


def build_batch(trajs: list[Trajectory], cfg: PoConfig) -> Batch:
    states, actions, logp, advs, rets = [], [], [], [], []
    if cfg.optimizer_variant == "grpo":
        g = cfg.grpo_group
        for i in range(0, len(trajs), g):
            group = trajs[i:i + g]
            a = grpo_advantages([t.episode_return for t in group])
            for tr, ai in zip(group, a):
                advs.extend([ai] * len(tr))
                rets.extend([0.0] * len(tr))
    else:
        for tr in trajs:
            a, r = compute_gae([t.reward for t in tr.transitions], [t.value_old for t in tr.transitions],
                               tr.terminal_value, cfg.gamma, cfg.lam)
            advs.extend(a)
            rets.extend(r)
    for tr in trajs:
        for t in tr.transitions:
            states.append(t.state)
            actions.append(t.action)
            logp.append(t.log_prob_old)
    adv = np.asarray(advs)
    if cfg.optimizer_variant == "ppo":
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return Batch(np.asarray(states), np.asarray(actions), np.asarray(logp), adv, np.asarray(rets))


def clip_grad_norm(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def ppo_update(batch: Batch, actor: MlpParams, critic: MlpParams | None, actor_opt: Adam,
               critic_opt: Adam | None, cfg: PoConfig, update_index: int, rng: np.random.Generator) -> dict:
    """``update_epochs`` passes of shuffled minibatches; parameters change in place."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    c1 = cfg.c1 if cfg.optimizer_variant == "ppo" else 0.0
    ent_coef = cfg.entropy_coef(update_index)
    stats = {"loss_po": [], "loss_vf": [], "loss_eb": []}
    for _ in range(cfg.update_epochs):
        order = rng.permutation(len(batch))
        for lo in range(0, len(batch), cfg.minibatch):
            idx = order[lo:lo + cfg.minibatch]
            res = policy_loss_grads(actor, critic, batch.states[idx], batch.actions[idx],
                                    batch.logp_old[idx], batch.advantages[idx], batch.returns[idx],
                                    c1, ent_coef, cfg.clip_eps)
            actor_opt.step(actor, clip_grad_norm(res.actor_grads, cfg.max_grad_norm))
            if res.critic_grads is not None and critic_opt is not None:
                critic_opt.step(critic, clip_grad_norm(res.critic_grads, cfg.max_grad_norm))
            stats["loss_po"].append(res.loss_po)
            stats["loss_vf"].append(res.loss_vf)
            stats["loss_eb"].append(res.loss_eb)
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["entropy_coef"] = ent_coef
    return out
