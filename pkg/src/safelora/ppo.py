"""On-policy PPO: rollout collection (optionally through the safety gate), GAE,
clipped-surrogate loss with hand-derived gradients, and momentum-SGD updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from .envs import ContractError
from .nn import MlpPolicy, NumericError, TrainMode
from .safety import GateState, SafetyConfig, safety_gate

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoHyper:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.003
    learning_rate: float = 1e-3
    epochs: int = 4
    minibatch_size: int = 256
    rollout_length: int = 2048
    max_grad_norm: float = 0.5
    momentum: float = 0.9
    n_envs: int = 4

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0 and 0.0 <= self.lam < 1.0):
            raise ValueError("gamma and lam must lie in [0, 1)")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.rollout_length % self.n_envs:
            raise ValueError("rollout_length must be a multiple of n_envs")


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Generalised advantage estimates and returns.

    ``A_t = d_t + gamma*lam*(1-done_t)*A_{t+1}`` with
    ``d_t = r_t + gamma*(1-done_t)*V_{t+1} - V_t`` and ``V_T = bootstrap_value``.
    Arrays may carry a trailing batch axis (one column per environment).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    last = np.zeros_like(next_value)
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + gamma * notdone[t] * next_value - values[t]
        last = delta + gamma * lam * notdone[t] * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Mean 0 / std 1 over the (unmasked) entries; masked entries are zeroed."""
    sel = np.ones(adv.shape, bool) if mask is None else mask.astype(bool)
    out = np.zeros_like(adv)
    if not sel.any():
        return out
    mu = adv[sel].mean()
    sd = adv[sel].std()
    out[sel] = (adv[sel] - mu) / (sd + 1e-8)
    return out


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    mask: np.ndarray  # 1 where the main policy chose the action

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.actions[idx], self.logp_old[idx], self.advantages[idx],
                     self.returns[idx], self.mask[idx])

    def __len__(self):
        return self.obs.shape[0]


def ppo_loss(batch: Batch, net: MlpPolicy, hyper: PpoHyper):
    """Clipped surrogate + value loss - entropy bonus, with gradients for trainable tensors."""
    mean, log_std, value, cache = nn.forward_policy(net, batch.obs)
    n = len(batch)
    logp = gaussian_log_prob(batch.actions, mean, log_std)
    log_ratio = logp - batch.logp_old
    ratio = np.exp(log_ratio)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise NumericError(f"non-finite probability ratio at sample {int(bad[0])}")
    adv = batch.advantages
    mask = batch.mask.astype(np.float64)
    n_main = max(mask.sum(), 1.0)
    clipped = np.clip(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    surr = np.minimum(unclipped_obj, clipped_obj)
    policy_loss = -float(np.sum(mask * surr) / n_main)
    value_err = value - batch.returns
    value_loss = float(np.mean(value_err * value_err))
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + hyper.value_coef * value_loss - hyper.entropy_coef * entropy

    # d surr / d logp: ratio * A on the active branch, zero where the clip binds
    active = (unclipped_obj <= clipped_obj).astype(np.float64)
    d_logp = -mask * active * ratio * adv / n_main
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.actions - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = np.sum(d_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - hyper.entropy_coef
    d_value = hyper.value_coef * 2.0 * value_err / n
    grads = nn.backward(net, cache, d_mean, d_log_std, d_value)

    sel = mask > 0
    diagnostics = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "approx_kl": float(np.mean(((ratio - 1.0) - log_ratio)[sel])) if sel.any() else 0.0,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0)[sel] > hyper.clip)) if sel.any() else 0.0,
    }
    return loss, grads, diagnostics


class MomentumSGD:
    """``buf = mu * buf + g; p -= lr * buf`` per trainable tensor."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.buffers: dict = {}

    def step(self, net: MlpPolicy, grads: dict) -> None:
        if self.lr == 0.0:
            return
        params = net.parameters()
        for key, g in grads.items():
            buf = self.buffers.get(key)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[key] = buf
            net.set_parameter(key, params[key] - self.lr * buf)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


@dataclass
class RolloutBuffer:
    """``(T, n_envs)`` arrays for one rollout; flattened time-major for updates."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    failures: np.ndarray
    intervened: np.ndarray
    gae_rewards: np.ndarray  # rewards plus the truncation bootstrap
    bootstrap_value: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def empty(cls, steps: int, n_envs: int, obs_dim: int, act_dim: int) -> "RolloutBuffer":
        z = lambda *s: np.zeros(s)
        return cls(z(steps, n_envs, obs_dim), z(steps, n_envs, act_dim), z(steps, n_envs),
                   z(steps, n_envs), z(steps, n_envs), z(steps, n_envs), z(steps, n_envs),
                   z(steps, n_envs), z(steps, n_envs))

    def __len__(self):
        return self.rewards.size

    def finish(self, hyper: PpoHyper) -> None:
        self.advantages, self.returns = compute_gae(self.gae_rewards, self.values, self.dones,
                                                    self.bootstrap_value, hyper.gamma, hyper.lam)

    def as_batch(self) -> Batch:
        if self.advantages is None:
            raise ContractError("advantages not computed; call finish() first")
        n = len(self)
        mask = 1.0 - self.intervened.reshape(n)
        adv = normalize_advantages(self.advantages.reshape(n), mask)
        return Batch(self.obs.reshape(n, -1), self.actions.reshape(n, -1), self.logp.reshape(n),
                     adv, self.returns.reshape(n), mask)


@dataclass
class UpdateMetrics:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float


def update(net: MlpPolicy, buffer: RolloutBuffer, hyper: PpoHyper, optimizer: MomentumSGD,
           rng: np.random.Generator) -> UpdateMetrics:
    """``hyper.epochs`` passes of shuffled minibatches over the trainable tensors of ``net``."""
    if len(buffer) == 0:
        raise ContractError("empty rollout buffer")
    batch = buffer.as_batch()
    n = len(batch)
    logs = []
    norms = []
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.minibatch_size):
            mb = batch.take(perm[start:start + hyper.minibatch_size])
            _, grads, diag = ppo_loss(mb, net, hyper)
            norms.append(clip_grad_norm(grads, hyper.max_grad_norm))
            optimizer.step(net, grads)
            logs.append(diag)
    avg = lambda k: float(np.mean([d[k] for d in logs]))
    return UpdateMetrics(avg("policy_loss"), avg("value_loss"), avg("entropy"), avg("approx_kl"),
                         avg("clip_fraction"), float(np.mean(norms)))


@dataclass
class RolloutRow:
    """One line of training history (one rollout + its update)."""

    env_steps: int
    mean_ep_reward: float
    value_loss: float
    failures: int
    interventions: int
    action_rate: float
    trainable_params: int
    episodes: int = 0
    approx_kl: float = 0.0


@dataclass
class _EnvSlot:
    env: object
    obs: np.ndarray
    ep_return: float = 0.0
    prev_action: np.ndarray | None = None
    gate: GateState = field(default_factory=GateState)


class RolloutCollector:
    """Steps ``n_envs`` environments in lockstep with a batched policy forward pass."""

    def __init__(self, env_factory: Callable, n_envs: int, rng: np.random.Generator,
                 safety: SafetyConfig | None = None):
        self.rng = rng
        self.safety = safety
        self.slots = []
        for _ in range(n_envs):
            env = env_factory()
            self.slots.append(_EnvSlot(env, env.reset(rng)))
        self.last_mean_reward = float("nan")

    def collect(self, net: MlpPolicy, steps: int, hyper: PpoHyper):
        n_envs = len(self.slots)
        buf = RolloutBuffer.empty(steps, n_envs, net.obs_dim, net.act_dim)
        completed: list[float] = []
        failures = interventions = 0
        rate_sum, rate_n = 0.0, 0
        for t in range(steps):
            obs = np.stack([s.obs for s in self.slots])
            mean, log_std, value, _ = nn.forward_policy(net, obs)
            actions = mean + np.exp(log_std) * self.rng.standard_normal(mean.shape)
            buf.obs[t] = obs
            buf.actions[t] = actions
            buf.logp[t] = gaussian_log_prob(actions, mean, log_std)
            buf.values[t] = value
            truncated_obs = []
            for e, slot in enumerate(self.slots):
                executed = actions[e]
                if self.safety is not None:
                    env = slot.env
                    before = slot.gate.intervention_count
                    executed, slot.gate = safety_gate(env.safety_state(), executed, slot.gate,
                                                      self.safety.spec, self.safety.recovery,
                                                      predicted=env.predict_zero_action(), obs=slot.obs)
                    if slot.gate.recovering:
                        buf.intervened[t, e] = 1.0
                    interventions += slot.gate.intervention_count - before
                applied = np.clip(executed, -1.0, 1.0)
                if slot.prev_action is not None:
                    rate_sum += math.hypot(*(applied - slot.prev_action))
                    rate_n += 1
                slot.prev_action = applied
                res = slot.env.step(executed)
                buf.rewards[t, e] = res.reward
                buf.gae_rewards[t, e] = res.reward
                buf.dones[t, e] = float(res.terminated)
                buf.failures[t, e] = float(res.failure)
                slot.ep_return += res.reward
                if res.terminated:
                    if res.truncated:
                        truncated_obs.append((e, res.observation))
                    if res.failure:
                        failures += 1
                        slot.gate = replace_failure(slot.gate)
                    completed.append(slot.ep_return)
                    slot.ep_return = 0.0
                    slot.prev_action = None
                    slot.gate = GateState()
                    slot.obs = slot.env.reset(self.rng)
                else:
                    slot.obs = res.observation
            if truncated_obs:
                idx = [e for e, _ in truncated_obs]
                _, _, v_term, _ = nn.forward_policy(net, np.stack([o for _, o in truncated_obs]))
                buf.gae_rewards[t, idx] += hyper.gamma * v_term
        _, _, boot, _ = nn.forward_policy(net, np.stack([s.obs for s in self.slots]))
        buf.bootstrap_value = boot
        if completed:
            self.last_mean_reward = float(np.mean(completed))
        stats = {
            "mean_ep_reward": self.last_mean_reward,
            "episodes": len(completed),
            "failures": failures,
            "interventions": interventions,
            "action_rate": rate_sum / rate_n if rate_n else 0.0,
        }
        return buf, stats


def replace_failure(gate: GateState) -> GateState:
    return replace(gate, failure_count=gate.failure_count + 1)


def train(env_factory: Callable, net: MlpPolicy, hyper: PpoHyper, *, mode: TrainMode, budget: int,
          rng: np.random.Generator, safety: SafetyConfig | None = None,
          callback: Callable[[RolloutRow], None] | None = None):
    """Alternate rollouts and updates until ``budget`` environment steps are spent.

    ``mode.kind == 'frozen'`` collects rollouts without updating. Returns
    ``(net, rows)`` with one :class:`RolloutRow` per rollout.
    """
    if budget < hyper.rollout_length:
        raise ValueError(f"budget {budget} smaller than one rollout ({hyper.rollout_length})")
    steps_per_env = hyper.rollout_length // hyper.n_envs
    collector = RolloutCollector(env_factory, hyper.n_envs, rng, safety)
    optimizer = MomentumSGD(hyper.learning_rate, hyper.momentum)
    trainable = nn.trainable_param_count(net, mode)[0] if mode.kind != "frozen" else 0
    rows: list[RolloutRow] = []
    env_steps = 0
    for _ in range(budget // hyper.rollout_length):
        buf, stats = collector.collect(net, steps_per_env, hyper)
        env_steps += hyper.rollout_length
        buf.finish(hyper)
        if mode.kind == "frozen":
            batch = buf.as_batch()
            _, _, value, _ = nn.forward_policy(net, batch.obs)
            value_loss, kl = float(np.mean((value - batch.returns) ** 2)), 0.0
        else:
            metrics = update(net, buf, hyper, optimizer, rng)
            value_loss, kl = metrics.value_loss, metrics.approx_kl
        row = RolloutRow(env_steps, stats["mean_ep_reward"], value_loss, stats["failures"],
                         stats["interventions"], stats["action_rate"], trainable,
                         stats["episodes"], kl)
        rows.append(row)
        if callback is not None:
            callback(row)
    return net, rows
