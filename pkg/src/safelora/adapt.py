"""Experiment orchestration: pretrain on source dynamics, evaluate zero-shot on the
target, fine-tune under FFT or LoRA (optionally behind the safety gate), and run
the rank / component / placement / safety comparisons.

Every arm of a comparison consumes the same seeds, the same pretrained
checkpoints, the same step budget and the same per-seed random streams; only the
named factor changes.
"""

from __future__ import annotations

import enum
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import envs, nn, ppo, safety
from .nn import Components, MlpPolicy, Placement, TrainMode

LR_LORA = 1e-2
LR_FFT = 1e-3
LR_PRETRAIN = 3e-3
PRETRAIN_BUDGET = 61_440
FINETUNE_BUDGET = {"tracker": 200_000, "hopper": 300_000}
SMOOTH_WINDOW = 5
DEFAULT_SEEDS = (0, 1, 2, 3)
EVAL_EPISODES = 8


class Mode(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    FFT = "fft"
    LORA = "lora"


def derive_seed(master: int, *keys) -> int:
    """Fixed 64-bit hash of ``(master, *keys)``; gives independent, reproducible streams."""
    h = hashlib.blake2b(repr((int(master),) + tuple(keys)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def run_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def smooth(values: Iterable[float], window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing arithmetic mean; element ``i`` averages values ``i .. i+window-1``.

    Shorter series collapse to their overall mean.
    """
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return v
    if v.size < window:
        return np.array([v.mean()])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def steps_to_threshold(rows, threshold: float, window: int = SMOOTH_WINDOW) -> int | None:
    """First ``env_steps`` at which the smoothed episode reward reaches ``threshold``."""
    if not rows:
        return None
    sm = smooth([r.mean_ep_reward for r in rows], window)
    offset = min(window, len(rows)) - 1
    for i, value in enumerate(sm):
        if value >= threshold:
            return rows[i + offset].env_steps
    return None


@dataclass(frozen=True)
class AdaptConfig:
    task: str = "tracker"
    mode: Mode = Mode.LORA
    rank: int = 1
    placement: Placement = Placement.ALL_LAYERS
    components: Components = Components.ACTOR_CRITIC
    safety: bool = True
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    budget: int = FINETUNE_BUDGET["tracker"]
    gap: envs.GapSpec = field(default_factory=envs.GapSpec.default_target)
    hyper: ppo.PpoHyper = field(default_factory=ppo.PpoHyper)
    learning_rate: float | None = None  # None -> per-mode default
    env_params: envs.EnvParams | None = None
    safety_spec: safety.SafetySpec | None = None
    recovery: str = "scripted"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "placement", Placement(self.placement))
        object.__setattr__(self, "components", Components(self.components))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.task not in envs.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.mode is Mode.LORA and self.rank < 1:
            raise ValueError("rank must be >= 1 in LoRA mode")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.recovery not in ("scripted", "learned"):
            raise ValueError("recovery must be 'scripted' or 'learned'")

    @property
    def source_params(self) -> envs.EnvParams:
        return self.env_params or envs.default_params(self.task)

    @property
    def target_params(self) -> envs.EnvParams:
        return envs.perturb_params(self.source_params, self.gap)

    def train_mode(self) -> TrainMode:
        kind = {Mode.ZERO_SHOT: "frozen", Mode.FFT: "fft", Mode.LORA: "lora"}[self.mode]
        return TrainMode(kind, self.rank, self.placement, self.components)

    def resolved_hyper(self) -> ppo.PpoHyper:
        lr = self.learning_rate
        if lr is None:
            lr = LR_LORA if self.mode is Mode.LORA else LR_FFT
        return replace(self.hyper, learning_rate=lr)

    def arm_name(self) -> str:
        if self.mode is Mode.ZERO_SHOT:
            return "zero_shot"
        parts = [self.mode.value]
        if self.mode is Mode.LORA:
            parts += [f"r{self.rank}", self.placement.value]
        parts += [self.components.value, "safe" if self.safety else "nosafe"]
        return "_".join(parts)


@dataclass
class Checkpoint:
    seed: int
    policy: MlpPolicy
    source_reward: float
    rows: list = field(default_factory=list)


@dataclass
class RunMetrics:
    """Outcome of one (arm, seed) fine-tuning run."""

    arm: str
    seed: int
    rows: list
    source_reward: float
    steps_to_threshold: int | None
    trainable_params: int
    frozen_before: str
    frozen_after: str
    critic_before: str
    critic_after: str
    policy: MlpPolicy | None = None

    @property
    def failures(self) -> int:
        return int(sum(r.failures for r in self.rows))

    @property
    def interventions(self) -> int:
        return int(sum(r.interventions for r in self.rows))

    @property
    def final_reward(self) -> float:
        return float(smooth([r.mean_ep_reward for r in self.rows])[-1])

    @property
    def final_value_loss(self) -> float:
        return float(smooth([r.value_loss for r in self.rows])[-1])

    @property
    def action_rate_reduction(self) -> float:
        return safety.action_rate_reduction(self.rows)


def _pretrain_one(task: str, seed: int, budget: int, params: envs.EnvParams,
                  hyper: ppo.PpoHyper) -> Checkpoint:
    rng = run_rng(seed, "pretrain")
    env = envs.make_env(task, params)
    net = nn.build_policy(env.obs_dim, env.act_dim, rng, seed=seed)
    mode = TrainMode("fft")
    nn.configure_mode(net, mode)
    rows: list = []
    if budget > 0:
        _, rows = ppo.train(lambda: envs.make_env(task, params), net, hyper, mode=mode,
                            budget=budget, rng=rng)
    if rows:
        source_reward = float(smooth([r.mean_ep_reward for r in rows])[-1])
    else:
        source_reward = evaluate(net, task, params, EVAL_EPISODES, seed)
    nn.configure_mode(net, TrainMode("frozen"))
    return Checkpoint(seed, net, source_reward, rows)


def map_runs(fn: Callable, jobs: list[tuple], workers: int = 1) -> list:
    """Apply ``fn(*job)`` to each job, optionally in a process pool; order preserved."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def pretrain(task: str, seeds: Iterable[int], budget: int = PRETRAIN_BUDGET,
             params: envs.EnvParams | None = None, hyper: ppo.PpoHyper | None = None,
             workers: int = 1) -> dict[int, Checkpoint]:
    """FFT PPO on the source dynamics, one checkpoint per seed.

    ``source_reward`` is the final smoothed training reward, the reference that
    fine-tuning runs must reach. A zero budget returns the initialisation.
    """
    params = params or envs.default_params(task)
    hyper = hyper or ppo.PpoHyper(learning_rate=LR_PRETRAIN)
    jobs = [(task, int(s), budget, params, hyper) for s in seeds]
    return {c.seed: c for c in map_runs(_pretrain_one, jobs, workers)}


def evaluate(net: MlpPolicy, task: str, params: envs.EnvParams, episodes: int, seed: int) -> float:
    """Mean return of deterministic (mean-action) episodes; ``net`` is not modified."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = run_rng(seed, "eval")
    env = envs.make_env(task, params)
    returns = []
    for _ in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            res = env.step(nn.act_deterministic(net, obs))
            total += res.reward
            obs = res.observation
            if res.terminated:
                break
        returns.append(total)
    return float(np.mean(returns))


def zero_shot_eval(checkpoint: Checkpoint, gap: envs.GapSpec, episodes: int = EVAL_EPISODES,
                   task: str = "tracker", params: envs.EnvParams | None = None) -> float:
    params = params or envs.default_params(task)
    return evaluate(checkpoint.policy, task, envs.perturb_params(params, gap), episodes, checkpoint.seed)


def make_safety(config: AdaptConfig, recovery_policy=None) -> safety.SafetyConfig | None:
    if not config.safety:
        return None
    spec = config.safety_spec or safety.default_safety_spec(config.task)
    recovery = recovery_policy or safety.default_recovery(config.task)
    return safety.SafetyConfig(spec, recovery)


def _finetune_one(checkpoint: Checkpoint, config: AdaptConfig, recovery_policy=None) -> RunMetrics:
    seed = checkpoint.seed
    rng = run_rng(seed, "finetune")
    net = checkpoint.policy.copy()
    mode = config.train_mode()
    # adapters draw from their own stream so every arm sees identical rollout noise
    nn.configure_mode(net, mode, run_rng(seed, "adapter"))
    frozen_before = net.frozen_checksum()
    critic_before = net.checksum(("critic",))
    target = config.target_params
    task = config.task
    _, rows = ppo.train(lambda: envs.make_env(task, target), net, config.resolved_hyper(),
                        mode=mode, budget=config.budget, rng=rng,
                        safety=make_safety(config, recovery_policy))
    trainable = nn.trainable_param_count(net, mode)[0] if mode.kind != "frozen" else 0
    return RunMetrics(config.arm_name(), seed, rows, checkpoint.source_reward,
                      steps_to_threshold(rows, checkpoint.source_reward), trainable,
                      frozen_before, net.frozen_checksum(), critic_before,
                      net.checksum(("critic",)), net)


def finetune(checkpoints: dict[int, Checkpoint], config: AdaptConfig, workers: int = 1,
             recovery_policy=None) -> dict[int, RunMetrics]:
    missing = [s for s in config.seeds if s not in checkpoints]
    if missing:
        raise KeyError(f"no checkpoint for seeds {missing}")
    jobs = [(checkpoints[s], config, recovery_policy) for s in config.seeds]
    return {m.seed: m for m in map_runs(_finetune_one, jobs, workers)}


Study = dict[str, dict[int, RunMetrics]]


def run_arms(checkpoints, arms: dict[str, AdaptConfig], workers: int = 1, recovery_policy=None) -> Study:
    return {name: finetune(checkpoints, cfg, workers, recovery_policy) for name, cfg in arms.items()}


def rank_arms(base: AdaptConfig, ranks=(1, 2, 4, 8)) -> dict[str, AdaptConfig]:
    return {f"rank_{r}": replace(base, mode=Mode.LORA, rank=r) for r in ranks}


def component_arms(base: AdaptConfig) -> dict[str, AdaptConfig]:
    return {c.value: replace(base, components=c) for c in (Components.ACTOR_ONLY, Components.ACTOR_CRITIC)}


def placement_arms(base: AdaptConfig) -> dict[str, AdaptConfig]:
    return {p.value: replace(base, placement=p) for p in Placement}


def safety_arms(base: AdaptConfig) -> dict[str, AdaptConfig]:
    """The three fine-tuning baselines of the safety comparison."""
    return {
        "fft_nosafe": replace(base, mode=Mode.FFT, safety=False),
        "fft_safe": replace(base, mode=Mode.FFT, safety=True),
        "lora_safe": replace(base, mode=Mode.LORA, rank=1, safety=True),
    }


def ablate_rank(checkpoints, base: AdaptConfig, ranks=(1, 2, 4, 8), workers: int = 1) -> Study:
    return run_arms(checkpoints, rank_arms(base, ranks), workers)


def ablate_components(checkpoints, base: AdaptConfig, workers: int = 1) -> Study:
    return run_arms(checkpoints, component_arms(base), workers)


def ablate_placement(checkpoints, base: AdaptConfig, workers: int = 1) -> Study:
    return run_arms(checkpoints, placement_arms(base), workers)


def safety_study(checkpoints, base: AdaptConfig, workers: int = 1, recovery_policy=None) -> Study:
    return run_arms(checkpoints, safety_arms(base), workers, recovery_policy)


def censored_steps(run: RunMetrics) -> int:
    """Steps-to-threshold with runs that never reach it counted at their full budget."""
    if run.steps_to_threshold is not None:
        return run.steps_to_threshold
    return run.rows[-1].env_steps if run.rows else 0


COMPARISON_COLUMNS = ("arm", "seeds", "final_reward_mean", "final_reward_std", "steps_to_threshold_mean",
                      "reached", "failures_mean", "interventions_mean", "action_rate_reduction_pct",
                      "final_value_loss_mean", "trainable_params")


def comparison_table(study: Study) -> list[dict]:
    """One summary row per arm, averaged over seeds in ascending seed order."""
    table = []
    for arm, runs in study.items():
        ordered = [runs[s] for s in sorted(runs)]
        finals = np.array([r.final_reward for r in ordered])
        table.append({
            "arm": arm,
            "seeds": len(ordered),
            "final_reward_mean": float(finals.mean()),
            "final_reward_std": float(finals.std()),
            "steps_to_threshold_mean": float(np.mean([censored_steps(r) for r in ordered])),
            "reached": sum(r.steps_to_threshold is not None for r in ordered),
            "failures_mean": safety.count_failures({r.seed: r.rows for r in ordered})[1],
            "interventions_mean": float(np.mean([r.interventions for r in ordered])),
            "action_rate_reduction_pct": float(np.mean([r.action_rate_reduction for r in ordered])),
            "final_value_loss_mean": float(np.mean([r.final_value_loss for r in ordered])),
            "trainable_params": ordered[0].trainable_params,
        })
    return table
