"""Training-time safety gate, recovery controllers, and the failure / smoothness metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from . import envs
from .nn import MlpPolicy, act_deterministic

HOLD_STEPS = 10
TERMINATION_PENALTY = -100.0
RECOVERY_EPISODE_STEPS = 200


@dataclass(frozen=True)
class Box:
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(float(v) for v in self.low))
        object.__setattr__(self, "high", tuple(float(v) for v in self.high))
        if len(self.low) != len(self.high):
            raise ValueError("box bounds differ in length")
        if any(lo > hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("box low exceeds high")

    def contains(self, s) -> bool:
        s = np.asarray(s, dtype=np.float64)
        return bool(np.all(s >= self.low) and np.all(s <= self.high))

    def inside(self, other: "Box") -> bool:
        return all(a >= b for a, b in zip(self.low, other.low)) and all(
            a <= b for a, b in zip(self.high, other.high))

    def grid(self, n: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, n) for lo, hi in zip(self.low, self.high)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))

    def to_dict(self) -> dict:
        return {"low": list(self.low), "high": list(self.high)}


@dataclass(frozen=True)
class SafetySpec:
    """Nested state boxes over ``env.safety_state()``: nominal inside soft inside hard."""

    soft: Box
    nominal: Box
    hard: Box
    hold_steps: int = HOLD_STEPS
    lookahead: bool = True

    def __post_init__(self):
        if not (self.nominal.inside(self.soft) and self.soft.inside(self.hard)):
            raise ValueError("safety boxes must nest: nominal within soft within hard")
        if self.hold_steps < 1:
            raise ValueError("hold_steps must be >= 1")

    def to_dict(self) -> dict:
        return {"soft": self.soft.to_dict(), "nominal": self.nominal.to_dict(),
                "hard": self.hard.to_dict(), "hold_steps": self.hold_steps,
                "lookahead": self.lookahead}

    @classmethod
    def from_dict(cls, d: dict) -> "SafetySpec":
        return cls(Box(**d["soft"]), Box(**d["nominal"]), Box(**d["hard"]),
                   int(d.get("hold_steps", HOLD_STEPS)), bool(d.get("lookahead", True)))


def default_safety_spec(task: str) -> SafetySpec:
    if task == "tracker":  # state [x, v]
        return SafetySpec(
            soft=Box((-3.0, -2.0), (3.0, 2.0)),
            nominal=Box((-1.0, -0.25), (1.0, 0.25)),
            hard=Box((-envs.TRACKER_X_HARD, -envs.TRACKER_V_HARD), (envs.TRACKER_X_HARD, envs.TRACKER_V_HARD)),
        )
    if task == "hopper":  # state [h, w]
        return SafetySpec(
            soft=Box((-0.4, -3.0), (0.6, 3.0)),
            nominal=Box((-0.2, -0.3), (0.05, 0.3)),
            hard=Box((-1.0, -envs.HOPPER_W_HARD), (1.0, envs.HOPPER_W_HARD)),
        )
    raise ValueError(f"unknown task {task!r}")


class GateMode(str, enum.Enum):
    MAIN = "MAIN"
    RECOVERY = "RECOVERY"


@dataclass(frozen=True)
class GateState:
    mode: GateMode = GateMode.MAIN
    consecutive_nominal: int = 0
    intervention_count: int = 0
    failure_count: int = 0

    @property
    def recovering(self) -> bool:
        return self.mode is GateMode.RECOVERY


class RecoveryPolicy(Protocol):
    def act(self, state: np.ndarray, obs: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ScriptedRecovery:
    """PD controller toward ``target``; gains must be positive."""

    task: str = "tracker"
    kp: float = 1.0
    kd: float = 1.0
    target: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.kp > 0 and self.kd > 0):
            raise ValueError("recovery gains must be > 0")

    def act(self, state, obs=None) -> np.ndarray:
        return np.array([recovery_action(self, state)])


@dataclass
class LearnedRecovery:
    """A frozen policy network used through its deterministic mean action."""

    policy: MlpPolicy

    def act(self, state, obs) -> np.ndarray:
        return np.clip(act_deterministic(self.policy, obs), -1.0, 1.0)


def recovery_action(recovery: ScriptedRecovery, state) -> float:
    """Tracker: ``clamp(-kp (x - x_nom) - kd v)``. Hopper: brake descent while in contact."""
    s = np.asarray(state, dtype=np.float64)
    if recovery.task == "tracker":
        u = -recovery.kp * (s[0] - recovery.target[0]) - recovery.kd * (s[1] - recovery.target[1])
        return float(np.clip(u, -1.0, 1.0))
    if recovery.task == "hopper":
        h, w = s
        if h > 0.0:
            return 0.0  # airborne: thrust has no effect
        return float(np.clip(-recovery.kd * w, 0.0, 1.0))
    raise ValueError(f"unknown task {recovery.task!r}")


def default_recovery(task: str) -> ScriptedRecovery:
    if task == "tracker":
        return ScriptedRecovery("tracker", kp=1.0, kd=1.0)
    return ScriptedRecovery("hopper", kp=1.0, kd=1.0)


def safety_gate(state, main_action, gate: GateState, spec: SafetySpec, recovery: RecoveryPolicy,
                *, predicted=None, obs=None) -> tuple[np.ndarray, GateState]:
    """Choose between the main action and the recovery action.

    ``predicted`` is the next state under zero action; with ``spec.lookahead`` the
    trigger fires if either the current or the predicted state leaves the soft box.
    The returned gate is in RECOVERY mode exactly when the recovery action was used.
    """
    state = np.asarray(state, dtype=np.float64)
    if gate.mode is GateMode.RECOVERY:
        if gate.consecutive_nominal >= spec.hold_steps:
            gate = replace(gate, mode=GateMode.MAIN, consecutive_nominal=0)
        else:
            count = gate.consecutive_nominal + 1 if spec.nominal.contains(state) else 0
            gate = replace(gate, consecutive_nominal=count)
            return recovery.act(state, obs), gate

    trigger = not spec.soft.contains(state)
    if spec.lookahead and predicted is not None:
        trigger = trigger or not spec.soft.contains(predicted)
    if trigger:
        count = 1 if spec.nominal.contains(state) else 0
        gate = replace(gate, mode=GateMode.RECOVERY, consecutive_nominal=count,
                       intervention_count=gate.intervention_count + 1)
        return recovery.act(state, obs), gate
    return np.asarray(main_action, dtype=np.float64), gate


@dataclass
class SafetyConfig:
    """What the trainer needs to run the gate during rollouts."""

    spec: SafetySpec
    recovery: RecoveryPolicy


def action_rate(actions: Sequence) -> float:
    """Mean Euclidean norm of consecutive action differences."""
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 2:
        raise ValueError("action_rate needs at least two actions")
    return float(np.mean(np.linalg.norm(np.diff(a, axis=0), axis=1)))


def action_rate_reduction(rows, fraction: float = 0.1) -> float:
    """Percent drop in mean action rate from the first to the last ``fraction`` of steps.

    ``rows`` carry ``env_steps`` and ``action_rate``; at least one row lands in each window.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows")
    total = rows[-1].env_steps
    early = [r.action_rate for r in rows if r.env_steps <= fraction * total] or [rows[0].action_rate]
    late = [r.action_rate for r in rows if r.env_steps > (1.0 - fraction) * total] or [rows[-1].action_rate]
    e, l = float(np.mean(early)), float(np.mean(late))
    if e == 0.0:
        return 0.0
    return 100.0 * (e - l) / e


def count_failures(histories: dict[int, list]) -> tuple[dict[int, int], float]:
    """Failure-terminated episodes per seed and their mean over seeds."""
    per_seed = {seed: int(sum(r.failures for r in rows)) for seed, rows in histories.items()}
    mean = float(np.mean(list(per_seed.values()))) if per_seed else 0.0
    return per_seed, mean


class RecoveryTaskEnv:
    """Wraps a task env for recovery training.

    Episodes start uniformly inside the soft box, physical parameters are redrawn
    within +-``spread`` at every reset, reward is ``-|s - s_nom|^2`` and a hard-bound
    termination adds :data:`TERMINATION_PENALTY`.
    """

    def __init__(self, task: str, base: envs.EnvParams, spec: SafetySpec, spread: float = 0.3,
                 nominal_state=(0.0, 0.0), max_steps: int = RECOVERY_EPISODE_STEPS):
        self.task = task
        self.base = base
        self.spec = spec
        self.spread = spread
        self.nominal_state = np.asarray(nominal_state, dtype=np.float64)
        self.env = envs.make_env(task, base, max_steps=max_steps)
        self.obs_dim = self.env.obs_dim
        self.act_dim = self.env.act_dim

    def _random_params(self, rng: np.random.Generator) -> envs.EnvParams:
        f = rng.uniform(1.0 - self.spread, 1.0 + self.spread, size=3)
        return replace(self.base, mass=self.base.mass * f[0], damping=self.base.damping * f[1],
                       gain=self.base.gain * f[2])

    def reset(self, rng: np.random.Generator, state=None):
        self.env.params = self._random_params(rng)
        if state is None:
            state = rng.uniform(self.spec.soft.low, self.spec.soft.high)
        return self.env.reset(rng, state=state)

    def safety_state(self):
        return self.env.safety_state()

    def predict_zero_action(self):
        return self.env.predict_zero_action()

    def step(self, action) -> envs.StepResult:
        res = self.env.step(action)
        s = self.env.safety_state()
        d = s - self.nominal_state
        reward = -float(d @ d)
        out_of_bounds = not self.spec.hard.contains(s)
        failure = res.failure or out_of_bounds
        if failure:
            reward += TERMINATION_PENALTY
            self.env.done = True
        return envs.StepResult(res.observation, reward, res.terminated or failure, failure,
                               False, res.truncated and not failure)


def train_recovery(task: str, base: envs.EnvParams, spec: SafetySpec, budget: int,
                   rng: np.random.Generator, hyper=None, spread: float = 0.3):
    """PPO-train a recovery policy under domain randomisation; returns ``(LearnedRecovery, history)``."""
    from . import nn, ppo

    hyper = hyper or ppo.PpoHyper(learning_rate=3e-3)
    probe = RecoveryTaskEnv(task, base, spec, spread)
    net = nn.build_policy(probe.obs_dim, probe.act_dim, rng, seed=None)
    mode = nn.TrainMode("fft")
    nn.configure_mode(net, mode)
    _, history = ppo.train(lambda: RecoveryTaskEnv(task, base, spec, spread), net, hyper,
                           mode=mode, budget=budget, rng=rng)
    nn.configure_mode(net, nn.TrainMode("frozen"))
    return LearnedRecovery(net), history


def reaches_nominal(env, recovery: RecoveryPolicy, spec: SafetySpec, state, max_steps: int = envs.EPISODE_STEPS,
                    rng: np.random.Generator | None = None) -> tuple[bool, bool]:
    """Run ``recovery`` alone from ``state``; returns ``(reached_nominal, crossed_hard)``."""
    rng = rng or np.random.default_rng(0)
    obs = env.reset(rng, state=state)
    for _ in range(max_steps):
        s = env.safety_state()
        if spec.nominal.contains(s):
            return True, False
        if not spec.hard.contains(s):
            return False, True
        res = env.step(recovery.act(s, obs))
        obs = res.observation
        if res.failure:
            return False, True
        if res.terminated:
            break
    s = env.safety_state()
    return spec.nominal.contains(s), not spec.hard.contains(s)
