"""Two toy control tasks whose dynamics are driven by an explicit parameter vector.

``tracker``: a 1-D point mass with viscous damping that must follow a sinusoidal
velocity reference. ``hopper``: a vertical hopper on a spring-damper ground that
should follow a periodic apex-height profile; thrust only acts in contact.

A reality gap is a perturbation of :class:`EnvParams` (see :func:`perturb_params`).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

EPISODE_STEPS = 400
TRACKER_V_HARD = 3.0
TRACKER_X_HARD = 5.0
HOPPER_W_HARD = 3.5
TRACKER_REF_AMP, TRACKER_REF_PERIOD = 0.5, 2.0
HOPPER_REF_AMP, HOPPER_REF_PERIOD = 0.4, 1.6
TASKS = ("tracker", "hopper")

# differentiable gap dimensions; latency is the fourth, integer one
GAP_DIMENSIONS = ("mass", "damping", "gain", "latency")


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvParams:
    mass: float = 1.0
    damping: float = 0.5
    gain: float = 3.0
    latency: int = 0
    dt: float = 0.02
    gravity: float = 9.81
    ground_stiffness: float = 400.0
    ground_damping: float = 4.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be > 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.gain > 0:
            raise ValueError("gain must be > 0")
        if int(self.latency) != self.latency or self.latency < 0:
            raise ValueError("latency must be a non-negative integer")
        if self.ground_stiffness < 0:
            raise ValueError("ground_stiffness must be >= 0")
        if self.damping < 0 or self.ground_damping < 0:
            raise ValueError("damping must be >= 0")
        object.__setattr__(self, "latency", int(self.latency))

    def to_dict(self) -> dict:
        return asdict(self)


def default_params(task: str) -> EnvParams:
    if task == "tracker":
        return EnvParams()
    if task == "hopper":
        return EnvParams(mass=1.0, damping=0.0, gain=30.0)
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class GapSpec:
    """Multiplicative factors for mass/damping/gain plus an additive latency change."""

    mass: float = 1.0
    damping: float = 1.0
    gain: float = 1.0
    latency: int = 0

    @classmethod
    def default_target(cls) -> "GapSpec":
        return cls(mass=1.4, damping=0.6, gain=0.85, latency=1)

    @classmethod
    def identity(cls) -> "GapSpec":
        return cls()


def perturb_params(p0: EnvParams, gap: GapSpec) -> EnvParams:
    """Apply ``gap`` componentwise. Not idempotent: applying twice compounds the factors."""
    for f in ("mass", "damping", "gain"):
        if not getattr(gap, f) > 0:
            raise ValueError(f"gap factor {f} must be > 0")
    if gap.latency < -p0.latency:
        raise ValueError("latency delta would make latency negative")
    return replace(p0, mass=p0.mass * gap.mass, damping=p0.damping * gap.damping,
                   gain=p0.gain * gap.gain, latency=p0.latency + gap.latency)


def reference_signal(task: str, t: int, dt: float = 0.02) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if task == "tracker":
        return TRACKER_REF_AMP * math.sin(2.0 * math.pi * t * dt / TRACKER_REF_PERIOD)
    if task == "hopper":
        return max(0.0, HOPPER_REF_AMP * math.sin(2.0 * math.pi * t * dt / HOPPER_REF_PERIOD))
    raise ValueError(f"unknown task {task!r}")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    failure: bool
    safety_soft_violation: bool = False
    truncated: bool = False


class _BaseEnv:
    task = ""
    obs_dim = 0
    act_dim = 1

    def __init__(self, params: EnvParams, max_steps: int = EPISODE_STEPS, soft_bounds=None):
        self.params = params
        self.max_steps = max_steps
        self.soft_bounds = soft_bounds  # optional (low, high) over safety_state()
        self.queue: deque[float] = deque()
        self.u_prev = 0.0
        self.t = 0
        self.done = True

    def _reset_common(self):
        self.queue = deque([0.0] * self.params.latency)
        self.u_prev = 0.0
        self.t = 0
        self.done = False

    def _push_action(self, action) -> tuple[float, float]:
        if self.done:
            raise ContractError("step() called on a terminated episode; call reset()")
        a = np.ravel(action)
        if a.shape[0] != self.act_dim or not math.isfinite(a[0]):
            raise ValueError("action must be a finite vector of length 1")
        u = min(1.0, max(-1.0, float(a[0])))
        if self.params.latency == 0:
            return u, u
        self.queue.append(u)
        return u, self.queue.popleft()

    def _soft_violation(self) -> bool:
        if self.soft_bounds is None:
            return False
        s = self.safety_state()
        low, high = self.soft_bounds
        return bool(np.any(s < low) or np.any(s > high))

    def ref(self, t: int) -> float:
        return reference_signal(self.task, t, self.params.dt)

    def safety_state(self) -> np.ndarray:
        raise NotImplementedError

    def predict_zero_action(self) -> np.ndarray:
        raise NotImplementedError


class TrackerEnv(_BaseEnv):
    """Point mass following ``v_ref``; observation ``[x, v, v_ref, u_prev]``.

    ``v_ref`` in the observation is the target for the state the next step produces,
    and the reward compares against that same target.
    """

    task = "tracker"
    obs_dim = 4

    def __init__(self, params: EnvParams | None = None, max_steps: int = EPISODE_STEPS,
                 soft_bounds=None, v_hard: float = TRACKER_V_HARD, x_hard: float = TRACKER_X_HARD):
        super().__init__(params or default_params("tracker"), max_steps, soft_bounds)
        self.v_hard = v_hard
        self.x_hard = x_hard
        self.x = 0.0
        self.v = 0.0

    def observation(self) -> np.ndarray:
        return np.array([self.x, self.v, self.ref(self.t + 1), self.u_prev])

    def reset(self, rng: np.random.Generator, state=None) -> np.ndarray:
        self._reset_common()
        if state is None:
            self.x, self.v = (float(s) for s in rng.uniform(-0.1, 0.1, size=2))
        else:
            self.x, self.v = float(state[0]), float(state[1])
        return self.observation()

    def safety_state(self) -> np.ndarray:
        return np.array([self.x, self.v])

    def predict_zero_action(self) -> np.ndarray:
        """Next ``[x, v]`` if the actuator applied nothing this step."""
        p = self.params
        v = self.v + p.dt * (-p.damping * self.v) / p.mass
        return np.array([self.x + p.dt * v, v])

    def step(self, action) -> StepResult:
        p = self.params
        u, applied = self._push_action(action)
        self.v = self.v + p.dt * (p.gain * applied - p.damping * self.v) / p.mass
        self.x = self.x + p.dt * self.v
        self.t += 1
        err = self.v - self.ref(self.t)
        reward = -(err * err) - 0.01 * u * u - 0.05 * (u - self.u_prev) ** 2
        self.u_prev = u
        failure = abs(self.v) > self.v_hard or abs(self.x) > self.x_hard
        truncated = not failure and self.t >= self.max_steps
        self.done = failure or truncated
        return StepResult(self.observation(), float(reward), self.done, failure,
                          self._soft_violation(), truncated)


class HopperEnv(_BaseEnv):
    """Vertical hopper; observation ``[h, w, contact, h_ref, u_prev]``.

    Contact iff ``h <= 0``. Thrust ``gain * max(u, 0)`` acts only in contact, against
    a linear spring-damper ground. Failure is a touchdown faster than ``w_hard``.
    """

    task = "hopper"
    obs_dim = 5

    def __init__(self, params: EnvParams | None = None, max_steps: int = EPISODE_STEPS,
                 soft_bounds=None, w_hard: float = HOPPER_W_HARD):
        super().__init__(params or default_params("hopper"), max_steps, soft_bounds)
        self.w_hard = w_hard
        self.h = 0.0
        self.w = 0.0

    @property
    def rest_height(self) -> float:
        p = self.params
        if p.ground_stiffness == 0:
            return 0.0
        return -p.mass * p.gravity / p.ground_stiffness

    @property
    def contact(self) -> bool:
        return self.h <= 0.0

    def observation(self) -> np.ndarray:
        return np.array([self.h, self.w, float(self.contact), self.ref(self.t + 1), self.u_prev])

    def reset(self, rng: np.random.Generator, state=None) -> np.ndarray:
        self._reset_common()
        if state is None:
            self.h = self.rest_height
            self.w = float(rng.uniform(-0.05, 0.05))
        else:
            self.h, self.w = float(state[0]), float(state[1])
        return self.observation()

    def safety_state(self) -> np.ndarray:
        return np.array([self.h, self.w])

    def _force(self, h, w, u) -> float:
        p = self.params
        if h <= 0.0:
            return p.gain * max(u, 0.0) - p.ground_stiffness * h - p.ground_damping * w - p.mass * p.gravity
        return -p.mass * p.gravity

    def predict_zero_action(self) -> np.ndarray:
        p = self.params
        w = self.w + p.dt * self._force(self.h, self.w, 0.0) / p.mass
        return np.array([self.h + p.dt * w, w])

    def step(self, action) -> StepResult:
        p = self.params
        u, applied = self._push_action(action)
        was_airborne = not self.contact
        self.w = self.w + p.dt * self._force(self.h, self.w, applied) / p.mass
        self.h = self.h + p.dt * self.w
        self.t += 1
        err = self.h - self.ref(self.t)
        reward = -(err * err) - 0.01 * u * u - 0.05 * (u - self.u_prev) ** 2
        self.u_prev = u
        failure = was_airborne and self.contact and abs(self.w) > self.w_hard
        truncated = not failure and self.t >= self.max_steps
        self.done = failure or truncated
        return StepResult(self.observation(), float(reward), self.done, failure,
                          self._soft_violation(), truncated)


def make_env(task: str, params: EnvParams | None = None, **kwargs):
    if task == "tracker":
        return TrackerEnv(params, **kwargs)
    if task == "hopper":
        return HopperEnv(params, **kwargs)
    raise ValueError(f"unknown task {task!r}")


def params_from_dict(d: dict, base: EnvParams | None = None) -> EnvParams:
    known = {f.name for f in fields(EnvParams)}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown env_params keys: {sorted(unknown)}")
    return replace(base or EnvParams(), **d)
