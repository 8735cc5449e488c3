"""Actor-critic MLPs built from dense layers with a parallel low-rank adapter path.

A layer computes ``W0 x + b0 + (alpha / rank) * B (A x)``; the adapter sum happens
before the ELU. Gradients are derived by hand and only produced for tensors that
are trainable under the active fine-tuning mode.
"""

from __future__ import annotations

import enum
import hashlib
import math
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LORA_INIT_STD = 0.02
INIT_LOG_STD = float(np.log(0.4))
HIDDEN_GAIN = float(np.sqrt(2.0))
ACTOR_OUT_GAIN = 0.01
CRITIC_OUT_GAIN = 1.0

Key = tuple[str, int, str]  # (network, layer index, role)
LOG_STD_KEY: Key = ("actor", -1, "log_std")


class NumericError(FloatingPointError):
    """A non-finite value appeared somewhere it must not."""


class StaleCacheError(RuntimeError):
    pass


class Placement(str, enum.Enum):
    OUTPUT_ONLY = "output_only"
    INPUT_OUTPUT = "input_output"
    ALL_LAYERS = "all_layers"

    def layer_indices(self, n_layers: int) -> list[int]:
        if self is Placement.OUTPUT_ONLY:
            return [n_layers - 1]
        if self is Placement.INPUT_OUTPUT:
            return sorted({0, n_layers - 1})
        return list(range(n_layers))


class Components(str, enum.Enum):
    ACTOR_ONLY = "actor_only"
    ACTOR_CRITIC = "actor_critic"

    def networks(self) -> tuple[str, ...]:
        return ("actor",) if self is Components.ACTOR_ONLY else ("actor", "critic")


@dataclass(frozen=True)
class TrainMode:
    """Which tensors train: ``kind`` is 'fft', 'lora' or 'frozen'."""

    kind: str = "fft"
    rank: int = 1
    placement: Placement = Placement.ALL_LAYERS
    components: Components = Components.ACTOR_CRITIC
    alpha: float | None = None  # None -> alpha = rank

    def __post_init__(self):
        if self.kind not in ("fft", "lora", "frozen"):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.kind == "lora" and self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        object.__setattr__(self, "placement", Placement(self.placement))
        object.__setattr__(self, "components", Components(self.components))

    @property
    def scale_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)


def elu(z: np.ndarray) -> np.ndarray:
    neg = np.minimum(z, 0.0)
    return np.maximum(z, 0.0) + np.expm1(neg)


def elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass
class LoraDense:
    w0: np.ndarray  # d x k
    b0: np.ndarray  # d
    a: np.ndarray  # rank x k
    b: np.ndarray  # d x rank
    alpha: float = 1.0
    adapter_enabled: bool = False
    base_trainable: bool = True

    def __post_init__(self):
        d, k = self.w0.shape
        if self.b0.shape != (d,) or self.a.shape[1] != k or self.b.shape[0] != d:
            raise ValueError("inconsistent LoraDense shapes")
        if self.a.shape[0] != self.b.shape[1]:
            raise ValueError("adapter factors disagree on rank")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w0.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator, gain: float, rank: int = 1):
        return cls(
            w0=orthogonal_init(out_dim, in_dim, gain, rng),
            b0=np.zeros(out_dim),
            a=np.zeros((rank, in_dim)),
            b=np.zeros((out_dim, rank)),
            alpha=float(rank),
        )

    def trainable_roles(self) -> tuple[str, ...]:
        if self.base_trainable:
            return ("w0", "b0")
        if self.adapter_enabled:
            return ("a", "b")
        return ()

    def copy(self) -> "LoraDense":
        return LoraDense(self.w0.copy(), self.b0.copy(), self.a.copy(), self.b.copy(),
                         self.alpha, self.adapter_enabled, self.base_trainable)


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def lora_forward(layer: LoraDense, x: np.ndarray) -> np.ndarray:
    """Pre-activation of ``layer`` for a single input vector or a batch of rows."""
    if not isinstance(x, np.ndarray) or x.dtype != np.float64:
        x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, layer expects {layer.in_dim}")
    h = x @ layer.w0.T + layer.b0
    if layer.adapter_enabled:
        h = h + layer.scale * ((x @ layer.a.T) @ layer.b.T)
    return h


def init_lora(layer: LoraDense, sigma: float, rng: np.random.Generator) -> None:
    """A ~ N(0, sigma^2), B = 0: the adapter starts as an exact zero addition."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    layer.a = rng.normal(0.0, sigma, size=layer.a.shape)
    layer.b = np.zeros_like(layer.b)


def merge_lora(layer: LoraDense) -> np.ndarray:
    if not layer.adapter_enabled:
        raise ValueError("merge_lora requires an enabled adapter")
    return layer.w0 + layer.scale * (layer.b @ layer.a)


@dataclass
class MlpPolicy:
    actor: list[LoraDense]
    critic: list[LoraDense]
    log_std: np.ndarray
    init_seed: int | None = None
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        for name, layers in (("actor", self.actor), ("critic", self.critic)):
            for i in range(1, len(layers)):
                if layers[i].in_dim != layers[i - 1].out_dim:
                    raise ValueError(f"{name} layer {i} does not chain with layer {i - 1}")
        if self.critic[-1].out_dim != 1:
            raise ValueError("critic must end in a scalar")
        if self.actor[-1].out_dim != self.log_std.shape[0]:
            raise ValueError("log_std length must equal action dimension")
        if self.actor[0].in_dim != self.critic[0].in_dim:
            raise ValueError("actor and critic observe different dimensions")

    @property
    def obs_dim(self) -> int:
        return self.actor[0].in_dim

    @property
    def act_dim(self) -> int:
        return self.actor[-1].out_dim

    def networks(self) -> dict[str, list[LoraDense]]:
        return {"actor": self.actor, "critic": self.critic}

    def parameters(self) -> dict[Key, np.ndarray]:
        params: dict[Key, np.ndarray] = {}
        for name, layers in self.networks().items():
            for i, layer in enumerate(layers):
                for role in ("w0", "b0", "a", "b"):
                    params[(name, i, role)] = getattr(layer, role)
        params[LOG_STD_KEY] = self.log_std
        return params

    def trainable_keys(self) -> list[Key]:
        keys: list[Key] = []
        for name, layers in self.networks().items():
            for i, layer in enumerate(layers):
                keys.extend((name, i, role) for role in layer.trainable_roles())
        keys.append(LOG_STD_KEY)
        return keys

    def set_parameter(self, key: Key, value: np.ndarray) -> None:
        if key == LOG_STD_KEY:
            self.log_std = value
        else:
            name, i, role = key
            setattr(self.networks()[name][i], role, value)
        self.version += 1

    def copy(self) -> "MlpPolicy":
        return MlpPolicy([l.copy() for l in self.actor], [l.copy() for l in self.critic],
                         self.log_std.copy(), self.init_seed)

    def frozen_checksum(self) -> str:
        """SHA-256 over every W0/b0 tensor, in a fixed order."""
        h = hashlib.sha256()
        for name, layers in self.networks().items():
            for layer in layers:
                h.update(np.ascontiguousarray(layer.w0).tobytes())
                h.update(np.ascontiguousarray(layer.b0).tobytes())
        return h.hexdigest()

    def checksum(self, networks: tuple[str, ...] = ("actor", "critic")) -> str:
        h = hashlib.sha256()
        for name in networks:
            for layer in self.networks()[name]:
                for role in ("w0", "b0", "a", "b"):
                    h.update(np.ascontiguousarray(getattr(layer, role)).tobytes())
        if "actor" in networks:
            h.update(self.log_std.tobytes())
        return h.hexdigest()


def build_policy(obs_dim: int, act_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (64, 64), seed: int | None = None) -> MlpPolicy:
    def stack(out_dim: int, out_gain: float) -> list[LoraDense]:
        dims = [obs_dim, *hidden, out_dim]
        gains = [HIDDEN_GAIN] * len(hidden) + [out_gain]
        return [LoraDense.create(dims[i], dims[i + 1], rng, gains[i]) for i in range(len(dims) - 1)]

    actor = stack(act_dim, ACTOR_OUT_GAIN)
    critic = stack(1, CRITIC_OUT_GAIN)
    return MlpPolicy(actor, critic, np.full(act_dim, INIT_LOG_STD), init_seed=seed)


def configure_mode(net: MlpPolicy, mode: TrainMode, rng: np.random.Generator | None = None,
                   sigma: float = LORA_INIT_STD) -> None:
    """Set trainable flags for ``mode`` and, for LoRA, (re)initialise adapters."""
    for name, layers in net.networks().items():
        active = name in mode.components.networks()
        chosen = set(mode.placement.layer_indices(len(layers)))
        for i, layer in enumerate(layers):
            layer.adapter_enabled = False
            layer.base_trainable = mode.kind == "fft" and active
            if mode.kind == "lora" and active and i in chosen:
                if rng is None:
                    raise ValueError("LoRA mode needs an rng for adapter init")
                layer.a = np.zeros((mode.rank, layer.in_dim))
                layer.b = np.zeros((layer.out_dim, mode.rank))
                layer.alpha = mode.scale_alpha
                layer.adapter_enabled = True
                init_lora(layer, sigma, rng)
    net.version += 1


@dataclass
class ForwardCache:
    obs: np.ndarray
    inputs: dict[str, list[np.ndarray]]
    pre: dict[str, list[np.ndarray]]
    version: int


def _run_stack(name: str, layers: list[LoraDense], x: np.ndarray):
    inputs, pre = [], []
    for i, layer in enumerate(layers):
        inputs.append(x)
        z = lora_forward(layer, x)
        if not math.isfinite(z.sum()):  # overflowing sums only occur for absurd activations
            raise NumericError(f"non-finite activation in {name} layer {i}")
        pre.append(z)
        x = elu(z) if i < len(layers) - 1 else z
    return x, inputs, pre


def forward_policy(net: MlpPolicy, obs: np.ndarray):
    """Return ``(mean, log_std, value, cache)``; ``obs`` is a vector or a batch of rows."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    batch = obs[None, :] if single else obs
    if batch.shape[1] != net.obs_dim:
        raise ValueError(f"observation dimension {batch.shape[1]} != {net.obs_dim}")
    if not np.all(np.isfinite(batch)):
        raise NumericError("non-finite observation")
    mean, a_in, a_pre = _run_stack("actor", net.actor, batch)
    val, c_in, c_pre = _run_stack("critic", net.critic, batch)
    value = val[:, 0]
    cache = ForwardCache(batch, {"actor": a_in, "critic": c_in}, {"actor": a_pre, "critic": c_pre},
                         net.version)
    if single:
        return mean[0], net.log_std.copy(), float(value[0]), cache
    return mean, net.log_std.copy(), value, cache


def act_deterministic(net: MlpPolicy, obs: np.ndarray) -> np.ndarray:
    """Actor mean only; skips the critic."""
    obs = np.asarray(obs, dtype=np.float64)
    x = obs[None, :] if obs.ndim == 1 else obs
    mean, _, _ = _run_stack("actor", net.actor, x)
    return mean[0] if obs.ndim == 1 else mean


def _backprop_stack(layers, inputs, pre, upstream, name, grads):
    dz = upstream
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if i < len(layers) - 1:
            dz = dz * elu_grad(pre[i])
        x = inputs[i]
        roles = layer.trainable_roles()
        if "w0" in roles:
            grads[(name, i, "w0")] = dz.T @ x
            grads[(name, i, "b0")] = dz.sum(axis=0)
        if layer.adapter_enabled:
            s = layer.scale
            ax = x @ layer.a.T  # n x rank
            dzb = dz @ layer.b  # n x rank
            if "a" in roles:
                grads[(name, i, "b")] = s * (dz.T @ ax)
                grads[(name, i, "a")] = s * (dzb.T @ x)
        if i > 0:
            dx = dz @ layer.w0
            if layer.adapter_enabled:
                dx = dx + layer.scale * (dzb @ layer.a)
            dz = dx


def backward(net: MlpPolicy, cache: ForwardCache, d_mean, d_log_std, d_value) -> dict[Key, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable tensor.

    ``d_mean`` has the shape of the batched mean, ``d_value`` of the batched value,
    ``d_log_std`` of ``log_std``. Pass ``None`` for an output the loss ignores.
    """
    if cache.version != net.version:
        raise StaleCacheError("cache was produced before the last parameter change")
    n = cache.obs.shape[0]
    d_mean = np.zeros((n, net.act_dim)) if d_mean is None else np.asarray(d_mean, float).reshape(n, net.act_dim)
    d_value = np.zeros(n) if d_value is None else np.asarray(d_value, float).reshape(n)
    grads: dict[Key, np.ndarray] = {}
    _backprop_stack(net.actor, cache.inputs["actor"], cache.pre["actor"], d_mean, "actor", grads)
    _backprop_stack(net.critic, cache.inputs["critic"], cache.pre["critic"], d_value[:, None], "critic", grads)
    grads[LOG_STD_KEY] = (np.zeros(net.act_dim) if d_log_std is None
                          else np.asarray(d_log_std, float).reshape(net.act_dim).copy())
    return grads


def _layer_counts(layer_shapes: list[tuple[int, int]], indices, rank):
    base = sum(d * k + d for d, k in layer_shapes)
    adapters = sum(rank * (d + k) for i, (d, k) in enumerate(layer_shapes) if i in indices)
    return base, adapters


def trainable_param_count(net: MlpPolicy, mode: TrainMode) -> tuple[int, int, float]:
    """``(trainable, total_fft, reduction_percent)`` for ``mode`` on ``net``'s shapes."""
    total = net.act_dim
    trainable = net.act_dim  # log_std always trains
    for name, layers in net.networks().items():
        shapes = [(l.out_dim, l.in_dim) for l in layers]
        indices = set(mode.placement.layer_indices(len(layers)))
        base, adapters = _layer_counts(shapes, indices, mode.rank)
        total += base
        if name not in mode.components.networks():
            continue
        if mode.kind == "fft":
            trainable += base
        elif mode.kind == "lora":
            trainable += adapters
    return trainable, total, 100.0 * (1.0 - trainable / total)


def save_checkpoint(net: MlpPolicy, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``net`` as an ``.npz`` holding every tensor plus a JSON metadata string."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {"log_std": net.log_std}
    meta = {"format": "safelora-policy/1", "init_seed": net.init_seed, "layers": {}, "extra": extra or {}}
    for name, layers in net.networks().items():
        meta["layers"][name] = []
        for i, layer in enumerate(layers):
            for role in ("w0", "b0", "a", "b"):
                arrays[f"{name}.{i}.{role}"] = getattr(layer, role)
            meta["layers"][name].append({
                "shape": [layer.out_dim, layer.in_dim], "rank": layer.rank, "alpha": layer.alpha,
                "adapter_enabled": layer.adapter_enabled, "base_trainable": layer.base_trainable,
            })
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[MlpPolicy, dict]:
    path = Path(path)
    if not path.exists() and path.with_suffix(".npz").exists():
        path = path.with_suffix(".npz")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        nets = {}
        for name, specs in meta["layers"].items():
            nets[name] = [
                LoraDense(data[f"{name}.{i}.w0"].copy(), data[f"{name}.{i}.b0"].copy(),
                          data[f"{name}.{i}.a"].copy(), data[f"{name}.{i}.b"].copy(),
                          spec["alpha"], spec["adapter_enabled"], spec["base_trainable"])
                for i, spec in enumerate(specs)
            ]
        log_std = data["log_std"].copy()
    return MlpPolicy(nets["actor"], nets["critic"], log_std, meta["init_seed"]), meta["extra"]
