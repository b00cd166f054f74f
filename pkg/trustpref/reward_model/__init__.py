from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import TYPE_CHECKING, Optional

import numpy as np

from trustpref import Activation, ArchitectureKind, ModelConfig
from trustpref.exceptions import RejectedInputError

if TYPE_CHECKING:
    from trustpref.core import Trajectory

ACTIVATIONS = {
    Activation.TANH: (np.tanh, lambda pre, post: 1.0 - post * post),
    Activation.RELU: (lambda pre: np.maximum(pre, 0.0), lambda pre, post: (pre > 0.0).astype(np.float64)),
}


@dataclass(frozen=True)
class Architecture:
    kind: ArchitectureKind
    input_dim: int
    hidden_sizes: tuple[int, ...] = ()
    activation: Activation = Activation.TANH

    @classmethod
    def from_config(cls, config: ModelConfig, input_dim: int) -> Architecture:
        hidden = tuple(config.hidden_sizes) if config.architecture == ArchitectureKind.MLP else ()
        return cls(kind=config.architecture, input_dim=input_dim, hidden_sizes=hidden, activation=config.activation)

    @cached_property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """(fan_out, fan_in) per dense layer; the linear kind is a single bias-free layer."""
        if self.kind == ArchitectureKind.LINEAR:
            return ((1, self.input_dim),)
        sizes = (self.input_dim, *self.hidden_sizes, 1)
        return tuple((fan_out, fan_in) for fan_in, fan_out in zip(sizes[:-1], sizes[1:]))

    @property
    def has_bias(self) -> bool:
        return self.kind == ArchitectureKind.MLP

    @cached_property
    def n_params(self) -> int:
        bias = 1 if self.has_bias else 0
        return sum(fan_out * (fan_in + bias) for fan_out, fan_in in self.layer_shapes)

    def describe(self) -> str:
        if self.kind == ArchitectureKind.LINEAR:
            return f"linear {self.input_dim}"
        hidden = " ".join(str(size) for size in self.hidden_sizes)
        return f"mlp {self.input_dim} {self.activation.value} {hidden}".rstrip()


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Per-step reward r(s, a) over concatenated features; trajectory reward is the sum over steps."""

    architecture: Architecture
    params: np.ndarray
    r_max: Optional[float] = 1.0

    def __post_init__(self) -> None:
        params = np.array(self.params, dtype=np.float64, copy=True).reshape(-1)
        if params.size != self.architecture.n_params:
            expected = self.architecture.n_params
            msg = f"Expected {expected} parameters for {self.architecture.describe()}, got {params.size}"
            raise RejectedInputError(msg)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def input_dim(self) -> int:
        return self.architecture.input_dim

    def with_params(self, params: np.ndarray) -> RewardModel:
        return replace(self, params=params)

    def layers(self) -> list[tuple[np.ndarray, Optional[np.ndarray]]]:
        """Views (W, b) into the flat parameter vector; W is (fan_out, fan_in)."""
        return _unflatten(self.architecture, self.params)


def _unflatten(architecture: Architecture, flat: np.ndarray) -> list[tuple[np.ndarray, Optional[np.ndarray]]]:
    layers = []
    offset = 0
    for fan_out, fan_in in architecture.layer_shapes:
        weight = flat[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        bias = None
        if architecture.has_bias:
            bias = flat[offset : offset + fan_out]
            offset += fan_out
        layers.append((weight, bias))
    return layers


def init_model(config: ModelConfig, input_dim: int, rng: np.random.Generator) -> RewardModel:
    """Uniform initialisation in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every weight and bias of a layer."""
    architecture = Architecture.from_config(config, input_dim=input_dim)
    chunks = []
    for fan_out, fan_in in architecture.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        if architecture.has_bias:
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return RewardModel(architecture=architecture, params=np.concatenate(chunks), r_max=config.r_max)


def zero_model(config: ModelConfig, input_dim: int) -> RewardModel:
    architecture = Architecture.from_config(config, input_dim=input_dim)
    return RewardModel(architecture=architecture, params=np.zeros(architecture.n_params), r_max=config.r_max)


def _check_features(model: RewardModel, features: np.ndarray, ndim: int) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != ndim or features.shape[-1] != model.input_dim:
        msg = f"Expected features of dimension {model.input_dim}, got array of shape {features.shape}"
        raise RejectedInputError(msg)
    return features


def _forward(model: RewardModel, features: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Per-row rewards of an (N, d) feature matrix plus the (pre, post) activations needed by the backward pass."""
    activation, _ = ACTIVATIONS[model.architecture.activation]
    layers = model.layers()
    cache = []
    post = features
    for index, (weight, bias) in enumerate(layers):
        pre = post @ weight.T
        if bias is not None:
            pre = pre + bias
        last = index == len(layers) - 1
        if last:
            post = model.r_max * np.tanh(pre / model.r_max) if model.r_max is not None else pre
        else:
            post = activation(pre)
        cache.append((pre, post))
    return cache[-1][1][:, 0], cache


def step_rewards(model: RewardModel, features: np.ndarray) -> np.ndarray:
    features = _check_features(model, features, ndim=2)
    rewards, _ = _forward(model, features)
    return rewards


def step_reward(model: RewardModel, feature: np.ndarray) -> float:
    feature = _check_features(model, feature, ndim=1)
    return float(step_rewards(model, feature[np.newaxis, :])[0])


def trajectory_returns(model: RewardModel, features: np.ndarray) -> np.ndarray:
    """Returns of an (n, T, d) stack of trajectories."""
    features = _check_features(model, features, ndim=3)
    n_traj, horizon, dim = features.shape
    rewards = step_rewards(model, features.reshape(n_traj * horizon, dim))
    return rewards.reshape(n_traj, horizon).sum(axis=1)


def trajectory_return(model: RewardModel, trajectory: Trajectory) -> float:
    return float(trajectory_returns(model, trajectory.steps[np.newaxis, :, :])[0])


def backward_rows(model: RewardModel, features: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Sum over rows of upstream[n] * d reward(features[n]) / d theta."""
    features = _check_features(model, features, ndim=2)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.size != features.shape[0]:
        msg = f"Got {upstream.size} upstream values for {features.shape[0]} feature rows"
        raise RejectedInputError(msg)

    _, derivative = ACTIVATIONS[model.architecture.activation]
    layers = model.layers()
    _, cache = _forward(model, features)

    pre_out, post_out = cache[-1]
    if model.r_max is not None:
        local = 1.0 - (post_out / model.r_max) ** 2
    else:
        local = np.ones_like(pre_out)
    delta = upstream[:, np.newaxis] * local

    grads: list[np.ndarray] = []
    for index in range(len(layers) - 1, -1, -1):
        weight, bias = layers[index]
        inputs = cache[index - 1][1] if index > 0 else features
        if bias is not None:
            grads.append(delta.sum(axis=0))
        grads.append((delta.T @ inputs).reshape(-1))
        if index > 0:
            pre, post = cache[index - 1]
            delta = (delta @ weight) * derivative(pre, post)
    grads.reverse()
    return np.concatenate(grads)


def backward(model: RewardModel, feature: np.ndarray, upstream: float) -> np.ndarray:
    feature = _check_features(model, feature, ndim=1)
    return backward_rows(model, feature[np.newaxis, :], np.array([upstream]))


def returns_backward(model: RewardModel, features: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum_n upstream[n] * R(trajectory n) for an (n, T, d) stack."""
    features = _check_features(model, features, ndim=3)
    n_traj, horizon, dim = features.shape
    per_step = np.repeat(np.asarray(upstream, dtype=np.float64), horizon)
    return backward_rows(model, features.reshape(n_traj * horizon, dim), per_step)


CHECKPOINT_HEADER = "reward-model 1"


def dumps_checkpoint(model: RewardModel) -> str:
    from trustpref.core.io import format_real

    r_max = "none" if model.r_max is None else format_real(model.r_max)
    lines = [
        CHECKPOINT_HEADER,
        f"architecture {model.architecture.describe()}",
        f"r_max {r_max}",
        f"params {model.params.size}",
    ]
    lines.extend(format_real(value) for value in model.params)
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str, source: str = "<checkpoint>") -> RewardModel:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        msg = f"{source}: not a reward model checkpoint"
        raise RejectedInputError(msg)
    try:
        descriptor = lines[1].split()[1:]
        kind = ArchitectureKind(descriptor[0])
        input_dim = int(descriptor[1])
        if kind == ArchitectureKind.MLP:
            architecture = Architecture(
                kind=kind,
                input_dim=input_dim,
                activation=Activation(descriptor[2]),
                hidden_sizes=tuple(int(size) for size in descriptor[3:]),
            )
        else:
            architecture = Architecture(kind=kind, input_dim=input_dim)
        r_max_field = lines[2].split()[1]
        r_max = None if r_max_field == "none" else float(r_max_field)
        n_params = int(lines[3].split()[1])
        params = np.array([float(value) for value in lines[4 : 4 + n_params]], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        msg = f"{source}: malformed checkpoint ({exc})"
        raise RejectedInputError(msg) from exc
    return RewardModel(architecture=architecture, params=params, r_max=r_max)
