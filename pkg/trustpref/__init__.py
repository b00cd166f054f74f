from __future__ import annotations

from enum import Enum
from typing import Any, Optional

import pydantic

STRICT = pydantic.ConfigDict(extra="forbid", frozen=True, use_enum_values=False)


class TeacherMode(str, Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"


class EnvKind(str, Enum):
    LINEAR_FEATURE = "linear-feature"
    RANDOM_MDP = "random-mdp"


class ArchitectureKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


class TrainMode(str, Enum):
    TRUST = "trust"
    PLAIN_JOINT = "plain-joint"
    UNIFORM_BASELINE = "uniform-baseline"


class Sampling(str, Enum):
    POOLED = "pooled"
    STRATIFIED = "stratified"


class ExpertSpec(pydantic.BaseModel):
    """Simulated teacher: rationality beta, discount gamma and labelling mode."""

    model_config = STRICT

    beta: float = 1.0
    gamma: float = pydantic.Field(default=1.0, gt=0.0, le=1.0)
    mode: TeacherMode = TeacherMode.DETERMINISTIC


class EnvConfig(pydantic.BaseModel):
    model_config = STRICT

    kind: EnvKind = EnvKind.LINEAR_FEATURE
    feature_dim: Optional[int] = pydantic.Field(default=20, gt=0)
    horizon: int = pydantic.Field(default=25, gt=0)
    n_trajectories: int = pydantic.Field(default=200, ge=2)
    n_holdout_trajectories: int = pydantic.Field(default=50, ge=2)
    # linear-feature: per-trajectory style vector plus per-step jitter
    step_noise: float = pydantic.Field(default=0.5, ge=0.0)
    reward_scale: float = pydantic.Field(default=1.0, gt=0.0)
    # random-mdp
    n_states: int = pydantic.Field(default=16, gt=0)
    n_actions: int = pydantic.Field(default=4, gt=0)

    @pydantic.model_validator(mode="after")
    def check_feature_dim(self) -> EnvConfig:
        if self.kind == EnvKind.RANDOM_MDP:
            expected = self.n_states + self.n_actions
            if self.feature_dim is not None and self.feature_dim != expected:
                msg = f"feature_dim must equal n_states + n_actions ({expected}) for a random-mdp env"
                raise ValueError(msg)
        elif self.feature_dim is None:
            msg = "feature_dim is required for a linear-feature env"
            raise ValueError(msg)
        return self

    @property
    def dimension(self) -> int:
        if self.kind == EnvKind.RANDOM_MDP:
            return self.n_states + self.n_actions
        return int(self.feature_dim)


class ModelConfig(pydantic.BaseModel):
    model_config = STRICT

    architecture: ArchitectureKind = ArchitectureKind.MLP
    hidden_sizes: list[int] = pydantic.Field(default_factory=lambda: [64, 64])
    activation: Activation = Activation.TANH
    # None disables the output squashing
    r_max: Optional[float] = pydantic.Field(default=1.0, gt=0.0)

    @pydantic.field_validator("hidden_sizes")
    @classmethod
    def check_hidden_sizes(cls, value: list[int]) -> list[int]:
        if any(size <= 0 for size in value):
            msg = "hidden_sizes must all be positive"
            raise ValueError(msg)
        return value


class TrustConfig(pydantic.BaseModel):
    model_config = STRICT

    init_alpha: float = 0.01
    learn: bool = True
    bound: bool = True
    normalize: bool = True
    weighting: bool = True
    scaled_weights: bool = pydantic.Field(default=True, description="K-scaled weights (sum to K) instead of sum to 1")
    differentiate_weights: bool = False
    eps_norm: float = pydantic.Field(default=1e-8, gt=0.0)


class TrainConfig(pydantic.BaseModel):
    model_config = STRICT

    mode: TrainMode = TrainMode.TRUST
    reward_learning_rate: float = pydantic.Field(default=3e-3, ge=0.0)
    trust_learning_rate: float = pydantic.Field(default=3e-2, ge=0.0)
    # trust stays frozen while the reward model picks up the pooled label direction
    trust_warmup: int = pydantic.Field(default=500, ge=0)
    batch_size: int = pydantic.Field(default=128, gt=0)
    iterations: int = pydantic.Field(default=5000, gt=0)
    momentum: bool = False
    momentum_coef: float = pydantic.Field(default=0.9, ge=0.0, lt=1.0)
    sampling: Sampling = Sampling.POOLED
    log_interval: int = pydantic.Field(default=50, gt=0)


class OutputConfig(pydantic.BaseModel):
    model_config = STRICT

    directory: str = "runs"


def _default_experts() -> list[ExpertSpec]:
    return [ExpertSpec(beta=1.0), ExpertSpec(beta=1.0), ExpertSpec(beta=1.0), ExpertSpec(beta=-1.0)]


class RunConfig(pydantic.BaseModel):
    model_config = STRICT

    name: str = "run"
    seed: int = pydantic.Field(ge=0, lt=2**64)
    env: EnvConfig = pydantic.Field(default_factory=EnvConfig)
    experts: list[ExpertSpec] = pydantic.Field(default_factory=_default_experts, min_length=1)
    pairs_per_expert: int = pydantic.Field(default=500, gt=0)
    disjoint_pairs: bool = True
    holdout_fraction: float = pydantic.Field(default=0.1, ge=0.0, lt=1.0)
    holdout_pairs: int = pydantic.Field(default=500, ge=0)
    model: ModelConfig = pydantic.Field(default_factory=ModelConfig)
    trust: TrustConfig = pydantic.Field(default_factory=TrustConfig)
    train: TrainConfig = pydantic.Field(default_factory=TrainConfig)
    output: OutputConfig = pydantic.Field(default_factory=OutputConfig)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def effective_trust(self) -> TrustConfig:
        """Trust options after applying the training mode."""
        if self.train.mode == TrainMode.UNIFORM_BASELINE:
            return self.trust.model_copy(
                update={"init_alpha": 1.0, "learn": False, "bound": False, "normalize": False, "weighting": False}
            )
        if self.train.mode == TrainMode.PLAIN_JOINT:
            return self.trust.model_copy(update={"bound": False, "normalize": False, "weighting": False})
        return self.trust


class SweepSpec(pydantic.BaseModel):
    """Grid of (feedback budget, beta mixture, seed) runs sharing a base config."""

    model_config = STRICT

    name: str = "sweep"
    base: RunConfig = pydantic.Field(default_factory=lambda: RunConfig(seed=0))
    budgets: list[int] = pydantic.Field(min_length=1)
    mixtures: list[list[float]] = pydantic.Field(min_length=1)
    seeds: list[int] = pydantic.Field(min_length=1)
    workers: int = pydantic.Field(default=1, gt=0)

    @pydantic.field_validator("base", mode="before")
    @classmethod
    def default_base_seed(cls, value: Any) -> Any:
        # every run gets its seed from the grid
        if isinstance(value, dict):
            return {"seed": 0, **value}
        return value

    @pydantic.field_validator("budgets")
    @classmethod
    def check_budgets(cls, value: list[int]) -> list[int]:
        if any(budget <= 0 for budget in value):
            msg = "budgets must all be positive"
            raise ValueError(msg)
        return value

    @pydantic.field_validator("mixtures")
    @classmethod
    def check_mixtures(cls, value: list[list[float]]) -> list[list[float]]:
        if any(not mixture for mixture in value):
            msg = "every mixture needs at least one expert"
            raise ValueError(msg)
        return value

    def run_config(self, budget: int, mixture: list[float], seed: int) -> RunConfig:
        """Base config specialised to one grid cell; the budget is split evenly across experts."""
        experts = [self.base.experts[0].model_copy(update={"beta": beta}) for beta in mixture]
        pairs_per_expert = max(1, budget // len(mixture))
        label = "_".join(f"{beta:g}" for beta in mixture)
        return self.base.model_copy(
            update={
                "name": f"{self.name}-b{budget}-m{label}-s{seed}",
                "seed": seed,
                "experts": experts,
                "pairs_per_expert": pairs_per_expert,
            }
        )
