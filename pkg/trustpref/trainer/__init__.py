from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Callable, Optional

import numpy as np
import structlog
from tqdm import tqdm

from trustpref import RunConfig, Sampling, TrainConfig, TrustConfig
from trustpref.core import PreferenceDataset, TrustState, check_dataset, rng_for
from trustpref.exceptions import ConfigurationError, DataError, NumericDivergenceError
from trustpref.reward_model import RewardModel, init_model, returns_backward, trajectory_returns
from trustpref.trust_loss import (
    BatchSlice,
    expert_gradient_contributions,
    initial_trust,
    loss_gradients,
    make_trust_state,
    weighted_nll,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

log = structlog.get_logger(__name__)

MetricsRow = dict[str, Any]
Evaluator = Callable[[RewardModel], float]
Checkpointer = Callable[["TrainerState", "Sequence[MetricsRow]"], None]
ProgressCallback = Callable[[str, int, int], None]


@dataclass(frozen=True, eq=False)
class TrainerState:
    """Everything joint training carries from one update to the next.

    ``loss`` and ``expert_gradients`` describe the minibatch that produced this state.
    """

    model: RewardModel
    trust: TrustState
    options: TrustConfig
    settings: TrainConfig
    rng: np.random.Generator
    iteration: int = 0
    velocity_params: Optional[np.ndarray] = None
    velocity_alpha: Optional[np.ndarray] = None
    loss: float = math.nan
    expert_gradients: Optional[np.ndarray] = field(default=None)

    @property
    def n_experts(self) -> int:
        return self.trust.n_experts


class ProgressBar:
    """tqdm-backed progress callback."""

    def __init__(self, show_progress: bool = False, unit: str = "it") -> None:
        self.show_progress = show_progress
        self.unit = unit
        self.progress_bar: Optional[tqdm] = None

    def __call__(self, stage: str, processed: int, total: int) -> None:
        if not self.show_progress:
            return
        if self.progress_bar is None:
            self.progress_bar = tqdm(total=total, desc=stage, unit=self.unit)

        self.progress_bar.n = processed
        self.progress_bar.refresh()

        if processed >= total:
            self.progress_bar.close()
            self.progress_bar = None


def init_trainer(config: RunConfig, data: PreferenceDataset) -> TrainerState:
    check_dataset(data)
    if data.n_experts != config.n_experts:
        msg = f"Config lists {config.n_experts} experts but the dataset has K={data.n_experts}"
        raise ConfigurationError(msg)
    options = config.effective_trust()
    model = init_model(config.model, input_dim=data.dimension, rng=rng_for(config.seed, "model"))
    trust = initial_trust(data.n_experts, options)
    log.debug(
        "train.init",
        experts=data.n_experts,
        architecture=model.architecture.describe(),
        n_params=model.architecture.n_params,
        mode=config.train.mode.value,
    )
    return TrainerState(
        model=model,
        trust=trust,
        options=options,
        settings=config.train,
        rng=rng_for(config.seed, "minibatch"),
    )


def sample_minibatch(
    rng: np.random.Generator, data: PreferenceDataset, batch_size: int, sampling: Sampling = Sampling.POOLED
) -> np.ndarray:
    """Sorted triple indices drawn without replacement; stratified draws an equal share per expert."""
    n_triples = len(data.triples)
    if sampling == Sampling.STRATIFIED:
        experts = data.arrays[3]
        share, extra = divmod(batch_size, data.n_experts)
        chosen = []
        for k in range(data.n_experts):
            members = np.flatnonzero(experts == k)
            take = min(share + (1 if k < extra else 0), members.size)
            if take:
                chosen.append(rng.choice(members, size=take, replace=False))
        return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(n_triples, size=min(batch_size, n_triples), replace=False))


def _batch_returns(model: RewardModel, data: PreferenceDataset, first: np.ndarray, second: np.ndarray):
    ids, inverse = np.unique(np.concatenate([first, second]), return_inverse=True)
    features = data.features[ids]
    returns = trajectory_returns(model, features)
    size = first.size
    return features, inverse[:size], inverse[size:], returns


def train_step(state: TrainerState, data: PreferenceDataset, batch_size: int) -> TrainerState:
    """One joint update of reward parameters and trust on a fresh minibatch."""
    if not data.triples:
        msg = "Cannot train on an empty dataset"
        raise DataError(msg)
    if batch_size < 1:
        msg = f"batch_size must be >= 1, got {batch_size}"
        raise ConfigurationError(msg)

    settings = state.settings
    options = state.options
    iteration = state.iteration + 1
    rng = copy.deepcopy(state.rng)

    indices = sample_minibatch(rng, data, batch_size, settings.sampling)
    first, second, labels, experts = (column[indices] for column in data.arrays)
    features, slot_i, slot_j, returns = _batch_returns(state.model, data, first, second)

    trust = make_trust_state(state.trust.alpha, options)
    delta_r = returns[slot_i] - returns[slot_j]
    batch = BatchSlice(delta_r=delta_r, y=labels, expert=experts, trust=trust, options=options)
    size = batch.size
    loss = weighted_nll(batch) / size
    grad_delta, grad_alpha = loss_gradients(batch)
    grad_delta = grad_delta / size
    grad_alpha = grad_alpha / size
    contributions = expert_gradient_contributions(batch) / size

    upstream = np.bincount(slot_i, weights=grad_delta, minlength=returns.size) - np.bincount(
        slot_j, weights=grad_delta, minlength=returns.size
    )
    grad_params = returns_backward(state.model, features, upstream)

    if not (math.isfinite(loss) and np.all(np.isfinite(grad_params)) and np.all(np.isfinite(grad_alpha))):
        msg = f"Non-finite loss or gradient at iteration {iteration}"
        raise NumericDivergenceError(msg, iteration=iteration)

    velocity_params = state.velocity_params
    if settings.momentum:
        previous = velocity_params if velocity_params is not None else np.zeros_like(grad_params)
        velocity_params = settings.momentum_coef * previous + grad_params
        step_params = velocity_params
    else:
        step_params = grad_params
    params = state.model.params - settings.reward_learning_rate * step_params

    alpha = state.trust.alpha.copy()
    velocity_alpha = state.velocity_alpha
    if options.learn and iteration > settings.trust_warmup:
        # experts absent from the minibatch keep their trust
        present = np.bincount(experts, minlength=state.n_experts) > 0
        if settings.momentum:
            velocity_alpha = np.zeros_like(alpha) if velocity_alpha is None else velocity_alpha.copy()
            velocity_alpha[present] = settings.momentum_coef * velocity_alpha[present] + grad_alpha[present]
            alpha[present] -= settings.trust_learning_rate * velocity_alpha[present]
        else:
            alpha[present] -= settings.trust_learning_rate * grad_alpha[present]

    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(alpha))):
        msg = f"Parameters diverged at iteration {iteration}"
        raise NumericDivergenceError(msg, iteration=iteration)

    return replace(
        state,
        model=state.model.with_params(params),
        trust=make_trust_state(alpha, options),
        rng=rng,
        iteration=iteration,
        velocity_params=velocity_params,
        velocity_alpha=velocity_alpha,
        loss=loss,
        expert_gradients=contributions,
    )


def preference_accuracy(model: RewardModel, dataset: PreferenceDataset) -> float:
    """Fraction of triples whose label agrees with the model's return difference; exact ties count one half."""
    if not dataset.triples:
        return math.nan
    first, second, labels, _ = dataset.arrays
    returns = trajectory_returns(model, dataset.features)
    delta = returns[first] - returns[second]
    agree = np.where(delta == 0.0, 0.5, ((delta > 0.0) == (labels == 1)).astype(np.float64))
    return float(np.mean(agree))


def metrics_columns(n_experts: int) -> list[str]:
    prefixes = ("alpha_raw", "alpha_norm", "weight", "grad_alpha")
    per_expert = [f"{prefix}_{k}" for prefix in prefixes for k in range(n_experts)]
    return ["iteration", "loss", *per_expert, "holdout_accuracy", "affine_r2"]


def metrics_row(
    state: TrainerState,
    holdout: Optional[PreferenceDataset] = None,
    evaluator: Optional[Evaluator] = None,
) -> MetricsRow:
    loss = state.loss if math.isfinite(state.loss) else None
    row: MetricsRow = {"iteration": state.iteration, "loss": loss}
    trust = state.trust
    gradients = state.expert_gradients if state.expert_gradients is not None else np.zeros(state.n_experts)
    for prefix, values in (
        ("alpha_raw", trust.alpha),
        ("alpha_norm", trust.alpha_normalized),
        ("weight", trust.weights),
        ("grad_alpha", gradients),
    ):
        for k, value in enumerate(values):
            row[f"{prefix}_{k}"] = float(value)
    row["holdout_accuracy"] = preference_accuracy(state.model, holdout) if holdout is not None else None
    row["affine_r2"] = evaluator(state.model) if evaluator is not None else None
    return row


@dataclass(frozen=True, eq=False)
class TrainingResult:
    model: RewardModel
    trust: TrustState
    metrics: list[MetricsRow]
    state: TrainerState


def train(
    config: RunConfig,
    data: PreferenceDataset,
    holdout: Optional[PreferenceDataset] = None,
    evaluator: Optional[Evaluator] = None,
    checkpoint: Optional[Checkpointer] = None,
    progress: Optional[ProgressCallback] = None,
) -> TrainingResult:
    """Run ``config.train.iterations`` joint updates, logging a metrics row every ``log_interval`` iterations.

    ``checkpoint`` receives every logged state, so on divergence the last one it saw is the last good state.
    """
    state = init_trainer(config, data)
    settings = config.train
    metrics: list[MetricsRow] = [metrics_row(state, holdout=holdout, evaluator=evaluator)]
    if checkpoint is not None:
        checkpoint(state, metrics)
    for _ in range(settings.iterations):
        try:
            state = train_step(state, data, settings.batch_size)
        except NumericDivergenceError:
            log.error("train.diverged", iteration=state.iteration + 1, logged_rows=len(metrics))
            raise
        if state.iteration % settings.log_interval == 0 or state.iteration == settings.iterations:
            row = metrics_row(state, holdout=holdout, evaluator=evaluator)
            metrics.append(row)
            log.debug("train.step", iteration=state.iteration, loss=state.loss, accuracy=row["holdout_accuracy"])
            if checkpoint is not None:
                checkpoint(state, metrics)
        if progress is not None:
            progress("train", state.iteration, settings.iterations)

    log.info(
        "train.done",
        iterations=state.iteration,
        mode=settings.mode.value,
        alpha_normalized=[round(float(value), 6) for value in state.trust.alpha_normalized],
    )
    return TrainingResult(model=state.model, trust=state.trust, metrics=metrics, state=state)


def state_digest(state: TrainerState) -> str:
    """SHA-256 over the raw bytes of the parameters, trust vector and iteration."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(state.model.params).tobytes())
    digest.update(np.ascontiguousarray(state.trust.alpha).tobytes())
    digest.update(str(state.iteration).encode())
    return digest.hexdigest()
