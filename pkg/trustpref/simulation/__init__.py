from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
import structlog
from scipy.special import expit

from trustpref import EnvConfig, EnvKind, ExpertSpec, RunConfig, TeacherMode
from trustpref.core import PreferenceDataset, PreferenceTriple, Trajectory, check_dataset, rng_for
from trustpref.exceptions import ConfigurationError, DataError

if TYPE_CHECKING:
    from collections.abc import Sequence

log = structlog.get_logger(__name__)

MAX_GENERATION_ATTEMPTS = 10
TIE_TOLERANCE = 1e-12

Pair = tuple[int, int]


class SyntheticEnv(ABC):
    """Trajectory generator with a hidden per-step reward."""

    kind: EnvKind

    def __init__(self, horizon: int) -> None:
        self.horizon = horizon

    @property
    @abstractmethod
    def dimension(self) -> int: ...

    @abstractmethod
    def rollout(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """(n, T, d) features."""

    @abstractmethod
    def step_rewards(self, features: np.ndarray) -> np.ndarray:
        """True reward of every step; features (..., d) -> (...)."""

    def describe(self) -> dict[str, object]:
        return {"kind": self.kind.value, "dimension": self.dimension, "horizon": self.horizon}


class LinearFeatureEnv(SyntheticEnv):
    """x_t = style + step_noise * eps_t with a per-trajectory style vector; r(x) = <w*, x>."""

    kind = EnvKind.LINEAR_FEATURE

    def __init__(self, weights: np.ndarray, horizon: int, step_noise: float = 0.5) -> None:
        super().__init__(horizon)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.step_noise = step_noise

    @classmethod
    def from_config(cls, config: EnvConfig, rng: np.random.Generator) -> LinearFeatureEnv:
        dim = config.dimension
        weights = rng.standard_normal(dim) * config.reward_scale / np.sqrt(dim)
        return cls(weights=weights, horizon=config.horizon, step_noise=config.step_noise)

    @property
    def dimension(self) -> int:
        return int(self.weights.size)

    def rollout(self, n: int, rng: np.random.Generator) -> np.ndarray:
        style = rng.standard_normal((n, 1, self.dimension))
        jitter = rng.standard_normal((n, self.horizon, self.dimension))
        return style + self.step_noise * jitter

    def step_rewards(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights

    def describe(self) -> dict[str, object]:
        return {**super().describe(), "weights": self.weights.tolist(), "step_noise": self.step_noise}


class RandomMDPEnv(SyntheticEnv):
    """Tabular MDP rolled out by a uniform random policy; features are one-hot(state) + one-hot(action)."""

    kind = EnvKind.RANDOM_MDP

    def __init__(self, transitions: np.ndarray, rewards: np.ndarray, horizon: int) -> None:
        super().__init__(horizon)
        self.transitions = np.asarray(transitions, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.n_states, self.n_actions = self.rewards.shape

    @classmethod
    def from_config(cls, config: EnvConfig, rng: np.random.Generator) -> RandomMDPEnv:
        transitions = rng.dirichlet(np.ones(config.n_states), size=(config.n_states, config.n_actions))
        rewards = rng.uniform(-1.0, 1.0, size=(config.n_states, config.n_actions)) * config.reward_scale
        return cls(transitions=transitions, rewards=rewards, horizon=config.horizon)

    @property
    def dimension(self) -> int:
        return self.n_states + self.n_actions

    def rollout(self, n: int, rng: np.random.Generator) -> np.ndarray:
        features = np.zeros((n, self.horizon, self.dimension))
        states = rng.integers(self.n_states, size=n)
        cumulative = np.cumsum(self.transitions, axis=2)
        rows = np.arange(n)
        for t in range(self.horizon):
            actions = rng.integers(self.n_actions, size=n)
            features[rows, t, states] = 1.0
            features[rows, t, self.n_states + actions] = 1.0
            draws = rng.random(n)
            states = np.minimum((cumulative[states, actions] < draws[:, np.newaxis]).sum(axis=1), self.n_states - 1)
        return features

    def step_rewards(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        states = np.argmax(features[..., : self.n_states], axis=-1)
        actions = np.argmax(features[..., self.n_states :], axis=-1)
        return self.rewards[states, actions]

    def describe(self) -> dict[str, object]:
        return {**super().describe(), "n_states": self.n_states, "n_actions": self.n_actions}


def make_env(config: EnvConfig, seed: int) -> SyntheticEnv:
    rng = rng_for(seed, "env")
    if config.kind == EnvKind.RANDOM_MDP:
        return RandomMDPEnv.from_config(config, rng)
    return LinearFeatureEnv.from_config(config, rng)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Hidden simulation record keyed by trajectory id; never handed to the learner."""

    step_rewards: np.ndarray

    @property
    def returns(self) -> np.ndarray:
        return self.step_rewards.sum(axis=1)

    def discounted_returns(self, gamma: float) -> np.ndarray:
        """Later steps weigh more: step t of T gets gamma**(T - 1 - t)."""
        horizon = self.step_rewards.shape[1]
        discounts = gamma ** np.arange(horizon - 1, -1, -1, dtype=np.float64)
        return self.step_rewards @ discounts


@dataclass(frozen=True)
class TeacherModel:
    spec: ExpertSpec

    def preference_probability(self, delta: np.ndarray) -> np.ndarray:
        """P(y = 1 | discounted return gap) under this teacher."""
        delta = np.asarray(delta, dtype=np.float64)
        beta = self.spec.beta
        if self.spec.mode == TeacherMode.STOCHASTIC:
            return expit(beta * delta)
        if beta == 0.0:
            return np.full_like(delta, 0.5)
        agree = np.where(delta > 0.0, 1.0, np.where(delta < 0.0, 0.0, 0.5))
        return agree if beta > 0.0 else 1.0 - agree

    def is_deterministic(self) -> bool:
        return self.spec.mode == TeacherMode.DETERMINISTIC and self.spec.beta != 0.0


def generate_trajectories(
    env: SyntheticEnv, n: int, rng: np.random.Generator, first_id: int = 0
) -> tuple[tuple[Trajectory, ...], GroundTruth]:
    if n < 2:
        msg = f"Need at least 2 trajectories, got {n}"
        raise ConfigurationError(msg)
    for attempt in range(1, MAX_GENERATION_ATTEMPTS + 1):
        features = env.rollout(n, rng)
        rewards = env.step_rewards(features)
        if np.var(rewards.sum(axis=1)) > TIE_TOLERANCE:
            trajectories = tuple(Trajectory(id=first_id + index, steps=features[index]) for index in range(n))
            return trajectories, GroundTruth(step_rewards=rewards)
        log.warning("simulate.degenerate_returns", attempt=attempt, n=n)
    msg = f"Trajectory returns had zero variance after {MAX_GENERATION_ATTEMPTS} attempts"
    raise DataError(msg)


def _sample_distinct_pairs(n_traj: int, count: int, rng: np.random.Generator, excluded: set[Pair]) -> list[Pair]:
    """`count` distinct unordered pairs (stored as i < j) not in `excluded`."""
    total = n_traj * (n_traj - 1) // 2
    if count > total - len(excluded):
        msg = f"Requested {count} pairs but only {total - len(excluded)} unused pairs exist among {n_traj} trajectories"
        raise ConfigurationError(msg)
    upper_i, upper_j = np.triu_indices(n_traj, k=1)
    if excluded:
        keep = np.array([(int(a), int(b)) not in excluded for a, b in zip(upper_i, upper_j)], dtype=bool)
        upper_i, upper_j = upper_i[keep], upper_j[keep]
    chosen = rng.choice(upper_i.size, size=count, replace=False)
    return [(int(upper_i[index]), int(upper_j[index])) for index in chosen]


def _orient(pairs: list[Pair], rng: np.random.Generator) -> list[Pair]:
    flips = rng.random(len(pairs)) < 0.5
    return [(j, i) if flip else (i, j) for (i, j), flip in zip(pairs, flips)]


def unordered(pair: Pair) -> Pair:
    i, j = pair
    return (i, j) if i < j else (j, i)


def assign_pairs(
    n_traj: int,
    n_experts: int,
    pairs_per_expert: int,
    disjoint: bool,
    rng: np.random.Generator,
    excluded: Optional[set[Pair]] = None,
) -> list[list[Pair]]:
    """Per-expert ordered pair lists; with `disjoint` no unordered pair is shared between experts."""
    excluded = set(excluded or ())
    if disjoint:
        pool = _orient(_sample_distinct_pairs(n_traj, n_experts * pairs_per_expert, rng, excluded), rng)
        return [pool[k * pairs_per_expert : (k + 1) * pairs_per_expert] for k in range(n_experts)]
    # expert k's pairs depend only on the experts before it
    return [_orient(_sample_distinct_pairs(n_traj, pairs_per_expert, rng, excluded), rng) for _ in range(n_experts)]


def label_pairs(
    teacher: TeacherModel,
    pairs: Sequence[Pair],
    truth: GroundTruth,
    rng: np.random.Generator,
    expert: int = 0,
) -> list[PreferenceTriple]:
    """Draw labels from the teacher; an exact tie under a deterministic teacher gets a fair coin."""
    if not pairs:
        return []
    first = np.array([i for i, _ in pairs], dtype=np.int64)
    second = np.array([j for _, j in pairs], dtype=np.int64)
    discounted = truth.discounted_returns(teacher.spec.gamma)
    probability = teacher.preference_probability(discounted[first] - discounted[second])
    labels = (rng.random(len(pairs)) < probability).astype(int)
    return [PreferenceTriple(i=int(i), j=int(j), y=int(y), expert=expert) for i, j, y in zip(first, second, labels)]


def _replace_ties(
    chunks: list[list[Pair]],
    teachers: Sequence[TeacherModel],
    truth: GroundTruth,
    disjoint: bool,
    n_traj: int,
    rng: np.random.Generator,
) -> list[list[Pair]]:
    """Swap pairs with a zero discounted gap out of deterministic teachers' lists."""
    used = {unordered(pair) for chunk in chunks for pair in chunk}
    result = []
    for chunk, teacher in zip(chunks, teachers):
        if not teacher.is_deterministic():
            result.append(chunk)
            continue
        discounted = truth.discounted_returns(teacher.spec.gamma)
        scale = max(1.0, float(np.max(np.abs(discounted))))
        kept = [pair for pair in chunk if abs(discounted[pair[0]] - discounted[pair[1]]) > TIE_TOLERANCE * scale]
        own = {unordered(pair) for pair in kept}
        while len(kept) < len(chunk):
            blocked = used if disjoint else own
            (candidate,) = _orient(_sample_distinct_pairs(n_traj, 1, rng, blocked), rng)
            used.add(unordered(candidate))
            own.add(unordered(candidate))
            if abs(discounted[candidate[0]] - discounted[candidate[1]]) > TIE_TOLERANCE * scale:
                kept.append(candidate)
        result.append(kept)
    return result


@dataclass(frozen=True, eq=False)
class SimulationResult:
    dataset: PreferenceDataset
    holdout: PreferenceDataset
    truth: GroundTruth
    heldout_trajectories: tuple[Trajectory, ...]
    heldout_truth: GroundTruth
    env: SyntheticEnv
    experts: tuple[ExpertSpec, ...]
    reliable: tuple[int, ...] = field(default=())


def simulate(config: RunConfig) -> SimulationResult:
    """Trajectories, K expert datasets over (optionally disjoint) pairs, and the reserved evaluation data."""
    seed = config.seed
    env = make_env(config.env, seed)
    trajectories, truth = generate_trajectories(env, config.env.n_trajectories, rng_for(seed, "trajectories"))
    n_traj = len(trajectories)
    teachers = [TeacherModel(spec=spec) for spec in config.experts]

    chunks = assign_pairs(
        n_traj=n_traj,
        n_experts=len(teachers),
        pairs_per_expert=config.pairs_per_expert,
        disjoint=config.disjoint_pairs,
        rng=rng_for(seed, "pairs"),
    )
    chunks = _replace_ties(chunks, teachers, truth, config.disjoint_pairs, n_traj, rng_for(seed, "ties"))

    train_triples: list[PreferenceTriple] = []
    holdout_triples: list[PreferenceTriple] = []
    reliable = tuple(k for k, spec in enumerate(config.experts) if spec.beta > 0.0)
    for k, (teacher, chunk) in enumerate(zip(teachers, chunks)):
        labels_rng = rng_for(seed, "labels", k)
        triples = label_pairs(teacher, chunk, truth, labels_rng, expert=k)
        n_reserved = int(np.floor(config.holdout_fraction * len(triples))) if k in reliable else 0
        # the reserve is drawn from the same stream after labelling
        reserved: set[int] = set()
        if n_reserved:
            reserved = set(labels_rng.choice(len(triples), size=n_reserved, replace=False).tolist())
        for index, triple in enumerate(triples):
            if index in reserved:
                holdout_triples.append(PreferenceTriple(i=triple.i, j=triple.j, y=triple.y, expert=0))
            else:
                train_triples.append(triple)
        log.debug("simulate.expert_labelled", expert=k, beta=teacher.spec.beta, pairs=len(triples), reserved=n_reserved)

    holdout_triples.extend(_oracle_triples(config, truth, chunks, n_traj))

    dataset = check_dataset(
        PreferenceDataset(trajectories=trajectories, triples=tuple(train_triples), n_experts=len(teachers))
    )
    holdout = PreferenceDataset(trajectories=trajectories, triples=tuple(holdout_triples), n_experts=1)
    heldout, heldout_truth = generate_trajectories(
        env, config.env.n_holdout_trajectories, rng_for(seed, "heldout_trajectories")
    )
    log.info(
        "simulate.done",
        trajectories=n_traj,
        triples=len(train_triples),
        holdout=len(holdout_triples),
        experts=len(teachers),
    )
    return SimulationResult(
        dataset=dataset,
        holdout=holdout,
        truth=truth,
        heldout_trajectories=heldout,
        heldout_truth=heldout_truth,
        env=env,
        experts=tuple(config.experts),
        reliable=reliable,
    )


def _oracle_triples(
    config: RunConfig, truth: GroundTruth, chunks: list[list[Pair]], n_traj: int
) -> list[PreferenceTriple]:
    """Pairs labelled by the undiscounted true return, preferring pairs no expert saw."""
    if config.holdout_pairs == 0:
        return []
    rng = rng_for(config.seed, "holdout")
    used = {unordered(pair) for chunk in chunks for pair in chunk}
    total = n_traj * (n_traj - 1) // 2
    excluded = used if total - len(used) >= config.holdout_pairs else set()
    count = min(config.holdout_pairs, total - len(excluded))
    pairs = _orient(_sample_distinct_pairs(n_traj, count, rng, excluded), rng)
    returns = truth.returns
    oracle = TeacherModel(spec=ExpertSpec(beta=1.0, gamma=1.0, mode=TeacherMode.DETERMINISTIC))
    pairs = [pair for pair in pairs if abs(returns[pair[0]] - returns[pair[1]]) > TIE_TOLERANCE]
    return label_pairs(oracle, pairs, truth, rng, expert=0)
