from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

from trustpref.exceptions import DataError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence


def _frozen_array(values: Iterable[float] | np.ndarray, ndim: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    if array.ndim != ndim:
        msg = f"{name} must be {ndim}-dimensional, got shape {array.shape}"
        raise DataError(msg)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Trajectory:
    """T x d matrix of per-step features (state features concatenated with action features)."""

    id: int
    steps: np.ndarray

    def __post_init__(self) -> None:
        steps = _frozen_array(self.steps, ndim=2, name="steps")
        if steps.shape[0] < 1 or steps.shape[1] < 1:
            msg = f"Trajectory {self.id} needs at least one step of dimension >= 1, got shape {steps.shape}"
            raise DataError(msg)
        object.__setattr__(self, "steps", steps)

    @property
    def horizon(self) -> int:
        return int(self.steps.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.steps.shape[1])


@dataclass(frozen=True)
class PreferenceTriple:
    """Label y=1 means the expert prefers trajectory i over trajectory j."""

    i: int
    j: int
    y: int
    expert: int


@dataclass(frozen=True, eq=False)
class TrustState:
    alpha: np.ndarray
    alpha_bounded: np.ndarray
    alpha_normalized: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        for name in ("alpha", "alpha_bounded", "alpha_normalized", "weights"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), ndim=1, name=name))
        sizes = {self.alpha.size, self.alpha_bounded.size, self.alpha_normalized.size, self.weights.size}
        if len(sizes) != 1:
            msg = "All trust vectors must have one entry per expert"
            raise DataError(msg)

    @property
    def n_experts(self) -> int:
        return int(self.alpha.size)


@dataclass(frozen=True)
class ValidationIssue:
    kind: str
    message: str
    triple_index: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> list[str]:
        return [issue.kind for issue in self.issues]

    def __len__(self) -> int:
        return len(self.issues)


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Trajectories plus the pooled preference triples of K experts."""

    trajectories: tuple[Trajectory, ...]
    triples: tuple[PreferenceTriple, ...]
    n_experts: int
    metadata: dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "triples", tuple(self.triples))

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon if self.trajectories else 0

    @property
    def dimension(self) -> int:
        return self.trajectories[0].dimension if self.trajectories else 0

    @cached_property
    def features(self) -> np.ndarray:
        """Dense (n, T, d) tensor indexed by trajectory id."""
        tensor = np.stack([trajectory.steps for trajectory in self.trajectories])
        tensor.setflags(write=False)
        return tensor

    @cached_property
    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Columns (i, j, y, expert) of the triples as integer arrays."""
        if not self.triples:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty, empty
        table = np.array([(t.i, t.j, t.y, t.expert) for t in self.triples], dtype=np.int64)
        columns = tuple(np.ascontiguousarray(table[:, col]) for col in range(4))
        for column in columns:
            column.setflags(write=False)
        return columns  # type: ignore[return-value]

    def by_expert(self) -> dict[int, tuple[PreferenceTriple, ...]]:
        """Partition of the triples by expert id; every expert in [0, K) has an entry."""
        groups: dict[int, list[PreferenceTriple]] = {k: [] for k in range(self.n_experts)}
        for triple in self.triples:
            groups.setdefault(triple.expert, []).append(triple)
        return {k: tuple(items) for k, items in groups.items()}

    def select(self, indices: Sequence[int]) -> PreferenceDataset:
        return PreferenceDataset(
            trajectories=self.trajectories,
            triples=tuple(self.triples[index] for index in indices),
            n_experts=self.n_experts,
            metadata=dict(self.metadata),
        )


def validate_dataset(
    triples: Sequence[PreferenceTriple],
    trajectories: Sequence[Trajectory],
    n_experts: int,
) -> ValidationReport:
    """List every violated dataset invariant; an empty report means the dataset is well formed."""
    issues: list[ValidationIssue] = []
    n_traj = len(trajectories)

    if n_experts < 1:
        issues.append(ValidationIssue(kind="bad-expert-count", message=f"K must be >= 1, got {n_experts}"))

    for position, trajectory in enumerate(trajectories):
        if trajectory.id != position:
            issues.append(
                ValidationIssue(
                    kind="bad-trajectory-id",
                    message=f"trajectory at position {position} has id {trajectory.id}",
                )
            )
    if trajectories:
        shape = trajectories[0].steps.shape
        for trajectory in trajectories[1:]:
            if trajectory.steps.shape != shape:
                issues.append(
                    ValidationIssue(
                        kind="shape-mismatch",
                        message=f"trajectory {trajectory.id} has shape {trajectory.steps.shape}, expected {shape}",
                    )
                )

    for index, triple in enumerate(triples):
        for name in ("i", "j"):
            value = getattr(triple, name)
            if not 0 <= value < n_traj:
                issues.append(
                    ValidationIssue(
                        kind="trajectory-out-of-range",
                        message=f"triple {index}: {name}={value} outside [0, {n_traj})",
                        triple_index=index,
                    )
                )
        if triple.i == triple.j:
            issues.append(
                ValidationIssue(
                    kind="self-comparison",
                    message=f"triple {index} compares trajectory {triple.i} with itself",
                    triple_index=index,
                )
            )
        if triple.y not in {0, 1}:
            issues.append(
                ValidationIssue(kind="bad-label", message=f"triple {index}: label {triple.y}", triple_index=index)
            )
        if not 0 <= triple.expert < max(n_experts, 0):
            issues.append(
                ValidationIssue(
                    kind="expert-out-of-range",
                    message=f"triple {index}: expert {triple.expert} outside [0, {n_experts})",
                    triple_index=index,
                )
            )

    seen = {triple.expert for triple in triples}
    for expert in range(max(n_experts, 0)):
        if expert not in seen:
            issues.append(ValidationIssue(kind="empty-expert", message=f"expert {expert} has no triples"))

    return ValidationReport(issues=tuple(issues))


def check_dataset(dataset: PreferenceDataset) -> PreferenceDataset:
    """Raise DataError unless the dataset is well formed."""
    report = validate_dataset(dataset.triples, dataset.trajectories, dataset.n_experts)
    if not report.ok:
        details = "; ".join(issue.message for issue in report.issues[:5])
        msg = f"Dataset has {len(report)} problem(s): {details}"
        raise DataError(msg)
    return dataset


# Named random streams; every random draw in the package comes from one of these.
SEED_STREAMS = {
    "env": 0,
    "trajectories": 1,
    "pairs": 2,
    "labels": 3,
    "holdout": 4,
    "heldout_trajectories": 5,
    "model": 6,
    "minibatch": 7,
    "ties": 8,
}


def rng_for(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Independent generator for (seed, stream, index...), stable across releases and call order."""
    key = (SEED_STREAMS[stream], *index)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
