from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any, NamedTuple, Optional

import numpy as np
import structlog
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import expit

from trustpref.exceptions import DataError, RejectedInputError
from trustpref.reward_model import trajectory_returns
from trustpref.trust_loss import make_trust_state

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from trustpref import TrustConfig
    from trustpref.core import PreferenceDataset, TrustState
    from trustpref.reward_model import RewardModel

log = structlog.get_logger(__name__)

ZERO_TOL = 1e-3
EQUAL_RETURN_RTOL = 1e-9
NOISE_BAND = 0.3


class UnionFind:
    """Disjoint sets over 0..n-1 with path compression and union by rank."""

    def __init__(self, size: int) -> None:
        self.parents = list(range(size))
        self.rank = [0] * size
        self.num_components = size

    def find(self, x: int) -> int:
        root = x
        while root != self.parents[root]:
            root = self.parents[root]
        while x != root:
            self.parents[x], x = root, self.parents[x]
        return root

    def union(self, x: int, y: int) -> None:
        x, y = self.find(x), self.find(y)
        if x == y:
            return
        if self.rank[x] < self.rank[y]:
            x, y = y, x
        self.parents[y] = x
        if self.rank[x] == self.rank[y]:
            self.rank[x] += 1
        self.num_components -= 1


class Connectivity(NamedTuple):
    connected: bool
    components: int


def trusted_experts(trust: TrustState, zero_tol: float = ZERO_TOL) -> list[int]:
    return [k for k, value in enumerate(trust.alpha_bounded) if abs(value) > zero_tol]


def check_trajectory_connectedness(
    dataset: PreferenceDataset, trust: TrustState, zero_tol: float = ZERO_TOL
) -> Connectivity:
    """Graph over all trajectories, one edge per pair compared by an expert with |bounded trust| above zero_tol."""
    active = set(trusted_experts(trust, zero_tol))
    forest = UnionFind(dataset.n_trajectories)
    for triple in dataset.triples:
        if triple.expert in active:
            forest.union(triple.i, triple.j)
    return Connectivity(connected=forest.num_components == 1, components=forest.num_components)


def check_expert_connectedness(
    dataset: PreferenceDataset, returns: np.ndarray, trust: TrustState, zero_tol: float = ZERO_TOL
) -> Connectivity:
    """Graph over trusted experts; two experts are linked when they compared the same pair with unequal returns."""
    returns = np.asarray(returns, dtype=np.float64)
    active = trusted_experts(trust, zero_tol)
    position = {expert: index for index, expert in enumerate(active)}
    forest = UnionFind(len(active))
    first_seen: dict[tuple[int, int], int] = {}
    for triple in dataset.triples:
        if triple.expert not in position:
            continue
        if math.isclose(returns[triple.i], returns[triple.j], rel_tol=EQUAL_RETURN_RTOL, abs_tol=0.0):
            continue
        key = (min(triple.i, triple.j), max(triple.i, triple.j))
        owner = first_seen.setdefault(key, triple.expert)
        if owner != triple.expert:
            forest.union(position[owner], position[triple.expert])
    return Connectivity(connected=forest.num_components == 1, components=forest.num_components)


@dataclass(frozen=True)
class AffineFit:
    """true ~ a * learned + b."""

    a: float
    b: float
    r2: float
    sign_consistency: int


def _check_vector_pair(learned: np.ndarray, true: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    learned = np.asarray(learned, dtype=np.float64).reshape(-1)
    true = np.asarray(true, dtype=np.float64).reshape(-1)
    if learned.size != true.size:
        msg = f"Got {learned.size} learned and {true.size} true returns"
        raise RejectedInputError(msg)
    if learned.size < 2:
        msg = "Need at least two returns to compare"
        raise RejectedInputError(msg)
    if np.ptp(true) == 0.0 or np.ptp(learned) == 0.0:
        msg = "Cannot fit an affine map to constant returns"
        raise RejectedInputError(msg)
    return learned, true


def affine_fit(learned_returns: np.ndarray, true_returns: np.ndarray) -> AffineFit:
    learned, true = _check_vector_pair(learned_returns, true_returns)
    design = np.column_stack([learned, np.ones_like(learned)])
    (slope, intercept), *_ = np.linalg.lstsq(design, true, rcond=None)
    residual = true - (slope * learned + intercept)
    total = np.sum((true - true.mean()) ** 2)
    r2 = float(np.clip(1.0 - np.sum(residual**2) / total, 0.0, 1.0))
    return AffineFit(a=float(slope), b=float(intercept), r2=r2, sign_consistency=1 if slope >= 0.0 else -1)


def recovery_metrics(learned_returns: np.ndarray, true_returns: np.ndarray) -> dict[str, float]:
    """Affine fit plus Kendall-tau and Pearson correlation of learned against true returns."""
    learned, true = _check_vector_pair(learned_returns, true_returns)
    fit = affine_fit(learned, true)
    tau = stats.kendalltau(learned, true)
    pearson = stats.pearsonr(learned, true)
    return {
        "kendall_tau": float(tau.statistic),
        "pearson": float(pearson.statistic),
        **asdict(fit),
    }


def _probabilities(returns: np.ndarray, alpha: np.ndarray, dataset: PreferenceDataset) -> np.ndarray:
    first, second, _, experts = dataset.arrays
    return expit(alpha[experts] * (returns[first] - returns[second]))


def likelihood_invariance_check(
    model: RewardModel,
    trust: TrustState,
    dataset: PreferenceDataset,
    a: float,
    b: float,
    returns: Optional[np.ndarray] = None,
) -> float:
    """Max |P(y=1)| change when (R, alpha) becomes (aR + b, alpha / a) at the return level."""
    if a == 0.0:
        msg = "The affine scale a must be nonzero"
        raise RejectedInputError(msg)
    if returns is None:
        returns = trajectory_returns(model, dataset.features)
    alpha = trust.alpha_normalized
    before = _probabilities(returns, alpha, dataset)
    after = _probabilities(a * returns + b, alpha / a, dataset)
    return float(np.max(np.abs(before - after))) if before.size else 0.0


def stack_invariance_check(
    returns: np.ndarray,
    alpha: np.ndarray,
    dataset: PreferenceDataset,
    options: TrustConfig,
    a: float,
    b: float = 0.0,
    compensate: bool = True,
) -> float:
    """Like ``likelihood_invariance_check`` but with raw trust pushed through the bound/normalize stack.

    With ``compensate`` the raw trust becomes alpha / a; otherwise it is left alone.
    """
    if a == 0.0:
        msg = "The affine scale a must be nonzero"
        raise RejectedInputError(msg)
    returns = np.asarray(returns, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    shifted_alpha = alpha / a if compensate else alpha
    before = _probabilities(returns, make_trust_state(alpha, options).alpha_normalized, dataset)
    after = _probabilities(a * returns + b, make_trust_state(shifted_alpha, options).alpha_normalized, dataset)
    return float(np.max(np.abs(before - after))) if before.size else 0.0


@dataclass(frozen=True)
class ExpertTrustSummary:
    expert: int
    final: float
    sign: int
    stable_sign_iteration: int
    area_abs: float


def trust_series(metrics: Sequence[Mapping[str, Any]]) -> tuple[np.ndarray, np.ndarray]:
    """(iterations, normalized trust matrix of shape (rows, K)) from metrics rows."""
    if not metrics:
        msg = "Empty metrics log"
        raise DataError(msg)
    n_experts = sum(1 for key in metrics[0] if key.startswith("alpha_norm_"))
    iterations = np.array([int(row["iteration"]) for row in metrics], dtype=np.int64)
    values = np.array([[float(row[f"alpha_norm_{k}"]) for k in range(n_experts)] for row in metrics])
    return iterations, values.reshape(len(metrics), n_experts)


def trust_summary(metrics: Sequence[Mapping[str, Any]]) -> list[ExpertTrustSummary]:
    iterations, values = trust_series(metrics)
    summaries = []
    for k in range(values.shape[1]):
        series = values[:, k]
        signs = np.sign(series)
        final_sign = int(signs[-1])
        changed = np.flatnonzero(signs != final_sign)
        stable_from = int(iterations[changed[-1] + 1]) if changed.size else int(iterations[0])
        area = float(trapezoid(np.abs(series), iterations)) if series.size > 1 else 0.0
        summaries.append(
            ExpertTrustSummary(
                expert=k, final=float(series[-1]), sign=final_sign, stable_sign_iteration=stable_from, area_abs=area
            )
        )
    return summaries


def expert_agreement(dataset: PreferenceDataset, returns: np.ndarray) -> list[Optional[float]]:
    """Per expert, the share of labels that agree with the ordering of ``returns``; tied pairs are skipped."""
    returns = np.asarray(returns, dtype=np.float64)
    first, second, labels, experts = dataset.arrays
    delta = returns[first] - returns[second]
    decided = delta != 0.0
    agree = ((delta > 0.0) == (labels == 1)) & decided
    hits = np.bincount(experts, weights=agree.astype(np.float64), minlength=dataset.n_experts)
    counts = np.bincount(experts, weights=decided.astype(np.float64), minlength=dataset.n_experts)
    return [float(hit / count) if count else None for hit, count in zip(hits, counts)]


def classify_experts(alpha_normalized: Sequence[float], noise_band: float = NOISE_BAND) -> list[str]:
    labels = []
    for value in alpha_normalized:
        if abs(value) < noise_band:
            labels.append("noisy")
        elif value > 0.0:
            labels.append("reliable")
        else:
            labels.append("adversarial")
    return labels


def teacher_types(betas: Sequence[float]) -> list[str]:
    return ["reliable" if beta > 0.0 else "adversarial" if beta < 0.0 else "noisy" for beta in betas]


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


@dataclass
class AnalysisInputs:
    """Everything ``build_report`` reads; ground-truth fields are None when the sidecar is missing."""

    dataset: PreferenceDataset
    trust: TrustState
    metrics: Sequence[Mapping[str, Any]]
    model: RewardModel
    true_returns: Optional[np.ndarray] = None
    heldout_features: Optional[np.ndarray] = None
    heldout_returns: Optional[np.ndarray] = None
    betas: Optional[list[float]] = None
    missing_truth_reason: Optional[str] = None


def build_report(inputs: AnalysisInputs, zero_tol: float = ZERO_TOL) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """JSON-ready report plus the learned-vs-true scatter rows."""
    dataset = inputs.dataset
    learned = trajectory_returns(inputs.model, dataset.features)
    summary = trust_summary(inputs.metrics)
    classes = classify_experts(inputs.trust.alpha_normalized)

    reference = inputs.true_returns if inputs.true_returns is not None else learned
    trajectory_graph = check_trajectory_connectedness(dataset, inputs.trust, zero_tol)
    expert_graph = check_expert_connectedness(dataset, reference, inputs.trust, zero_tol)

    report: dict[str, Any] = {
        "experts": dataset.n_experts,
        "trust": {
            "alpha": [float(value) for value in inputs.trust.alpha],
            "alpha_bounded": [float(value) for value in inputs.trust.alpha_bounded],
            "alpha_normalized": [float(value) for value in inputs.trust.alpha_normalized],
            "weights": [float(value) for value in inputs.trust.weights],
        },
        "trust_summary": [asdict(item) for item in summary],
        "classification": classes,
        "connectivity": {
            "zero_tol": zero_tol,
            "returns_source": "true" if inputs.true_returns is not None else "learned",
            "trajectory_graph": trajectory_graph._asdict(),
            "expert_graph": expert_graph._asdict(),
        },
        "agreement": {"learned": [_finite(value) for value in expert_agreement(dataset, learned)]},
    }

    scatter: list[dict[str, Any]] = []
    if inputs.true_returns is None:
        report["affine"] = None
        report["affine_omitted"] = inputs.missing_truth_reason or "ground truth unavailable"
        for index, value in enumerate(learned):
            scatter.append({"set": "train", "trajectory": index, "learned_return": float(value), "true_return": None})
        return report, scatter

    report["agreement"]["true"] = [_finite(value) for value in expert_agreement(dataset, inputs.true_returns)]
    affine: dict[str, Any] = {"train": _safe_recovery(learned, inputs.true_returns)}
    for index, (mine, theirs) in enumerate(zip(learned, inputs.true_returns)):
        scatter.append(
            {"set": "train", "trajectory": index, "learned_return": float(mine), "true_return": float(theirs)}
        )
    if inputs.heldout_features is not None and inputs.heldout_returns is not None:
        heldout_learned = trajectory_returns(inputs.model, inputs.heldout_features)
        affine["heldout"] = _safe_recovery(heldout_learned, inputs.heldout_returns)
        for index, (mine, theirs) in enumerate(zip(heldout_learned, inputs.heldout_returns)):
            scatter.append(
                {"set": "heldout", "trajectory": index, "learned_return": float(mine), "true_return": float(theirs)}
            )
    report["affine"] = affine
    if inputs.betas is not None:
        expected = teacher_types(inputs.betas)
        report["teacher_types"] = expected
        report["classification_matches"] = [mine == theirs for mine, theirs in zip(classes, expected)]
    return report, scatter


def _safe_recovery(learned: np.ndarray, true: np.ndarray) -> dict[str, Any]:
    try:
        metrics = recovery_metrics(learned, true)
    except RejectedInputError as exc:
        log.warning("analyze.recovery_skipped", reason=str(exc))
        return {"error": str(exc)}
    return {key: _finite(value) if isinstance(value, float) else value for key, value in metrics.items()}
