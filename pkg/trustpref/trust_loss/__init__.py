from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit

from trustpref import TrustConfig
from trustpref.core import TrustState
from trustpref.exceptions import DataError

if TYPE_CHECKING:
    from collections.abc import Sequence

EPS_NORM = 1e-8


def bound_trust(alpha: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(alpha, dtype=np.float64))


def max_magnitude(alpha_bounded: np.ndarray) -> tuple[float, int]:
    """Largest |alpha_bounded| and its index; ties go to the lowest index."""
    magnitudes = np.abs(np.asarray(alpha_bounded, dtype=np.float64))
    index = int(np.argmax(magnitudes))
    return float(magnitudes[index]), index


def normalization_divisor(alpha_bounded: np.ndarray, eps_norm: float = EPS_NORM) -> float:
    peak, _ = max_magnitude(alpha_bounded)
    return peak if peak > eps_norm else 1.0


def normalize_trust(alpha_bounded: np.ndarray, eps_norm: float = EPS_NORM) -> np.ndarray:
    alpha_bounded = np.asarray(alpha_bounded, dtype=np.float64)
    return alpha_bounded / normalization_divisor(alpha_bounded, eps_norm)


def expert_weights(alpha_bounded: np.ndarray, eps_norm: float = EPS_NORM, scaled: bool = True) -> np.ndarray:
    """w_k = K |a_k| / sum |a_i| (or without the K factor); uniform when the total trust mass vanishes."""
    magnitudes = np.abs(np.asarray(alpha_bounded, dtype=np.float64))
    n_experts = magnitudes.size
    scale = float(n_experts) if scaled else 1.0
    total = magnitudes.sum()
    if total <= eps_norm:
        return np.full(n_experts, scale / n_experts)
    return scale * magnitudes / total


def make_trust_state(alpha: Sequence[float] | np.ndarray, options: TrustConfig) -> TrustState:
    """Run the bound -> normalize -> weight stack, each stage switchable."""
    alpha = np.asarray(alpha, dtype=np.float64)
    bounded = bound_trust(alpha) if options.bound else alpha.copy()
    normalized = normalize_trust(bounded, options.eps_norm) if options.normalize else bounded.copy()
    if options.weighting:
        weights = expert_weights(bounded, options.eps_norm, scaled=options.scaled_weights)
    else:
        weights = np.ones_like(alpha)
    return TrustState(alpha=alpha, alpha_bounded=bounded, alpha_normalized=normalized, weights=weights)


def initial_trust(n_experts: int, options: TrustConfig) -> TrustState:
    return make_trust_state(np.full(n_experts, options.init_alpha), options)


@dataclass(frozen=True, eq=False)
class BatchSlice:
    """Minibatch view for the loss: reward differences, labels and expert ids plus the trust state."""

    delta_r: np.ndarray
    y: np.ndarray
    expert: np.ndarray
    trust: TrustState
    options: TrustConfig

    def __post_init__(self) -> None:
        delta_r = np.asarray(self.delta_r, dtype=np.float64).reshape(-1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        expert = np.asarray(self.expert, dtype=np.int64).reshape(-1)
        if not delta_r.size == y.size == expert.size:
            msg = "delta_r, y and expert must have one entry per triple"
            raise DataError(msg)
        if expert.size and (expert.min() < 0 or expert.max() >= self.trust.n_experts):
            msg = f"Expert ids must lie in [0, {self.trust.n_experts})"
            raise DataError(msg)
        object.__setattr__(self, "delta_r", delta_r)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "expert", expert)

    @property
    def size(self) -> int:
        return int(self.delta_r.size)

    @property
    def logits(self) -> np.ndarray:
        return self.trust.alpha_normalized[self.expert] * self.delta_r


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -softplus(-np.asarray(z, dtype=np.float64))


def pair_nll(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """-[y log s(z) + (1-y) log(1 - s(z))] evaluated without forming s(z)."""
    return y * softplus(-z) + (1.0 - y) * softplus(z)


def per_expert_nll(batch: BatchSlice) -> np.ndarray:
    """Unweighted NLL summed per expert, in fixed triple order."""
    terms = pair_nll(batch.logits, batch.y)
    return np.bincount(batch.expert, weights=terms, minlength=batch.trust.n_experts)


def weighted_nll(batch: BatchSlice) -> float:
    terms = batch.trust.weights[batch.expert] * pair_nll(batch.logits, batch.y)
    return float(np.sum(terms))


def expert_gradient_contributions(batch: BatchSlice) -> np.ndarray:
    """Per-expert sum of w_k (s(a_k dR) - y) dR, i.e. dL/d(normalized alpha_k)."""
    residual = expit(batch.logits) - batch.y
    terms = batch.trust.weights[batch.expert] * residual * batch.delta_r
    return np.bincount(batch.expert, weights=terms, minlength=batch.trust.n_experts)


def loss_gradients(batch: BatchSlice) -> tuple[np.ndarray, np.ndarray]:
    """(dL/d delta_r per triple, dL/d alpha per expert).

    The normalization divisor is a constant. The weights are constants unless
    ``options.differentiate_weights`` is set.
    """
    trust = batch.trust
    options = batch.options
    residual = expit(batch.logits) - batch.y
    grad_delta = trust.weights[batch.expert] * trust.alpha_normalized[batch.expert] * residual

    grad_normalized = expert_gradient_contributions(batch)
    divisor = normalization_divisor(trust.alpha_bounded, options.eps_norm) if options.normalize else 1.0
    grad_bounded = grad_normalized / divisor

    if options.weighting and options.differentiate_weights:
        grad_bounded = grad_bounded + _weight_path_gradient(batch)

    if options.bound:
        grad_alpha = grad_bounded * (1.0 - trust.alpha_bounded**2)
    else:
        grad_alpha = grad_bounded
    return grad_delta, grad_alpha


def _weight_path_gradient(batch: BatchSlice) -> np.ndarray:
    """d/d(bounded alpha) of sum_j w_j l_j with w_j = c |a_j| / S."""
    options = batch.options
    bounded = batch.trust.alpha_bounded
    magnitudes = np.abs(bounded)
    total = magnitudes.sum()
    if total <= options.eps_norm:
        return np.zeros_like(bounded)
    scale = float(bounded.size) if options.scaled_weights else 1.0
    losses = per_expert_nll(batch)
    mixed = float(np.dot(magnitudes, losses)) / total
    return np.sign(bounded) * scale / total * (losses - mixed)
