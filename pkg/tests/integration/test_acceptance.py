"""Desk-scale statistical checks of the trust dynamics; run with ``invoke tests-acceptance``."""

from functools import lru_cache
from statistics import median

import numpy as np
import pytest

from trustpref import (
    ArchitectureKind,
    EnvConfig,
    ExpertSpec,
    ModelConfig,
    RunConfig,
    SweepSpec,
    TeacherMode,
    TrainConfig,
    TrainMode,
)
from trustpref.analysis import check_expert_connectedness, check_trajectory_connectedness, recovery_metrics
from trustpref.core import PreferenceDataset
from trustpref.reward_model import trajectory_returns
from trustpref.runner import run_sweep
from trustpref.simulation import simulate
from trustpref.trainer import train
from trustpref.trust_loss import make_trust_state

pytestmark = pytest.mark.acceptance

SEEDS = tuple(range(10))
ADVERSARIAL = (1.0, 1.0, 1.0, -1.0)
NOISY = (1.0, 1.0, 1.0, 0.0)

DESK_ENV = EnvConfig(feature_dim=8, horizon=10, n_trajectories=120, n_holdout_trajectories=40)
DESK_MODEL = ModelConfig(hidden_sizes=[32, 32])
DESK_TRAIN = TrainConfig(reward_learning_rate=0.01, trust_warmup=300, iterations=2000, batch_size=64, log_interval=500)


def desk_config(
    seed: int, betas=ADVERSARIAL, mode: TrainMode = TrainMode.TRUST, holdout_fraction: float = 0.1
) -> RunConfig:
    return RunConfig(
        name="desk",
        seed=seed,
        env=DESK_ENV,
        experts=[ExpertSpec(beta=beta) for beta in betas],
        pairs_per_expert=300,
        holdout_fraction=holdout_fraction,
        holdout_pairs=300,
        model=DESK_MODEL,
        train=DESK_TRAIN.model_copy(update={"mode": mode}),
    )


@lru_cache(maxsize=None)
def desk_run(
    seed: int, betas: tuple[float, ...], mode: TrainMode, holdout_fraction: float = 0.1
) -> tuple[np.ndarray, float]:
    """Final normalized trust and holdout accuracy of one desk-scale run."""
    config = desk_config(seed, betas, mode, holdout_fraction)
    simulated = simulate(config)
    result = train(config, simulated.dataset, holdout=simulated.holdout)
    return result.trust.alpha_normalized.copy(), float(result.metrics[-1]["holdout_accuracy"])


def test_adversarial_trust_separates():
    finals = np.array([desk_run(seed, ADVERSARIAL, TrainMode.TRUST)[0] for seed in SEEDS])
    medians = np.median(finals, axis=0)
    assert medians[3] < -0.5
    assert np.all(medians[:3] > 0.5)


def test_noisy_trust_is_suppressed():
    finals = np.abs(np.array([desk_run(seed, NOISY, TrainMode.TRUST)[0] for seed in SEEDS]))
    medians = np.median(finals, axis=0)
    assert int(np.argmin(medians)) == 3
    assert medians[3] < 0.3


# reliable experts give up 40% of their pairs to the holdout, so the adversary holds 300 of 840 training labels
RECOVERY_HOLDOUT_FRACTION = 0.4


def test_trust_recovers_adversarial_signal():
    trusted = median(desk_run(seed, ADVERSARIAL, TrainMode.TRUST, RECOVERY_HOLDOUT_FRACTION)[1] for seed in SEEDS)
    uniform = median(
        desk_run(seed, ADVERSARIAL, TrainMode.UNIFORM_BASELINE, RECOVERY_HOLDOUT_FRACTION)[1] for seed in SEEDS
    )
    assert trusted >= 0.9
    assert trusted - uniform >= 0.10


def identifiability_config(seed: int) -> RunConfig:
    return RunConfig(
        name="identifiability",
        seed=seed,
        env=DESK_ENV.model_copy(update={"reward_scale": 0.3}),
        experts=[ExpertSpec(beta=1.0, mode=TeacherMode.STOCHASTIC) for _ in range(3)],
        pairs_per_expert=1000,
        disjoint_pairs=False,
        holdout_pairs=0,
        model=ModelConfig(architecture=ArchitectureKind.LINEAR, r_max=None),
        train=TrainConfig(
            reward_learning_rate=0.01, trust_warmup=100, iterations=2000, batch_size=128, log_interval=500
        ),
    )


@pytest.mark.parametrize("seed", range(5))
def test_linear_reward_recovered_up_to_affine_map(seed):
    config = identifiability_config(seed)
    simulated = simulate(config)
    dataset: PreferenceDataset = simulated.dataset
    # both connectedness assumptions hold for overlapping pairs and positive trust
    unit = make_trust_state(np.ones(3), config.trust)
    assert check_trajectory_connectedness(dataset, unit).connected
    assert check_expert_connectedness(dataset, simulated.truth.returns, unit).connected

    result = train(config, dataset)
    heldout = PreferenceDataset(trajectories=simulated.heldout_trajectories, triples=(), n_experts=1)
    metrics = recovery_metrics(trajectory_returns(result.model, heldout.features), simulated.heldout_truth.returns)
    assert metrics["r2"] >= 0.99
    assert metrics["kendall_tau"] >= 0.9
    assert metrics["a"] > 0.0


def test_budget_sweep(tmp_path):
    spec = SweepSpec(
        name="budgets",
        base=RunConfig(seed=0, env=DESK_ENV, model=DESK_MODEL, holdout_pairs=300, train=DESK_TRAIN),
        budgets=[500, 1000, 5000],
        mixtures=[[1.0, 1.0, 1.0, 1.0], list(ADVERSARIAL)],
        seeds=list(SEEDS),
        workers=4,
    )
    result = run_sweep(spec, out_root=tmp_path)
    accuracy = {(row["mixture"], row["budget"]): row["median_holdout_accuracy"] for row in result.rows}

    assert accuracy[("1 1 1 1", 1000)] >= 0.95 * accuracy[("1 1 1 1", 5000)]
    adversarial = [accuracy[("1 1 1 -1", budget)] for budget in (500, 1000, 5000)]
    assert all(later >= earlier - 0.02 for earlier, later in zip(adversarial, adversarial[1:]))
