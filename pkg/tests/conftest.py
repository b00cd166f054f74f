from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest
import yaml

from trustpref import EnvConfig, ExpertSpec, ModelConfig, RunConfig, TrainConfig
from trustpref.core import PreferenceDataset, PreferenceTriple, Trajectory


@pytest.fixture
def small_config() -> Callable[..., RunConfig]:
    """Factory for a run that simulates and trains in well under a second."""

    def _build(**updates: Any) -> RunConfig:
        config = RunConfig(
            name="small",
            seed=0,
            env=EnvConfig(feature_dim=6, horizon=5, n_trajectories=40, n_holdout_trajectories=10),
            experts=[ExpertSpec(beta=1.0), ExpertSpec(beta=1.0), ExpertSpec(beta=1.0), ExpertSpec(beta=-1.0)],
            pairs_per_expert=30,
            holdout_pairs=20,
            model=ModelConfig(hidden_sizes=[8]),
            train=TrainConfig(iterations=20, batch_size=16, log_interval=5, trust_warmup=5),
        )
        return config.model_copy(update=updates)

    return _build


@pytest.fixture
def small_config_data() -> dict[str, Any]:
    """The same small run as a YAML-ready mapping."""
    return {
        "name": "small",
        "seed": 0,
        "env": {"feature_dim": 6, "horizon": 5, "n_trajectories": 40, "n_holdout_trajectories": 10},
        "experts": [{"beta": 1.0}, {"beta": 1.0}, {"beta": 1.0}, {"beta": -1.0}],
        "pairs_per_expert": 30,
        "holdout_pairs": 20,
        "model": {"hidden_sizes": [8]},
        "train": {"iterations": 20, "batch_size": 16, "log_interval": 5, "trust_warmup": 5},
    }


@pytest.fixture
def write_yaml(tmp_path: Path) -> Callable[[dict[str, Any], str], Path]:
    def _write(data: dict[str, Any], name: str = "config.yml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def tiny_dataset() -> PreferenceDataset:
    """Four 3-step trajectories in two dimensions compared by two experts."""
    rng = np.random.default_rng(1234)
    trajectories = tuple(Trajectory(id=index, steps=rng.standard_normal((3, 2))) for index in range(4))
    triples = (
        PreferenceTriple(i=0, j=1, y=1, expert=0),
        PreferenceTriple(i=1, j=2, y=0, expert=0),
        PreferenceTriple(i=2, j=3, y=1, expert=1),
        PreferenceTriple(i=3, j=0, y=0, expert=1),
    )
    return PreferenceDataset(trajectories=trajectories, triples=triples, n_experts=2)
