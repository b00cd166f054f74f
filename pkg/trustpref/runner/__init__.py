from __future__ import annotations

import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from statistics import median
from typing import TYPE_CHECKING, Any, Optional

import numpy as np
import structlog

from trustpref import RunConfig, SweepSpec
from trustpref.analysis import AnalysisInputs, build_report, recovery_metrics, trust_series
from trustpref.core import PreferenceDataset, check_dataset
from trustpref.core.io import dumps_trust_state, loads_trust_state, read_dataset, write_dataset
from trustpref.exceptions import DataError, NumericDivergenceError, PartialSweepFailureError, RejectedInputError
from trustpref.reward_model import dumps_checkpoint, loads_checkpoint, trajectory_returns
from trustpref.simulation import simulate
from trustpref.trainer import ProgressBar, metrics_columns, train
from trustpref.utils import config_echo, config_hash, read_csv, read_json, write_csv, write_json

if TYPE_CHECKING:
    from collections.abc import Sequence

    from trustpref.reward_model import RewardModel
    from trustpref.trainer import MetricsRow, TrainerState

log = structlog.get_logger(__name__)

DATASET_FILE = "dataset.txt"
HOLDOUT_FILE = "holdout.txt"
HELDOUT_TRAJECTORIES_FILE = "heldout_trajectories.txt"
GROUND_TRUTH_FILE = "ground_truth.json"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"
MODEL_FILE = "model.txt"
TRUST_FILE = "trust.txt"
REPORT_FILE = "report.json"
TRUST_TRAJECTORIES_FILE = "trust_trajectories.csv"
SCATTER_FILE = "returns_scatter.csv"
AGGREGATE_FILE = "aggregate.csv"

RUN_FILES = (METRICS_FILE, MANIFEST_FILE, MODEL_FILE, TRUST_FILE)
AGGREGATE_COLUMNS = [
    "mixture",
    "budget",
    "runs",
    "failures",
    "median_holdout_accuracy",
    "median_kendall_tau",
    "median_adversarial_trust",
    "median_noisy_trust",
]


def _affine_r2(model: RewardModel, features: np.ndarray, true_returns: np.ndarray) -> Optional[float]:
    try:
        return recovery_metrics(trajectory_returns(model, features), true_returns)["r2"]
    except RejectedInputError:
        return None


class Experiment:
    """Simulate, train and analyze one configured run under an output root."""

    def __init__(self, config: RunConfig, out_root: Path, show_progress: bool | None = False) -> None:
        self.config = config
        self.out_root = Path(out_root)
        self.show_progress = show_progress
        self.echo = config_echo(config)
        self.config_hash = config_hash(self.echo)

    @property
    def data_dir(self) -> Path:
        return self.out_root / self.config.name / "data"

    @property
    def run_dir(self) -> Path:
        return self.out_root / self.config.name / self.config.train.mode.value

    def simulate(self) -> Path:
        """Write the training dataset, evaluation data and hidden ground truth; returns the dataset path."""
        result = simulate(self.config)
        directory = self.data_dir
        directory.mkdir(parents=True, exist_ok=True)

        write_dataset(result.dataset, directory / DATASET_FILE)
        write_dataset(result.holdout, directory / HOLDOUT_FILE)
        heldout = PreferenceDataset(trajectories=result.heldout_trajectories, triples=(), n_experts=1)
        write_dataset(heldout, directory / HELDOUT_TRAJECTORIES_FILE)
        write_json(
            directory / GROUND_TRUTH_FILE,
            {
                "returns": result.truth.returns.tolist(),
                "heldout_returns": result.heldout_truth.returns.tolist(),
                "experts": [spec.model_dump(mode="json") for spec in result.experts],
                "reliable": list(result.reliable),
                "env": result.env.describe(),
            },
        )
        write_json(
            directory / MANIFEST_FILE,
            {
                "kind": "simulation",
                "name": self.config.name,
                "seed": self.config.seed,
                "config": self.echo,
                "config_hash": self.config_hash,
                "counts": {
                    "trajectories": result.dataset.n_trajectories,
                    "triples": len(result.dataset.triples),
                    "holdout_triples": len(result.holdout.triples),
                    "heldout_trajectories": len(result.heldout_trajectories),
                },
                "files": [DATASET_FILE, HOLDOUT_FILE, HELDOUT_TRAJECTORIES_FILE, GROUND_TRUTH_FILE],
            },
        )
        log.info("simulate.written", directory=str(directory))
        return directory / DATASET_FILE

    def _evaluation_set(self, dataset_path: Path) -> Optional[tuple[np.ndarray, np.ndarray]]:
        """(features, true returns) for the affine score; held-out trajectories when available."""
        truth_path = dataset_path.parent / GROUND_TRUTH_FILE
        if not truth_path.is_file():
            return None
        truth = read_json(truth_path)
        heldout_path = dataset_path.parent / HELDOUT_TRAJECTORIES_FILE
        if heldout_path.is_file() and truth.get("heldout_returns"):
            return read_dataset(heldout_path).features, np.asarray(truth["heldout_returns"], dtype=np.float64)
        return read_dataset(dataset_path).features, np.asarray(truth["returns"], dtype=np.float64)

    def _write_checkpoint(self, state: TrainerState, metrics: Sequence[MetricsRow]) -> None:
        directory = self.run_dir
        (directory / MODEL_FILE).write_text(dumps_checkpoint(state.model), encoding="utf-8", newline="\n")
        (directory / TRUST_FILE).write_text(dumps_trust_state(state.trust), encoding="utf-8", newline="\n")
        write_csv(directory / METRICS_FILE, metrics_columns(state.n_experts), metrics)

    def train(self, dataset_path: Path | str) -> Path:
        """Train on a dataset file; holdout and ground-truth files are picked up from the same directory."""
        dataset_path = Path(dataset_path)
        data = read_dataset(dataset_path)
        holdout_path = dataset_path.parent / HOLDOUT_FILE
        holdout = read_dataset(holdout_path) if holdout_path.is_file() else None

        evaluation = self._evaluation_set(dataset_path)
        evaluator = None
        if evaluation is not None:
            evaluator = partial(_affine_r2, features=evaluation[0], true_returns=evaluation[1])

        directory = self.run_dir
        directory.mkdir(parents=True, exist_ok=True)
        for name in (GROUND_TRUTH_FILE, HELDOUT_TRAJECTORIES_FILE):
            if (dataset_path.parent / name).is_file():
                shutil.copyfile(dataset_path.parent / name, directory / name)

        manifest: dict[str, Any] = {
            "kind": "training",
            "name": self.config.name,
            "seed": self.config.seed,
            "mode": self.config.train.mode.value,
            "dataset": str(dataset_path.resolve()),
            "config": self.echo,
            "config_hash": self.config_hash,
        }
        started = time.perf_counter()
        try:
            result = train(
                self.config,
                data,
                holdout=holdout,
                evaluator=evaluator,
                checkpoint=self._write_checkpoint,
                progress=ProgressBar(show_progress=bool(self.show_progress)),
            )
        except NumericDivergenceError as exc:
            manifest.update(
                {
                    "status": "diverged",
                    "diverged_at": exc.iteration,
                    "wall_time_seconds": time.perf_counter() - started,
                }
            )
            write_json(directory / MANIFEST_FILE, manifest)
            raise

        final = result.metrics[-1]
        evaluation_summary: dict[str, Any] = {"holdout_accuracy": final["holdout_accuracy"]}
        if evaluation is not None:
            features, true_returns = evaluation
            try:
                recovery = recovery_metrics(trajectory_returns(result.model, features), true_returns)
                evaluation_summary.update({"kendall_tau": recovery["kendall_tau"], "affine_r2": recovery["r2"]})
            except RejectedInputError as exc:
                evaluation_summary["recovery_error"] = str(exc)

        trust = result.trust
        manifest.update(
            {
                "status": "completed",
                "iterations": result.state.iteration,
                "final_trust": {
                    "alpha": trust.alpha.tolist(),
                    "alpha_bounded": trust.alpha_bounded.tolist(),
                    "alpha_normalized": trust.alpha_normalized.tolist(),
                    "weights": trust.weights.tolist(),
                    "signs": [int(value) for value in np.sign(trust.alpha_normalized)],
                },
                "evaluation": evaluation_summary,
                "wall_time_seconds": time.perf_counter() - started,
            }
        )
        write_json(directory / MANIFEST_FILE, manifest)
        log.info("train.written", directory=str(directory), accuracy=evaluation_summary["holdout_accuracy"])
        return directory


def analyze_run(run_dir: Path | str) -> Path:
    """Write report.json plus the trust-trajectory and learned-vs-true CSVs into ``run_dir``."""
    run_dir = Path(run_dir)
    missing = [name for name in RUN_FILES if not (run_dir / name).is_file()]
    if missing:
        msg = f"Run directory {run_dir} is incomplete; missing: {', '.join(missing)}"
        raise DataError(msg)

    manifest = read_json(run_dir / MANIFEST_FILE)
    dataset_path = Path(manifest.get("dataset", ""))
    if not dataset_path.is_file():
        msg = f"Run directory {run_dir} is incomplete; missing: dataset {dataset_path}"
        raise DataError(msg)
    dataset = check_dataset(read_dataset(dataset_path))
    metrics = read_csv(run_dir / METRICS_FILE)
    model = loads_checkpoint((run_dir / MODEL_FILE).read_text(encoding="utf-8"), source=str(run_dir / MODEL_FILE))
    trust = loads_trust_state((run_dir / TRUST_FILE).read_text(encoding="utf-8"), source=str(run_dir / TRUST_FILE))
    if trust.n_experts != dataset.n_experts:
        msg = f"{run_dir / TRUST_FILE} holds {trust.n_experts} experts but the dataset has K={dataset.n_experts}"
        raise DataError(msg)

    inputs = AnalysisInputs(dataset=dataset, trust=trust, metrics=metrics, model=model)
    truth_path = run_dir / GROUND_TRUTH_FILE
    if truth_path.is_file():
        truth = read_json(truth_path)
        inputs.true_returns = np.asarray(truth["returns"], dtype=np.float64)
        inputs.betas = [float(expert["beta"]) for expert in truth.get("experts", [])] or None
        heldout_path = run_dir / HELDOUT_TRAJECTORIES_FILE
        if heldout_path.is_file() and truth.get("heldout_returns"):
            inputs.heldout_features = read_dataset(heldout_path).features
            inputs.heldout_returns = np.asarray(truth["heldout_returns"], dtype=np.float64)
    else:
        inputs.missing_truth_reason = f"{GROUND_TRUTH_FILE} not found in {run_dir}"

    report, scatter = build_report(inputs)
    report.update({"name": manifest.get("name"), "mode": manifest.get("mode"), "status": manifest.get("status")})
    write_json(run_dir / REPORT_FILE, report)

    iterations, values = trust_series(metrics)
    columns = ["iteration", *(f"alpha_norm_{k}" for k in range(values.shape[1]))]
    rows = [
        {"iteration": int(iteration), **{f"alpha_norm_{k}": float(value) for k, value in enumerate(row)}}
        for iteration, row in zip(iterations, values)
    ]
    write_csv(run_dir / TRUST_TRAJECTORIES_FILE, columns, rows)
    write_csv(run_dir / SCATTER_FILE, ["set", "trajectory", "learned_return", "true_return"], scatter)
    log.info("analyze.written", directory=str(run_dir))
    return run_dir / REPORT_FILE


def mixture_label(mixture: Sequence[float]) -> str:
    return " ".join(f"{beta:g}" for beta in mixture)


@dataclass(frozen=True)
class SweepJob:
    config: RunConfig
    budget: int
    mixture: tuple[float, ...]
    out_root: Path


@dataclass
class SweepOutcome:
    name: str
    run_dir: Path
    budget: int
    mixture: tuple[float, ...]
    error: Optional[str] = None


def run_sweep_job(job: SweepJob) -> SweepOutcome:
    """Simulate and train one grid cell; failures are returned, not raised."""
    experiment = Experiment(job.config, out_root=job.out_root)
    outcome = SweepOutcome(name=job.config.name, run_dir=experiment.run_dir, budget=job.budget, mixture=job.mixture)
    try:
        experiment.train(experiment.simulate())
    except Exception as exc:  # noqa: BLE001
        outcome.error = f"{type(exc).__name__}: {exc}"
    return outcome


def sweep_record(manifest: dict[str, Any], budget: int, mixture: Sequence[float]) -> dict[str, Any]:
    """One aggregation input read back from a training manifest."""
    betas = list(mixture)
    record: dict[str, Any] = {"mixture": mixture_label(betas), "budget": budget, "status": manifest.get("status")}
    evaluation = manifest.get("evaluation", {})
    record["holdout_accuracy"] = evaluation.get("holdout_accuracy")
    record["kendall_tau"] = evaluation.get("kendall_tau")
    normalized = manifest.get("final_trust", {}).get("alpha_normalized")
    adversarial = [normalized[k] for k, beta in enumerate(betas) if beta < 0.0] if normalized else []
    noisy = [abs(normalized[k]) for k, beta in enumerate(betas) if beta == 0.0] if normalized else []
    record["adversarial_trust"] = float(np.mean(adversarial)) if adversarial else None
    record["noisy_trust"] = float(np.mean(noisy)) if noisy else None
    return record


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [float(value) for value in values if value is not None]
    return median(present) if present else None


def aggregate_records(records: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Median per (mixture, budget) over completed runs, in first-seen order."""
    groups: dict[tuple[str, int], list[dict[str, Any]]] = {}
    for record in records:
        groups.setdefault((record["mixture"], record["budget"]), []).append(record)
    rows = []
    for (mixture, budget), members in groups.items():
        completed = [member for member in members if member["status"] == "completed"]
        rows.append(
            {
                "mixture": mixture,
                "budget": budget,
                "runs": len(members),
                "failures": len(members) - len(completed),
                "median_holdout_accuracy": _median([member["holdout_accuracy"] for member in completed]),
                "median_kendall_tau": _median([member["kendall_tau"] for member in completed]),
                "median_adversarial_trust": _median([member["adversarial_trust"] for member in completed]),
                "median_noisy_trust": _median([member["noisy_trust"] for member in completed]),
            }
        )
    return rows


@dataclass
class SweepResult:
    directory: Path
    rows: list[dict[str, Any]]
    failed: list[str] = field(default_factory=list)


def run_sweep(
    spec: SweepSpec, out_root: Path, workers: Optional[int] = None, show_progress: bool = False
) -> SweepResult:
    """Run every (budget, mixture, seed) cell, then aggregate from the written manifests.

    Raises PartialSweepFailureError after writing the aggregate when any run failed.
    """
    directory = Path(out_root) / spec.name
    directory.mkdir(parents=True, exist_ok=True)
    jobs = []
    for mixture in spec.mixtures:
        for budget in spec.budgets:
            for seed in spec.seeds:
                config = spec.run_config(budget=budget, mixture=mixture, seed=seed)
                jobs.append(SweepJob(config=config, budget=budget, mixture=tuple(mixture), out_root=directory))

    workers = workers or spec.workers
    progress = ProgressBar(show_progress=show_progress, unit="runs")
    outcomes: list[SweepOutcome] = []
    if workers == 1:
        for job in jobs:
            outcomes.append(run_sweep_job(job))
            progress("sweep", len(outcomes), len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for outcome in pool.map(run_sweep_job, jobs):
                outcomes.append(outcome)
                progress("sweep", len(outcomes), len(jobs))

    records = []
    failed = []
    for outcome in outcomes:
        manifest_path = outcome.run_dir / MANIFEST_FILE
        if outcome.error is None and manifest_path.is_file():
            records.append(sweep_record(read_json(manifest_path), outcome.budget, outcome.mixture))
            continue
        failed.append(outcome.name)
        log.warning("sweep.run_failed", run=outcome.name, error=outcome.error)
        records.append(
            {
                "mixture": mixture_label(outcome.mixture),
                "budget": outcome.budget,
                "status": "failed",
                "holdout_accuracy": None,
                "kendall_tau": None,
                "adversarial_trust": None,
                "noisy_trust": None,
            }
        )

    rows = aggregate_records(records)
    write_csv(directory / AGGREGATE_FILE, AGGREGATE_COLUMNS, rows)
    log.info("sweep.done", runs=len(jobs), failed=len(failed), directory=str(directory))
    result = SweepResult(directory=directory, rows=rows, failed=failed)
    if failed:
        msg = f"{len(failed)} of {len(jobs)} sweep runs failed: {', '.join(failed)}"
        raise PartialSweepFailureError(msg, failed=failed)
    return result
