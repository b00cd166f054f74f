import json
from pathlib import Path
from timeit import default_timer as timer
from typing import NoReturn, Optional

import pydantic
import typer
from rich.console import Console
from rich.table import Table

from trustpref import RunConfig, SweepSpec, TrainMode
from trustpref.exceptions import PartialSweepFailureError, TrustPrefError
from trustpref.runner import DATASET_FILE, Experiment, analyze_run, run_sweep
from trustpref.utils import configure_logging, load_run_config, load_sweep_spec, output_root

app = typer.Typer(help="Joint reward and per-expert trust learning from pairwise preferences.")
console = Console()

CONFIG_HELP = "File path to the run configuration YAML file"
OUT_HELP = "Output root directory (overrides TTP_OUT_DIR and the config)"
SEED_HELP = "Override the seed from the configuration"
SCHEMA_HELP = "Print the JSON schema of the configuration file and exit"


def print_error_and_abort(error: TrustPrefError | str) -> NoReturn:
    if isinstance(error, TrustPrefError):
        console.print(f"Error: {error.message}", style="bold red")
        raise typer.Exit(code=error.exit_code)
    console.print(f"Error: {error}", style="bold red")
    raise typer.Exit(code=2)


def print_schema(model: type[pydantic.BaseModel]) -> None:
    console.print_json(json.dumps(model.model_json_schema()))
    raise typer.Exit


def require_config(config_file: Optional[str]) -> str:
    if not config_file:
        print_error_and_abort("Missing option '--config'.")
    return config_file


def load_config(config_file: Optional[str], seed: Optional[int], mode: Optional[TrainMode] = None) -> RunConfig:
    config = load_run_config(require_config(config_file), seed=seed)
    if mode is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"mode": mode})})
    return config


@app.callback()
def main(
    verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="Increase log verbosity (-v info, -vv debug)"),
) -> None:
    configure_logging(verbose)


@app.command(name="simulate")
def simulate_cmd(
    config_file: str = typer.Option(None, "--config", help=CONFIG_HELP),
    seed: int = typer.Option(None, help=SEED_HELP),
    out: str = typer.Option(None, help=OUT_HELP),
    schema: bool = typer.Option(False, "--print-schema", help=SCHEMA_HELP),
) -> None:
    """Generate trajectories and per-expert preference datasets with hidden ground truth."""
    if schema:
        print_schema(RunConfig)
    try:
        config = load_config(config_file, seed)
        experiment = Experiment(config, out_root=output_root(out, config))
        dataset_path = experiment.simulate()
    except TrustPrefError as exc:
        print_error_and_abort(exc)
    console.print(f"Simulate: wrote {dataset_path.parent} (config hash {experiment.config_hash[:12]})")


@app.command(name="train")
def train_cmd(
    config_file: str = typer.Option(None, "--config", help=CONFIG_HELP),
    dataset: str = typer.Option(None, help="Dataset file; defaults to the simulated dataset of this config"),
    seed: int = typer.Option(None, help=SEED_HELP),
    out: str = typer.Option(None, help=OUT_HELP),
    mode: TrainMode = typer.Option(None, help="Override the training mode"),
    baseline: bool = typer.Option(False, "--baseline", help="Shortcut for --mode uniform-baseline"),
    show_progress: bool = typer.Option(default=True, help="Show a progress bar during training"),
    schema: bool = typer.Option(False, "--print-schema", help=SCHEMA_HELP),
) -> None:
    """Jointly learn the reward model and the per-expert trust."""
    if schema:
        print_schema(RunConfig)
    if baseline:
        mode = TrainMode.UNIFORM_BASELINE
    try:
        config = load_config(config_file, seed, mode)
        experiment = Experiment(config, out_root=output_root(out, config), show_progress=show_progress)
        dataset_path = Path(dataset) if dataset else experiment.data_dir / DATASET_FILE
        start_time = timer()
        run_dir = experiment.train(dataset_path)
        end_time = timer()
    except TrustPrefError as exc:
        print_error_and_abort(exc)
    console.print(f"Train: {config.train.mode.value} run written to {run_dir} in {end_time - start_time:.1f} sec")


@app.command(name="sweep")
def sweep_cmd(
    config_file: str = typer.Option(None, "--config", help="File path to the sweep specification YAML file"),
    seed: int = typer.Option(None, help="Run only this seed instead of the sweep's seed list"),
    out: str = typer.Option(None, help=OUT_HELP),
    workers: int = typer.Option(None, min=1, help="Parallel worker processes (defaults to the sweep file)"),
    show_progress: bool = typer.Option(default=True, help="Show a progress bar over the runs"),
    schema: bool = typer.Option(False, "--print-schema", help=SCHEMA_HELP),
) -> None:
    """Run a budget x mixture x seed grid and write the aggregate CSV."""
    if schema:
        print_schema(SweepSpec)
    try:
        spec = load_sweep_spec(require_config(config_file))
        if seed is not None:
            spec = spec.model_copy(update={"seeds": [seed]})
        result = run_sweep(spec, out_root=output_root(out, spec.base), workers=workers, show_progress=show_progress)
    except PartialSweepFailureError as exc:
        console.print(f"Sweep: {len(exc.failed)} run(s) failed; aggregate written anyway", style="yellow")
        print_error_and_abort(exc)
    except TrustPrefError as exc:
        print_error_and_abort(exc)

    table = Table(title=f"Sweep {spec.name}")
    for column in ("mixture", "budget", "runs", "median_holdout_accuracy", "median_kendall_tau"):
        table.add_column(column)
    for row in result.rows:
        table.add_row(
            row["mixture"],
            str(row["budget"]),
            str(row["runs"]),
            _fmt(row["median_holdout_accuracy"]),
            _fmt(row["median_kendall_tau"]),
        )
    console.print(table)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"


@app.command(name="analyze")
def analyze_cmd(
    run_dir: str = typer.Option(None, help="Run directory; defaults to the run of this config"),
    config_file: str = typer.Option(None, "--config", help=CONFIG_HELP),
    seed: int = typer.Option(None, help=SEED_HELP),
    out: str = typer.Option(None, help=OUT_HELP),
    mode: TrainMode = typer.Option(None, help="Training mode of the run to analyze"),
    schema: bool = typer.Option(False, "--print-schema", help=SCHEMA_HELP),
) -> None:
    """Write identifiability diagnostics, recovery metrics and trust summaries for a finished run."""
    if schema:
        print_schema(RunConfig)
    try:
        if run_dir:
            directory = Path(run_dir)
        else:
            config = load_config(config_file, seed, mode)
            directory = Experiment(config, out_root=output_root(out, config)).run_dir
        report = analyze_run(directory)
    except TrustPrefError as exc:
        print_error_and_abort(exc)
    console.print(f"Analyze: report written to {report}")


if __name__ == "__main__":
    app()
