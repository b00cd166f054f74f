import json
from pathlib import Path

import pytest
from typer.testing import CliRunner

import trustpref.trainer as trainer_module
from trustpref.cli import app
from trustpref.runner import AGGREGATE_COLUMNS, MANIFEST_FILE, aggregate_records, sweep_record
from trustpref.utils import config_hash, dumps_csv, read_json

runner = CliRunner()


@pytest.fixture
def config_file(small_config_data, write_yaml):
    return write_yaml(small_config_data)


def _invoke(*args: str):
    return runner.invoke(app, list(args))


def _simulate(config_file: Path, out: Path):
    return _invoke("simulate", "--config", str(config_file), "--out", str(out))


def _train(config_file: Path, out: Path, *extra: str):
    return _invoke("train", "--config", str(config_file), "--out", str(out), "--no-show-progress", *extra)


def test_print_schema():
    result = _invoke("simulate", "--print-schema")
    assert result.exit_code == 0
    assert "pairs_per_expert" in result.stdout


def test_simulate_writes_data_and_is_reproducible(config_file, tmp_path):
    first = _simulate(config_file, tmp_path / "a")
    second = _simulate(config_file, tmp_path / "b")
    assert first.exit_code == 0, first.output
    assert second.exit_code == 0, second.output
    for name in ("dataset.txt", "holdout.txt", "heldout_trajectories.txt", "ground_truth.json", "manifest.json"):
        left = (tmp_path / "a" / "small" / "data" / name).read_bytes()
        right = (tmp_path / "b" / "small" / "data" / name).read_bytes()
        assert left == right, name
    manifest = read_json(tmp_path / "a" / "small" / "data" / MANIFEST_FILE)
    assert manifest["counts"]["triples"] == 111
    assert config_hash(manifest["config"]) == manifest["config_hash"]


def test_missing_seed_is_a_configuration_error(small_config_data, write_yaml, tmp_path):
    del small_config_data["seed"]
    result = _simulate(write_yaml(small_config_data), tmp_path)
    assert result.exit_code == 2
    assert "seed" in result.output


def test_unknown_key_is_a_configuration_error(small_config_data, write_yaml, tmp_path):
    small_config_data["train"]["learning_rate"] = 0.1
    result = _simulate(write_yaml(small_config_data), tmp_path)
    assert result.exit_code == 2
    assert "learning_rate" in result.output


def test_missing_config_file(tmp_path):
    result = _simulate(tmp_path / "absent.yml", tmp_path)
    assert result.exit_code == 2


def test_too_many_pairs_is_a_configuration_error(small_config_data, write_yaml, tmp_path):
    small_config_data["pairs_per_expert"] = 300
    result = _simulate(write_yaml(small_config_data), tmp_path)
    assert result.exit_code == 2
    assert not (tmp_path / "small" / "data" / "dataset.txt").exists()


def test_seed_override_changes_the_data(config_file, tmp_path):
    _simulate(config_file, tmp_path / "a")
    result = _invoke("simulate", "--config", str(config_file), "--out", str(tmp_path / "b"), "--seed", "7")
    assert result.exit_code == 0
    assert read_json(tmp_path / "b" / "small" / "data" / MANIFEST_FILE)["seed"] == 7
    left = (tmp_path / "a" / "small" / "data" / "dataset.txt").read_bytes()
    right = (tmp_path / "b" / "small" / "data" / "dataset.txt").read_bytes()
    assert left != right


def test_out_dir_from_environment(config_file, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("TTP_OUT_DIR", str(tmp_path / "from-env"))
    result = _invoke("simulate", "--config", str(config_file))
    assert result.exit_code == 0, result.output
    assert (tmp_path / "from-env" / "small" / "data" / "dataset.txt").is_file()
    assert not (tmp_path / "runs").exists()


def test_train_writes_run_directory(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    result = _train(config_file, tmp_path)
    assert result.exit_code == 0, result.output
    run_dir = tmp_path / "small" / "trust"
    for name in ("metrics.csv", "manifest.json", "model.txt", "trust.txt", "ground_truth.json"):
        assert (run_dir / name).is_file(), name
    manifest = read_json(run_dir / MANIFEST_FILE)
    assert manifest["status"] == "completed"
    assert manifest["mode"] == "trust"
    assert manifest["iterations"] == 20
    assert len(manifest["final_trust"]["alpha_normalized"]) == 4
    assert 0.0 <= manifest["evaluation"]["holdout_accuracy"] <= 1.0
    assert config_hash(manifest["config"]) == manifest["config_hash"]


def test_train_metrics_are_byte_identical(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    _train(config_file, tmp_path)
    first = (tmp_path / "small" / "trust" / "metrics.csv").read_bytes()
    _train(config_file, tmp_path)
    assert (tmp_path / "small" / "trust" / "metrics.csv").read_bytes() == first
    assert first.decode("utf-8").count("\n") == 6


def test_baseline_flag_selects_uniform_mode(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    result = _train(config_file, tmp_path, "--baseline")
    assert result.exit_code == 0, result.output
    manifest = read_json(tmp_path / "small" / "uniform-baseline" / MANIFEST_FILE)
    assert manifest["mode"] == "uniform-baseline"
    assert manifest["final_trust"]["alpha"] == [1.0, 1.0, 1.0, 1.0]


def test_train_without_dataset_is_a_data_error(config_file, tmp_path):
    result = _train(config_file, tmp_path)
    assert result.exit_code == 3


def test_train_rejects_corrupt_dataset(config_file, tmp_path):
    path = tmp_path / "broken.txt"
    path.write_text("dataset 1 4 6 5 2\nnot numbers\n", encoding="utf-8")
    result = _train(config_file, tmp_path, "--dataset", str(path))
    assert result.exit_code == 3


def test_train_divergence_exit_code(config_file, tmp_path, monkeypatch):
    _simulate(config_file, tmp_path)
    real = trainer_module.weighted_nll
    calls = {"count": 0}

    def flaky(batch):
        calls["count"] += 1
        return float("nan") if calls["count"] == 12 else real(batch)

    monkeypatch.setattr(trainer_module, "weighted_nll", flaky)
    result = _train(config_file, tmp_path)
    assert result.exit_code == 4
    run_dir = tmp_path / "small" / "trust"
    manifest = read_json(run_dir / MANIFEST_FILE)
    assert manifest["status"] == "diverged"
    assert manifest["diverged_at"] == 12
    assert (run_dir / "model.txt").is_file()
    assert (run_dir / "metrics.csv").read_text(encoding="utf-8").splitlines()[-1].startswith("10,")


def test_analyze_writes_report(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    _train(config_file, tmp_path)
    run_dir = tmp_path / "small" / "trust"
    result = _invoke("analyze", "--run-dir", str(run_dir))
    assert result.exit_code == 0, result.output
    report = read_json(run_dir / "report.json")
    assert report["experts"] == 4
    assert set(report["affine"]) == {"train", "heldout"}
    assert report["teacher_types"] == ["reliable", "reliable", "reliable", "adversarial"]
    assert len(report["trust_summary"]) == 4
    trust_rows = (run_dir / "trust_trajectories.csv").read_text(encoding="utf-8").splitlines()
    assert trust_rows[0] == "iteration,alpha_norm_0,alpha_norm_1,alpha_norm_2,alpha_norm_3"
    assert len(trust_rows) == 6
    scatter_rows = (run_dir / "returns_scatter.csv").read_text(encoding="utf-8").splitlines()
    assert len(scatter_rows) == 1 + 40 + 10

    before = (run_dir / "report.json").read_bytes()
    _invoke("analyze", "--run-dir", str(run_dir))
    assert (run_dir / "report.json").read_bytes() == before


def test_analyze_by_config(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    _train(config_file, tmp_path, "--baseline")
    result = _invoke("analyze", "--config", str(config_file), "--out", str(tmp_path), "--mode", "uniform-baseline")
    assert result.exit_code == 0, result.output
    assert read_json(tmp_path / "small" / "uniform-baseline" / "report.json")["mode"] == "uniform-baseline"


def test_analyze_without_ground_truth_omits_affine(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    _train(config_file, tmp_path)
    run_dir = tmp_path / "small" / "trust"
    (run_dir / "ground_truth.json").unlink()
    result = _invoke("analyze", "--run-dir", str(run_dir))
    assert result.exit_code == 0, result.output
    report = read_json(run_dir / "report.json")
    assert report["affine"] is None
    assert "ground_truth.json" in report["affine_omitted"]
    assert report["connectivity"]["returns_source"] == "learned"


def test_analyze_rejects_corrupt_dataset(config_file, tmp_path):
    _simulate(config_file, tmp_path)
    _train(config_file, tmp_path)
    with (tmp_path / "small" / "data" / "dataset.txt").open("a", encoding="utf-8") as handle:
        handle.write("triple 0 999 1 0\n")
    result = _invoke("analyze", "--run-dir", str(tmp_path / "small" / "trust"))
    assert result.exit_code == 3
    assert "problem" in result.output


def test_analyze_incomplete_run_directory(tmp_path):
    (tmp_path / "metrics.csv").write_text("iteration\n0\n", encoding="utf-8")
    result = _invoke("analyze", "--run-dir", str(tmp_path))
    assert result.exit_code == 3
    assert "incomplete" in result.output


@pytest.fixture
def sweep_data(small_config_data):
    base = {key: value for key, value in small_config_data.items() if key not in ("name", "seed", "experts")}
    return {
        "name": "grid",
        "base": base,
        "budgets": [60, 90],
        "mixtures": [[1, 1, -1], [1, 1, 0]],
        "seeds": [0, 1, 2],
        "workers": 1,
    }


def _sweep(spec_file: Path, out: Path, *extra: str):
    return _invoke("sweep", "--config", str(spec_file), "--out", str(out), "--no-show-progress", *extra)


def test_sweep_runs_grid_and_aggregates(sweep_data, write_yaml, tmp_path):
    spec_file = write_yaml(sweep_data, "sweep.yml")
    result = _sweep(spec_file, tmp_path / "out")
    assert result.exit_code == 0, result.output
    directory = tmp_path / "out" / "grid"
    manifests = sorted(directory.glob("*/trust/manifest.json"))
    assert len(manifests) == 12

    aggregate = (directory / "aggregate.csv").read_text(encoding="utf-8")
    lines = aggregate.splitlines()
    assert lines[0] == ",".join(AGGREGATE_COLUMNS)
    assert len(lines) == 5

    records = []
    for mixture in sweep_data["mixtures"]:
        for budget in sweep_data["budgets"]:
            for seed in sweep_data["seeds"]:
                label = "_".join(f"{beta:g}" for beta in mixture)
                manifest = read_json(directory / f"grid-b{budget}-m{label}-s{seed}" / "trust" / MANIFEST_FILE)
                records.append(sweep_record(manifest, budget, [float(beta) for beta in mixture]))
    assert dumps_csv(AGGREGATE_COLUMNS, aggregate_records(records)) == aggregate


def test_sweep_aggregate_ignores_worker_count(sweep_data, write_yaml, tmp_path):
    spec_file = write_yaml(sweep_data, "sweep.yml")
    _sweep(spec_file, tmp_path / "serial")
    result = _sweep(spec_file, tmp_path / "parallel", "--workers", "2")
    assert result.exit_code == 0, result.output
    serial = (tmp_path / "serial" / "grid" / "aggregate.csv").read_bytes()
    assert (tmp_path / "parallel" / "grid" / "aggregate.csv").read_bytes() == serial


def test_sweep_single_seed(sweep_data, write_yaml, tmp_path):
    result = _sweep(write_yaml(sweep_data, "sweep.yml"), tmp_path, "--seed", "5")
    assert result.exit_code == 0, result.output
    assert len(list((tmp_path / "grid").glob("*/trust/manifest.json"))) == 4
    assert all(path.name.endswith("-s5") for path in (tmp_path / "grid").iterdir() if path.is_dir())


def test_sweep_partial_failure(sweep_data, write_yaml, tmp_path):
    sweep_data["budgets"] = [60, 100_000]
    sweep_data["mixtures"] = [[1, -1]]
    result = _sweep(write_yaml(sweep_data, "sweep.yml"), tmp_path)
    assert result.exit_code == 5
    rows = (tmp_path / "grid" / "aggregate.csv").read_text(encoding="utf-8").splitlines()
    assert rows[1].startswith("1 -1,60,3,0,")
    assert rows[2] == "1 -1,100000,3,3,,,,"


def test_sweep_schema():
    result = _invoke("sweep", "--print-schema")
    assert result.exit_code == 0
    assert json.loads(result.stdout)["title"] == "SweepSpec"
