from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any, Optional, TypeVar

import pydantic
import structlog
import yaml

from trustpref import RunConfig, SweepSpec
from trustpref.core.io import format_real
from trustpref.exceptions import ConfigurationError, DataError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

OUT_DIR_ENV = "TTP_OUT_DIR"

ModelT = TypeVar("ModelT", bound=pydantic.BaseModel)


def configure_logging(verbosity: int = 0) -> None:
    """Console logging for the CLI: warnings by default, info with -v, debug with -vv."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        # resolve sys.stderr per logger so redirected streams are honoured
        logger_factory=lambda *_: structlog.PrintLogger(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def load_yaml(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        msg = f"Configuration file {path} does not exist"
        raise ConfigurationError(msg)
    try:
        with path.open("r", encoding="UTF-8") as file:
            data = yaml.safe_load(file)
    except yaml.YAMLError as exc:
        msg = f"{path}: invalid YAML ({exc})"
        raise ConfigurationError(msg) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        msg = f"{path}: expected a mapping at the top level"
        raise ConfigurationError(msg)
    return data


def describe_validation_error(exc: pydantic.ValidationError) -> str:
    """One line per problem, each naming the dotted key path."""
    problems = []
    for error in exc.errors():
        key = ".".join(str(part) for part in error["loc"]) or "<root>"
        problems.append(f"{key}: {error['msg']}")
    return "; ".join(problems)


def build_model(model: type[ModelT], data: Mapping[str, Any], source: str) -> ModelT:
    try:
        return model(**data)
    except pydantic.ValidationError as exc:
        msg = f"{source}: {describe_validation_error(exc)}"
        raise ConfigurationError(msg) from exc


def load_run_config(path: Path | str, seed: Optional[int] = None) -> RunConfig:
    data = load_yaml(path)
    if seed is not None:
        data["seed"] = seed
    return build_model(RunConfig, data, source=str(path))


def load_sweep_spec(path: Path | str) -> SweepSpec:
    return build_model(SweepSpec, load_yaml(path), source=str(path))


def config_echo(config: pydantic.BaseModel) -> dict[str, Any]:
    return config.model_dump(mode="json")


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(echo: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a config echo."""
    return hashlib.sha256(canonical_json(echo).encode("utf-8")).hexdigest()


def output_root(out: Optional[str], config: RunConfig) -> Path:
    if out:
        return Path(out)
    from_env = os.environ.get(OUT_DIR_ENV)
    if from_env:
        return Path(from_env)
    return Path(config.output.directory)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format_real(value) if math.isfinite(value) else ""
    return str(value)


def dumps_csv(columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(column)) for column in columns])
    return buffer.getvalue()


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path.write_text(dumps_csv(columns, rows), encoding="utf-8", newline="\n")
    return path


def _parse_cell(value: str) -> Any:
    if value == "":
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def read_csv(path: Path) -> list[dict[str, Any]]:
    if not path.is_file():
        msg = f"CSV file {path} does not exist"
        raise DataError(msg)
    with path.open("r", encoding="utf-8", newline="") as file:
        return [{key: _parse_cell(value) for key, value in row.items()} for row in csv.DictReader(file)]


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    return value


def dumps_json(data: Any) -> str:
    return json.dumps(_json_safe(data), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path, data: Any) -> Path:
    path.write_text(dumps_json(data), encoding="utf-8", newline="\n")
    return path


def read_json(path: Path) -> Any:
    if not path.is_file():
        msg = f"JSON file {path} does not exist"
        raise DataError(msg)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        msg = f"{path}: invalid JSON ({exc})"
        raise DataError(msg) from exc
