"""Line-oriented text formats for datasets and trust states.

Dataset file (see docs/formats.md)::

    dataset <version> <K> <d> <T> <n>
    trajectory <id>
    <d reals>                      # repeated T times
    ...                            # n trajectory records
    triple <i> <j> <y> <k>         # one line per triple, until EOF

Reals are written with 17 significant digits so a read followed by a write reproduces the file byte for byte.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from trustpref.core import PreferenceDataset, PreferenceTriple, Trajectory, TrustState
from trustpref.exceptions import DataError

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

FORMAT_VERSION = 1


def format_real(value: float) -> str:
    return format(float(value), ".17g")


def format_row(values: Iterable[float]) -> str:
    return " ".join(format_real(value) for value in values)


def dumps_dataset(dataset: PreferenceDataset) -> str:
    lines = [
        f"dataset {FORMAT_VERSION} {dataset.n_experts} {dataset.dimension} {dataset.horizon} {dataset.n_trajectories}"
    ]
    for trajectory in dataset.trajectories:
        lines.append(f"trajectory {trajectory.id}")
        lines.extend(format_row(row) for row in trajectory.steps)
    lines.extend(f"triple {t.i} {t.j} {t.y} {t.expert}" for t in dataset.triples)
    return "\n".join(lines) + "\n"


class _Lines:
    def __init__(self, text: str, source: str) -> None:
        self._lines: Iterator[tuple[int, str]] = (
            (number, line.strip()) for number, line in enumerate(text.splitlines(), start=1) if line.strip()
        )
        self.source = source
        self.number = 0

    def next(self, expected: str) -> list[str]:
        try:
            self.number, line = next(self._lines)
        except StopIteration as exc:
            msg = f"{self.source}: unexpected end of file, expected {expected}"
            raise DataError(msg) from exc
        return line.split()

    def rest(self) -> Iterator[list[str]]:
        for self.number, line in self._lines:
            yield line.split()

    def error(self, message: str) -> DataError:
        return DataError(f"{self.source}:{self.number}: {message}")


def _ints(lines: _Lines, fields: list[str]) -> list[int]:
    try:
        return [int(value) for value in fields]
    except ValueError as exc:
        raise lines.error(f"expected integers, got {fields}") from exc


def loads_dataset(text: str, source: str = "<dataset>") -> PreferenceDataset:
    lines = _Lines(text, source)
    header = lines.next("header")
    if len(header) != 6 or header[0] != "dataset":
        raise lines.error("header must read 'dataset <version> <K> <d> <T> <n>'")
    version, n_experts, dim, horizon, n_traj = _ints(lines, header[1:])
    if version != FORMAT_VERSION:
        raise lines.error(f"unsupported dataset version {version}")

    trajectories = []
    for _ in range(n_traj):
        record = lines.next("trajectory record")
        if len(record) != 2 or record[0] != "trajectory":
            raise lines.error("expected 'trajectory <id>'")
        (traj_id,) = _ints(lines, record[1:])
        rows = []
        for _ in range(horizon):
            row = lines.next(f"{horizon} feature rows for trajectory {traj_id}")
            if len(row) != dim:
                raise lines.error(f"expected {dim} reals, got {len(row)}")
            try:
                rows.append([float(value) for value in row])
            except ValueError as exc:
                raise lines.error("malformed real") from exc
        trajectories.append(Trajectory(id=traj_id, steps=np.array(rows, dtype=np.float64)))

    triples = []
    for record in lines.rest():
        if len(record) != 5 or record[0] != "triple":
            raise lines.error("expected 'triple <i> <j> <y> <k>'")
        i, j, y, k = _ints(lines, record[1:])
        triples.append(PreferenceTriple(i=i, j=j, y=y, expert=k))

    return PreferenceDataset(trajectories=tuple(trajectories), triples=tuple(triples), n_experts=n_experts)


def write_dataset(dataset: PreferenceDataset, path: Path | str) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(dataset), encoding="utf-8", newline="\n")
    return path


def read_dataset(path: Path | str) -> PreferenceDataset:
    path = Path(path)
    if not path.is_file():
        msg = f"Dataset file {path} does not exist"
        raise DataError(msg)
    return loads_dataset(path.read_text(encoding="utf-8"), source=str(path))


def dumps_trust_state(trust: TrustState) -> str:
    lines = [f"trust {FORMAT_VERSION} {trust.n_experts}"]
    lines.extend(
        format_row(values)
        for values in zip(trust.alpha, trust.alpha_bounded, trust.alpha_normalized, trust.weights)
    )
    return "\n".join(lines) + "\n"


def loads_trust_state(text: str, source: str = "<trust>") -> TrustState:
    lines = _Lines(text, source)
    header = lines.next("header")
    if len(header) != 3 or header[0] != "trust":
        raise lines.error("header must read 'trust <version> <K>'")
    _, n_experts = _ints(lines, header[1:])
    rows = []
    for _ in range(n_experts):
        row = lines.next("trust row")
        if len(row) != 4:
            raise lines.error("trust rows hold alpha, bounded, normalized and weight")
        rows.append([float(value) for value in row])
    table = np.array(rows, dtype=np.float64).reshape(n_experts, 4)
    return TrustState(alpha=table[:, 0], alpha_bounded=table[:, 1], alpha_normalized=table[:, 2], weights=table[:, 3])
