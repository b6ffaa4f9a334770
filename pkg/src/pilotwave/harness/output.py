"""Columnar text output with ``#`` metadata headers, plus the JSON run report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class Artifact:
    name: str
    columns: tuple[str, ...]
    data: Sequence[np.ndarray]  # one array per column
    meta: dict = field(default_factory=dict)
    units: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class RunReport:
    kind: str
    config_hash: str
    seed: int
    wall_time: float = 0.0
    checks: list[Check] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _fmt_column(col) -> list[str]:
    arr = np.asarray(col)
    if arr.dtype.kind in "iub":
        return [str(int(v)) for v in arr]
    # repr round-trips floats exactly and is platform independent
    return [repr(float(v)) for v in arr]


def write_columns(path: Path, columns: Sequence[str], data: Sequence, meta: dict, units: Sequence[str] | None = None) -> Path:
    cols = [_fmt_column(c) for c in data]
    if len(cols) != len(columns) or len({len(c) for c in cols}) > 1:
        raise ValueError(f"{path.name}: column names and data do not match")
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append("# columns: " + " ".join(columns))
    if units is not None:
        lines.append("# units: " + " ".join(units))
    for row in zip(*cols):
        lines.append(" ".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_outputs(report: RunReport, artifacts: Sequence[Artifact], out_dir: str | Path) -> list[Path]:
    """Write every artifact and the report; the report lists all emitted files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for a in artifacts:
        meta = {"config_hash": report.config_hash, "seed": report.seed, "kind": report.kind}
        meta.update(a.meta)
        paths.append(write_columns(out / a.name, a.columns, a.data, meta, a.units))
    report_path = out / "report.json"
    report.files = [p.name for p in paths] + [report_path.name]
    report_path.write_text(report.to_json() + "\n")
    return paths + [report_path]


def read_columns(path: str | Path) -> tuple[dict, list[str], np.ndarray]:
    """Parse a file written by :func:`write_columns` back into (meta, columns, data)."""
    meta: dict = {}
    columns: list[str] = []
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# columns:"):
            columns = line.split(":", 1)[1].split()
        elif line.startswith("# units:"):
            continue
        elif line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            rows.append([float(t) for t in line.split()])
    return meta, columns, np.array(rows).reshape(len(rows), len(columns))
