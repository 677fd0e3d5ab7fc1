"""Files: JSONL execution logs, CSV matrices and reports, JSON checkpoints.

Logs keep full float precision so records round-trip exactly. CSV files and
JSON reports write numbers with 12 significant digits.
"""
from __future__ import annotations

import csv
import io
import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .analysis import (DistanceMatrix, EfficiencyReport, GapReport, OutcomeMatrix, ParetoPoint,
                       RuntimeMatrix)
from .execution import ExecutionStage
from .reward import RewardBreakdown
from .workflow import canonical_string

SCHEMA_VERSION = 1


class LogFormatError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class SchemaVersionError(LogFormatError):
    pass


def fmt(x) -> str:
    """12 significant digits; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    s = f"{x:.12g}"
    return "0" if s == "-0" else s


def _round12(obj):
    if isinstance(obj, float):
        return float(fmt(obj)) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round12(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round12(v) for v in obj]
    return obj


def dump_json(obj, path: str | Path, round_numbers: bool = True):
    data = _round12(obj) if round_numbers else obj
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------- logs


@dataclass(frozen=True)
class LogRecord:
    """One rewarded (or format-rejected) rollout.

    ``lam = 0`` marks a pseudo reward: nothing was executed, so ``stage``,
    ``elapsed_seconds`` and ``breakdown`` are absent.
    """

    task_id: str
    workflow: str
    stage: ExecutionStage | None
    elapsed_seconds: float | None
    breakdown: RewardBreakdown | None
    total: float
    lam: int = 1
    mask: dict[str, int] | None = None
    timestamp: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.stage is not None and not isinstance(self.stage, ExecutionStage):
            object.__setattr__(self, "stage", ExecutionStage(self.stage))
        if self.lam not in (0, 1):
            raise ValueError("lam must be 0 or 1")
        if not math.isfinite(self.total):
            raise ValueError("total must be finite")
        if self.lam == 1:
            if self.stage is None or self.breakdown is None or self.elapsed_seconds is None:
                raise ValueError("a real-reward record needs stage, elapsed and breakdown")
            if abs(self.breakdown.total - self.total) > 1e-9:
                raise ValueError("total disagrees with the breakdown")
        if self.elapsed_seconds is not None and self.elapsed_seconds < 0:
            raise ValueError("elapsed_seconds must be nonnegative")
        if self.stage == ExecutionStage.FORMAT_INVALID and self.workflow:
            raise ValueError("format-invalid records carry no workflow")

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "timestamp": self.timestamp,
                "task_id": self.task_id, "workflow": self.workflow, "mask": self.mask,
                "stage": None if self.stage is None else self.stage.value,
                "elapsed_seconds": self.elapsed_seconds,
                "breakdown": None if self.breakdown is None else self.breakdown.to_json(),
                "total": self.total, "lambda": self.lam}

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, obj) -> "LogRecord":
        return cls(task_id=obj["task_id"], workflow=obj["workflow"],
                   stage=None if obj["stage"] is None else ExecutionStage(obj["stage"]),
                   elapsed_seconds=obj["elapsed_seconds"],
                   breakdown=None if obj["breakdown"] is None
                   else RewardBreakdown.from_json(obj["breakdown"]),
                   total=obj["total"], lam=obj["lambda"], mask=obj.get("mask"),
                   timestamp=obj.get("timestamp"), schema_version=obj["schema_version"])


def record_to_log(rec, breakdown: RewardBreakdown, *, mask: dict | None = None,
                  timestamp: str | None = None) -> LogRecord:
    """Log line for an executed rollout (real reward)."""
    return LogRecord(rec.task_id, "" if rec.workflow is None else canonical_string(rec.workflow),
                     rec.stage, rec.elapsed_seconds, breakdown, breakdown.total, 1, mask, timestamp)


class LogWriter:
    """Serializes appends from several threads into one sink."""

    def __init__(self, sink: IO[str]):
        self.sink = sink
        self._lock = threading.Lock()

    def write(self, record: LogRecord):
        line = record.to_line() + "\n"
        with self._lock:
            self.sink.write(line)


def write_log(record: LogRecord, sink: IO[str]):
    sink.write(record.to_line() + "\n")


class LogReader:
    """Stream records from a JSONL file or text stream.

    Strict mode raises on the first corrupt line; lenient mode skips it and
    records its number in ``skipped``. An unknown schema version always raises.
    """

    def __init__(self, source: str | Path | IO[str], lenient: bool = False):
        self.source = source
        self.lenient = lenient
        self.skipped: list[int] = []

    def __iter__(self) -> Iterator[LogRecord]:
        if isinstance(self.source, (str, Path)):
            with open(self.source, encoding="utf-8") as fh:
                yield from self._records(fh)
        else:
            yield from self._records(self.source)

    def _records(self, fh) -> Iterator[LogRecord]:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
                version = obj.get("schema_version")
            except ValueError as e:
                if self.lenient:
                    self.skipped.append(n)
                    continue
                raise LogFormatError(n, f"corrupt record ({e})") from None
            if version != SCHEMA_VERSION:
                raise SchemaVersionError(n, f"unsupported schema_version {version!r}")
            try:
                yield LogRecord.from_json(obj)
            except (KeyError, TypeError, ValueError) as e:
                if self.lenient:
                    self.skipped.append(n)
                    continue
                raise LogFormatError(n, f"invalid record ({e})") from None


def read_log(source: str | Path | IO[str], lenient: bool = False) -> Iterator[LogRecord]:
    return iter(LogReader(source, lenient))


# ----------------------------------------------------------------- matrices


def _matrix_text(workflows: Sequence[str], tasks: Sequence[str], values) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workflow", *tasks])
    for label, row in zip(workflows, values):
        w.writerow([label, *(fmt(v) for v in row)])
    return buf.getvalue()


def write_outcomes_csv(Y: OutcomeMatrix, path: str | Path):
    Path(path).write_text(_matrix_text(Y.workflows, Y.tasks, Y.bits.astype(int).tolist()))


def write_runtimes_csv(T: RuntimeMatrix, path: str | Path):
    Path(path).write_text(_matrix_text(T.workflows, T.tasks, T.values.tolist()))


def _read_matrix(path: str | Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "workflow":
        raise ValueError(f"{path}: first header cell must be 'workflow'")
    tasks = tuple(rows[0][1:])
    labels, values = [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(tasks) + 1:
            raise ValueError(f"{path}: row {n} has {len(row) - 1} cells, expected {len(tasks)}")
        labels.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError:
            raise ValueError(f"{path}: row {n} holds a non-numeric cell") from None
    return tuple(labels), tasks, np.array(values, dtype=float).reshape(len(labels), len(tasks))


def read_outcomes_csv(path: str | Path) -> OutcomeMatrix:
    labels, tasks, v = _read_matrix(path)
    if not np.isin(v, (0.0, 1.0)).all():
        raise ValueError(f"{path}: outcome cells must be 0 or 1")
    return OutcomeMatrix(labels, tasks, v.astype(np.uint8))


def read_runtimes_csv(path: str | Path) -> RuntimeMatrix:
    labels, tasks, v = _read_matrix(path)
    return RuntimeMatrix(labels, tasks, v)


# ------------------------------------------------------------------ reports


def _write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def write_distance_csv(D: DistanceMatrix, path: str | Path):
    Path(path).write_text(_matrix_text(D.labels, D.labels, D.d.tolist()))


def write_gap_json(report: GapReport, labels: Sequence[str], path: str | Path):
    dump_json(report.to_json(labels), path)


def write_efficiency_csv(report: EfficiencyReport, path: str | Path):
    _write_rows(path, ["n", "count", "t_max", "t_min", "delta_eff"],
                ((r.n, r.count, r.t_max, r.t_min, r.delta_eff) for r in report.rows))


def write_pareto_csv(points: Sequence[ParetoPoint], path: str | Path):
    _write_rows(path, ["label", "accuracy", "mean_seconds", "is_oracle"],
                ((p.label, p.accuracy, p.mean_seconds, p.is_oracle) for p in points))


def write_trace_csv(trace, path: str | Path):
    _write_rows(path, ["step", "mean_reward", "holdout_ex", "kl", "mask_r"],
                ((t.step, t.mean_reward, t.holdout_ex, t.kl, t.mask_r) for t in trace))


def write_rows_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]):
    _write_rows(path, header, rows)


# -------------------------------------------------------------- checkpoints


def write_checkpoint(path: str | Path, theta: np.ndarray, layout, step: int, seed: int,
                     config: dict):
    # full precision: a reloaded policy must rank workflows identically
    dump_json({"theta": [float(x) for x in theta], "feature_layout": layout.to_json(),
               "step": step, "seed": seed, "config": config}, path, round_numbers=False)


def read_checkpoint(path: str | Path) -> dict:
    obj = json.loads(Path(path).read_text())
    for key in ("theta", "feature_layout", "step", "seed", "config"):
        if key not in obj:
            raise ValueError(f"{path}: checkpoint lacks {key!r}")
    return obj


def write_supervision(records, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")


@contextmanager
def log_sink(path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        yield LogWriter(fh)
