"""Oracle analysis over outcome and runtime matrices.

Rows are workflows, columns are queries. ``Y[i, q]`` is 1 when workflow ``i``
solves query ``q``; ``T[i, q]`` is its runtime in seconds. Query weights
default to uniform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class OutcomeMatrix:
    workflows: tuple[str, ...]
    tasks: tuple[str, ...]
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.shape != (len(self.workflows), len(self.tasks)):
            raise ValueError(f"bits shape {bits.shape} does not match labels "
                             f"({len(self.workflows)}, {len(self.tasks)})")
        if bits.size and bits.max() > 1:
            raise ValueError("outcome bits must be 0 or 1")
        object.__setattr__(self, "workflows", tuple(self.workflows))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        return (isinstance(other, OutcomeMatrix) and self.workflows == other.workflows
                and self.tasks == other.tasks and np.array_equal(self.bits, other.bits))


@dataclass(frozen=True, eq=False)
class RuntimeMatrix:
    workflows: tuple[str, ...]
    tasks: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.workflows), len(self.tasks)):
            raise ValueError("runtime values do not match labels")
        if values.size and not (values > 0).all():
            raise ValueError("runtimes must be strictly positive")
        object.__setattr__(self, "workflows", tuple(self.workflows))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        return (isinstance(other, RuntimeMatrix) and self.workflows == other.workflows
                and self.tasks == other.tasks and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class GapReport:
    p: tuple[float, ...]
    ex_static: float
    ex_dynamic: float
    delta: float
    i_star: int
    lower_bounds: tuple[float, ...]
    coverage: bool

    def to_json(self, labels: Sequence[str] | None = None) -> dict:
        out = {"p": list(self.p), "ex_static": self.ex_static, "ex_dynamic": self.ex_dynamic,
               "delta": self.delta, "i_star": self.i_star,
               "lower_bounds": list(self.lower_bounds), "coverage": self.coverage}
        if labels is not None:
            out["workflows"] = list(labels)
            out["best_static"] = labels[self.i_star]
        return out


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    labels: tuple[str, ...]
    d_sample: np.ndarray
    d_efficiency: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class EfficiencyRow:
    n: int
    count: int
    t_max: float | None
    t_min: float | None
    delta_eff: float | None


@dataclass(frozen=True)
class EfficiencyReport:
    rows: tuple[EfficiencyRow, ...]

    def bucket(self, n: int) -> EfficiencyRow:
        return self.rows[n - 1]


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    accuracy: float
    mean_seconds: float
    is_oracle: bool = False


def query_weights(n: int, weights=None) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or (w < 0).any() or abs(math.fsum(w) - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative, one per query, and sum to 1")
    return w


# ------------------------------------------------------------------ distances


def d_sample(yi, yj, weights=None) -> float:
    """Weighted rate at which two workflows disagree on correctness."""
    yi, yj = np.asarray(yi), np.asarray(yj)
    if yi.shape != yj.shape:
        raise ValueError("rows differ in length")
    w = query_weights(len(yi), weights)
    return float(np.dot(w, yi != yj))


def d_efficiency(ti, tj, weights=None) -> float:
    """Weighted mean of |t_i - t_j| / (t_i + t_j)."""
    ti, tj = np.asarray(ti, dtype=float), np.asarray(tj, dtype=float)
    if ti.shape != tj.shape:
        raise ValueError("rows differ in length")
    if (ti <= 0).any() or (tj <= 0).any():
        raise ValueError("runtimes must be strictly positive")
    w = query_weights(len(ti), weights)
    return float(np.dot(w, np.abs(ti - tj) / (ti + tj)))


def _check_pair(Y: OutcomeMatrix, T: RuntimeMatrix):
    if Y.bits.shape != T.values.shape:
        raise ValueError(f"outcome shape {Y.bits.shape} != runtime shape {T.values.shape}")


def distance_matrix(Y: OutcomeMatrix, T: RuntimeMatrix, weights=None) -> DistanceMatrix:
    _check_pair(Y, T)
    K, Q = Y.bits.shape
    w = query_weights(Q, weights)
    y = Y.bits.astype(float)
    t = T.values
    ds = np.empty((K, K))
    de = np.empty((K, K))
    for i in range(K):
        ds[i] = np.abs(y[i] - y) @ w
        de[i] = (np.abs(t[i] - t) / (t[i] + t)) @ w
    # exact symmetry and zero diagonal regardless of rounding
    ds = np.triu(ds, 1) + np.triu(ds, 1).T
    de = np.triu(de, 1) + np.triu(de, 1).T
    return DistanceMatrix(Y.workflows, ds, de, (ds + de) / 2)


# ----------------------------------------------------------------------- gaps


def gap_report(Y: OutcomeMatrix, weights=None) -> GapReport:
    """EX_static, EX_dynamic, the gap and per-workflow lower bounds, vectorised."""
    y = Y.bits.astype(bool)
    K, Q = y.shape
    if K < 1:
        raise ValueError("need at least one workflow")
    w = query_weights(Q, weights)
    p = y.astype(float) @ w
    i_star = int(np.argmax(p))
    union = y.any(axis=0)
    ex_static = float(p[i_star])
    d = (y != y[i_star]).astype(float) @ w
    lower = (p - p[i_star] + d) / 2
    uncovered = (union & ~y).astype(float) @ w
    # the gap is the union's mass outside the best row: a sum of nonnegative
    # terms, so rounding can never make it negative
    delta = float(uncovered[i_star])
    return GapReport(tuple(float(x) for x in p), ex_static, ex_static + delta, delta,
                     i_star, tuple(float(x) for x in lower), bool((uncovered == 0).any()))


def efficiency_report(Y: OutcomeMatrix, T: RuntimeMatrix) -> EfficiencyReport:
    """Per N (number of correct workflows), mean slowest and fastest correct runtime."""
    _check_pair(Y, T)
    y = Y.bits.astype(bool)
    K = y.shape[0]
    n_correct = y.sum(axis=0)
    t_max = np.where(y, T.values, -np.inf).max(axis=0)
    t_min = np.where(y, T.values, np.inf).min(axis=0)
    rows = []
    for n in range(1, K + 1):
        sel = n_correct == n
        count = int(sel.sum())
        if count == 0:
            rows.append(EfficiencyRow(n, 0, None, None, None))
            continue
        hi = math.fsum(t_max[sel]) / count
        lo = math.fsum(t_min[sel]) / count
        rows.append(EfficiencyRow(n, count, hi, lo, (hi - lo) / hi))
    return EfficiencyReport(tuple(rows))


def pareto_points(Y: OutcomeMatrix, T: RuntimeMatrix, weights=None) -> list[ParetoPoint]:
    """One point per workflow plus the oracle point (last).

    The oracle is charged only the fastest correct runtime on solvable queries.
    """
    _check_pair(Y, T)
    y = Y.bits.astype(bool)
    w = query_weights(y.shape[1], weights)
    points = [ParetoPoint(label, float(y[i] @ w), float(T.values[i] @ w))
              for i, label in enumerate(Y.workflows)]
    solvable = y.any(axis=0)
    acc = float(solvable @ w)
    if solvable.any():
        fastest = np.where(y, T.values, np.inf).min(axis=0)[solvable]
        ws = w[solvable]
        mean_t = float(fastest @ ws / ws.sum()) if ws.sum() > 0 else float(fastest.mean())
    else:
        mean_t = float("nan")
    points.append(ParetoPoint("oracle", acc, mean_t, True))
    return points


# ------------------------------------------------------------------ ingestion


def matrices_from_records(records: Iterable) -> tuple[OutcomeMatrix, RuntimeMatrix]:
    """Build matrices from execution log records (``task_id``, ``workflow``,
    ``stage``, ``elapsed_seconds``); a later record for the same cell wins.
    Records without a workflow or without an execution are skipped."""
    cells: dict[tuple[str, str], tuple[int, float]] = {}
    for r in records:
        if not r.workflow or r.stage is None:
            continue
        stage = getattr(r.stage, "value", r.stage)
        cells[(r.workflow, r.task_id)] = (int(stage == "result_correct"), float(r.elapsed_seconds))
    workflows = sorted({k[0] for k in cells})
    tasks = sorted({k[1] for k in cells})
    bits = np.zeros((len(workflows), len(tasks)), dtype=np.uint8)
    times = np.zeros((len(workflows), len(tasks)))
    wi = {w: i for i, w in enumerate(workflows)}
    ti = {t: j for j, t in enumerate(tasks)}
    if len(cells) != len(workflows) * len(tasks):
        raise ValueError("log does not cover every (workflow, task) cell")
    for (w, t), (b, s) in cells.items():
        bits[wi[w], ti[t]] = b
        times[wi[w], ti[t]] = s
    return OutcomeMatrix(workflows, tasks, bits), RuntimeMatrix(workflows, tasks, times)
