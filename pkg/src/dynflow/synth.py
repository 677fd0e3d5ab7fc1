"""Planted environments: seed-deterministic success and runtime tables over
(workflow, task) pairs, plus brute-force oracles over outcome tables.

Success of workflow ``w`` on task ``q``::

    u(q)      = hash01(seed, "u", q)                       shared by all workflows
    perturb   = 0.4 * (0.5 * T(template, difficulty)
                       + 0.3 * mean_slots A(actor, difficulty)
                       + 0.2 * N(w, q))                     each term in [-1, 1]
    success   = u(q) < clamp(base[tier(w)] + h * perturb, 0, 1)

With ``h = 0`` every workflow of a tier shares one success set. The template
and actor terms depend on the task only through its difficulty, so a policy
that sees the difficulty can learn which workflows suit which tasks; the cell
term is unlearnable noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterator, Mapping, Sequence

import numpy as np

from .analysis import GapReport, OutcomeMatrix, RuntimeMatrix
from .execution import (ActorOutput, Candidate, ExecutionRecord, ExecutionStage, ResultSet,
                        StageInput, result_signature, select_by_score)
from .workflow import (DIFFICULTIES, SQL_ROLES, ActorPool, ActorRole, ActorSpec, Binding,
                       Difficulty, Task,
                       Template, Workflow, actor_from_json, actor_to_json, canonical_string,
                       enumerate_workflows, builtin_templates, template_from_json, template_to_json)

_M64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


@lru_cache(maxsize=1 << 16)
def _fnv1a(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode():
        h = ((h ^ b) * 0x100000001B3) & _M64
    return h


def mix64(seed: int, *parts) -> int:
    """Fold ``parts`` (str or int) into a 64-bit hash keyed by ``seed``."""
    h = splitmix64(seed & _M64)
    for p in parts:
        h = splitmix64(h ^ (_fnv1a(p) if isinstance(p, str) else p & _M64))
    return h


def hash01(seed: int, *parts) -> float:
    """Uniform in [0, 1), 53 bits."""
    return (mix64(seed, *parts) >> 11) * 2.0 ** -53


def _signed(seed: int, *parts) -> float:
    return 2.0 * hash01(seed, *parts) - 1.0


@lru_cache(maxsize=1 << 12)
def _specialty(seed: int, kind: str, name: str, d: Difficulty) -> float:
    """+1 on one hashed difficulty, -1/3 on the others (zero mean across levels)."""
    favourite = DIFFICULTIES[int(hash01(seed, kind, name) * len(DIFFICULTIES))]
    return 1.0 if d == favourite else -1.0 / (len(DIFFICULTIES) - 1)


TIERS = ("light", "medium", "heavy")
DEFAULT_BASE_ACCURACY = {"light": 0.45, "medium": 0.5, "heavy": 0.55}
PERTURB_SCALE = 0.4


def tier_of(t: Template) -> str:
    n = len(t.slots)
    return "light" if n <= 2 else "medium" if n <= 4 else "heavy"


@dataclass(frozen=True)
class RuntimeModel:
    """Per-slot runtime = mean * factor, factor log-uniform in ``noise``.

    The mean is the actor's ``cost_hint`` when set, else the role mean. With
    ``shared_seconds`` set, every workflow takes the same time on a query
    (``shared_seconds * factor``, split evenly over its stages), so runtime
    carries no signal about which workflow ran.
    """

    role_means: Mapping[str, float] = field(default_factory=lambda: {
        "reducer": 2.0, "parser": 4.0, "generator": 6.0, "decomposer": 4.0,
        "scaler": 8.0, "optimizer": 5.0, "selector": 3.0})
    noise: tuple[float, float] = (0.5, 2.0)
    shared_seconds: float | None = None

    def __post_init__(self):
        lo, hi = self.noise
        if not 0 < lo <= hi:
            raise ValueError("noise range must satisfy 0 < lo <= hi")
        if self.shared_seconds is not None and self.shared_seconds <= 0:
            raise ValueError("shared_seconds must be positive")
        if any(v <= 0 for v in self.role_means.values()):
            raise ValueError("role means must be positive")

    def mean(self, actor: ActorSpec) -> float:
        return actor.cost_hint if actor.cost_hint else self.role_means[actor.role.value]

    def factor(self, u: float) -> float:
        lo, hi = self.noise
        return lo * (hi / lo) ** u

    def to_json(self) -> dict:
        return {"role_means": dict(self.role_means), "noise": list(self.noise),
                "shared_seconds": self.shared_seconds}

    @classmethod
    def from_json(cls, obj) -> "RuntimeModel":
        return cls(dict(obj["role_means"]), tuple(obj["noise"]), obj.get("shared_seconds"))


ANSWER_TABLE = "answers"


@dataclass(frozen=True)
class PlantedEnv:
    pool: ActorPool
    templates: tuple[Template, ...]
    tasks: tuple[Task, ...]
    seed: int
    h: float
    base_accuracy: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BASE_ACCURACY))
    runtime_model: RuntimeModel = field(default_factory=RuntimeModel)
    exec_fail_rate: float = 0.5
    db_ref: str = "planted"

    def __post_init__(self):
        if not 0.0 <= self.h <= 1.0:
            raise ValueError("h must lie in [0, 1]")
        if not self.tasks:
            raise ValueError("a planted environment needs at least one task")
        if set(self.base_accuracy) != set(TIERS):
            raise ValueError(f"base_accuracy needs keys {TIERS}")

    # -- indexing --------------------------------------------------------------

    @cached_property
    def workflows(self) -> tuple[Workflow, ...]:
        return tuple(enumerate_workflows(self.templates, self.pool))

    @cached_property
    def workflow_index(self) -> dict[str, int]:
        return {canonical_string(w): i for i, w in enumerate(self.workflows)}

    @cached_property
    def task_index(self) -> dict[str, int]:
        return {t.task_id: i for i, t in enumerate(self.tasks)}

    def _check(self, w: Workflow, task: Task) -> str:
        key = canonical_string(w)
        if key not in self.workflow_index:
            raise KeyError(f"workflow {key!r} is not in this environment")
        if task.task_id not in self.task_index:
            raise KeyError(f"task {task.task_id!r} is not in this environment")
        return key

    # -- planted quantities ----------------------------------------------------

    def perturb(self, w: Workflow, task: Task) -> float:
        d = task.difficulty
        t_eff = _specialty(self.seed, "tpl", w.template.id, d)
        a_eff = sum(_specialty(self.seed, "act", a, d) for a in w.assignment) / len(w.assignment)
        noise = _signed(self.seed, "cell", canonical_string(w), task.task_id)
        return PERTURB_SCALE * (0.5 * t_eff + 0.3 * a_eff + 0.2 * noise)

    def threshold(self, w: Workflow, task: Task) -> float:
        p = self.base_accuracy[tier_of(w.template)] + self.h * self.perturb(w, task)
        return min(1.0, max(0.0, p))

    def slot_runtime(self, w: Workflow, task: Task, slot: int) -> float:
        rm = self.runtime_model
        if rm.shared_seconds is not None:
            total = rm.shared_seconds * rm.factor(hash01(self.seed, "rt", task.task_id))
            return total / len(w.template.stages)
        actor = self.pool[w.assignment[slot]]
        u = hash01(self.seed, "rt", canonical_string(w), task.task_id, slot)
        return self.runtime_model.mean(actor) * self.runtime_model.factor(u)

    def stage_runtimes(self, w: Workflow, task: Task) -> list[float]:
        return [max(self.slot_runtime(w, task, s) for s in range(sl.start, sl.stop))
                for sl in w.template.stage_slices()]

    def runtime_bounds(self, w: Workflow) -> tuple[float, float]:
        lo, hi = self.runtime_model.noise
        if self.runtime_model.shared_seconds is not None:
            return self.runtime_model.shared_seconds * lo, self.runtime_model.shared_seconds * hi
        means = [self.runtime_model.mean(self.pool[a]) for a in w.assignment]
        stages = [means[sl] for sl in w.template.stage_slices()]
        return (sum(max(m) * lo for m in stages), sum(max(m) * hi for m in stages))

    def success(self, w: Workflow, task: Task) -> int:
        return int(hash01(self.seed, "u", task.task_id) < self.threshold(w, task))

    def outcome(self, w: Workflow, task: Task) -> tuple[int, float]:
        """Planted (success bit, runtime seconds)."""
        self._check(w, task)
        elapsed = 0.0
        for s in self.stage_runtimes(w, task):
            elapsed += s  # same accumulation order as run_workflow
        return self.success(w, task), elapsed

    def materialize(self) -> tuple[OutcomeMatrix, RuntimeMatrix]:
        K, Q = len(self.workflows), len(self.tasks)
        bits = np.zeros((K, Q), dtype=np.uint8)
        times = np.zeros((K, Q))
        for i, w in enumerate(self.workflows):
            for j, t in enumerate(self.tasks):
                bits[i, j], times[i, j] = self.outcome(w, t)
        labels = tuple(self.workflow_index)
        tids = tuple(t.task_id for t in self.tasks)
        return OutcomeMatrix(labels, tids, bits), RuntimeMatrix(labels, tids, times)

    @cached_property
    def matrices(self) -> tuple[OutcomeMatrix, RuntimeMatrix]:
        return self.materialize()

    # -- SQL side --------------------------------------------------------------

    def answer_value(self, task_id: str) -> int:
        return int(hash01(self.seed, "value", task_id) * 1_000_000)

    def database_dump(self) -> str:
        lines = [f"CREATE TABLE {ANSWER_TABLE} (task_id TEXT PRIMARY KEY, value INTEGER);"]
        for t in self.tasks:
            lines.append(f"INSERT INTO {ANSWER_TABLE} VALUES ('{t.task_id}', "
                         f"{self.answer_value(t.task_id)});")
        return "\n".join(lines) + "\n"

    def failure_kind(self, w: Workflow, task: Task) -> ExecutionStage:
        u = hash01(self.seed, "fail", task.task_id)
        return (ExecutionStage.EXECUTION_FAILED if u < self.exec_fail_rate
                else ExecutionStage.RESULT_INCORRECT)

    def planted_sql(self, w: Workflow, task: Task) -> str:
        success = self.success(w, task)
        where = f"FROM {ANSWER_TABLE} WHERE task_id = '{task.task_id}'"
        if success:
            return task.gold_sql
        if self.failure_kind(w, task) == ExecutionStage.EXECUTION_FAILED:
            return f"SELEC value {where.replace('FROM', 'FRM')}"
        return f"SELECT value + 1 {where}"

    def _lead_slot(self, w: Workflow) -> int:
        return next(i for i, r in enumerate(w.template.slots) if r in SQL_ROLES)

    def actor_output(self, actor: ActorSpec, slot: int, w: Workflow, task: Task,
                     stage_input: StageInput) -> ActorOutput:
        """Synthetic actor behaviour. The first SQL-emitting slot carries the
        planted final SQL with score 1; other emitters produce lower-scored
        decoys; optimizers pass candidates through; selectors take the argmax."""
        seconds = self.slot_runtime(w, task, slot)
        role = actor.role
        if role in (ActorRole.REDUCER, ActorRole.PARSER, ActorRole.DECOMPOSER):
            return ActorOutput({"note": f"{role.value} by {actor.id}"}, seconds)
        if role in SQL_ROLES:
            if slot == self._lead_slot(w):
                cand = Candidate(self.planted_sql(w, task), 1.0)
            else:
                score = 0.9 * hash01(self.seed, "score", canonical_string(w), task.task_id, slot)
                cand = Candidate(f"SELECT value - {slot + 1} FROM {ANSWER_TABLE} "
                                 f"WHERE task_id = '{task.task_id}'", score)
            return ActorOutput([cand], seconds)
        if role == ActorRole.OPTIMIZER:
            return ActorOutput([Candidate(c.sql, c.score) for c in stage_input.candidates], seconds)
        return ActorOutput(select_by_score(stage_input.candidates), seconds)

    def record(self, w: Workflow, task: Task, timeout: float = 300.0) -> ExecutionRecord:
        """The record :func:`run_workflow` produces for ``(w, task)`` when SQL
        time is not charged, computed without executing anything."""
        self._check(w, task)
        elapsed = 0.0
        for s in self.stage_runtimes(w, task):
            elapsed += s
            if elapsed > timeout:
                return ExecutionRecord(task.task_id, w, ExecutionStage.TIMEOUT, elapsed)
        sql = self.planted_sql(w, task)
        value = self.answer_value(task.task_id)
        if sql == task.gold_sql:
            return ExecutionRecord(task.task_id, w, ExecutionStage.RESULT_CORRECT, elapsed, sql,
                                   result_signature(ResultSet(("value",), ((value,),))))
        if self.failure_kind(w, task) == ExecutionStage.EXECUTION_FAILED:
            return ExecutionRecord(task.task_id, w, ExecutionStage.EXECUTION_FAILED, elapsed, sql)
        return ExecutionRecord(task.task_id, w, ExecutionStage.RESULT_INCORRECT, elapsed, sql,
                               result_signature(ResultSet(("value",), ((value + 1,),))))

    # -- serialization -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "h": self.h,
            "pool": [actor_to_json(a) for a in self.pool.actors],
            "templates": [template_to_json(t) for t in self.templates],
            "tasks": [{"task_id": t.task_id, "difficulty": t.difficulty.value}
                      for t in self.tasks],
            "runtime_model": self.runtime_model.to_json(),
            "base_accuracy": dict(self.base_accuracy),
            "exec_fail_rate": self.exec_fail_rate,
        }

    @classmethod
    def from_json(cls, obj) -> "PlantedEnv":
        tasks = tuple(planted_task(t["task_id"], t["difficulty"]) for t in obj["tasks"])
        return cls(
            pool=ActorPool(tuple(actor_from_json(a) for a in obj["pool"])),
            templates=tuple(template_from_json(t) for t in obj["templates"]),
            tasks=tasks, seed=int(obj["seed"]), h=float(obj["h"]),
            base_accuracy=obj.get("base_accuracy", DEFAULT_BASE_ACCURACY),
            runtime_model=RuntimeModel.from_json(obj["runtime_model"])
            if "runtime_model" in obj else RuntimeModel(),
            exec_fail_rate=obj.get("exec_fail_rate", 0.5),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def planted_task(task_id: str, difficulty, db_ref: str = "planted") -> Task:
    return Task(task_id=task_id, question=f"What is the planted value of {task_id}?",
                db_ref=db_ref,
                gold_sql=f"SELECT value FROM {ANSWER_TABLE} WHERE task_id = '{task_id}'",
                difficulty=difficulty)


def make_pool(roles: Mapping[str, int]) -> ActorPool:
    """Synthetic actors ``<role><n>`` for each role count."""
    return ActorPool(tuple(ActorSpec(f"{role}{i + 1}", ActorRole(role), Binding())
                           for role, n in sorted(roles.items()) for i in range(n)))


def plant_env(seed: int, k_templates: int = 10, pool_spec: Mapping[str, int] | ActorPool | None = None,
              q_tasks: int = 200, h: float = 1.0, runtime_model: RuntimeModel | None = None,
              base_accuracy: Mapping[str, float] | None = None,
              templates: Sequence[Template] | None = None) -> PlantedEnv:
    """Build a planted environment over the first ``k_templates`` templates.

    ``pool_spec`` maps role names to actor counts (default: one actor per role
    the templates use) or is a ready :class:`ActorPool`.
    """
    templates = tuple(templates if templates is not None else builtin_templates())
    if not 1 <= k_templates <= len(templates):
        raise ValueError(f"k_templates must lie in [1, {len(templates)}]")
    if q_tasks < 1:
        raise ValueError("q_tasks must be at least 1")
    templates = templates[:k_templates]
    if pool_spec is None:
        pool_spec = {r.value: 1 for r in sorted({r for t in templates for r in t.slots})}
    pool = pool_spec if isinstance(pool_spec, ActorPool) else make_pool(pool_spec)
    tasks = tuple(
        planted_task(f"q{i:04d}", DIFFICULTIES[int(hash01(seed, "difficulty", i) * 4)])
        for i in range(q_tasks))
    return PlantedEnv(pool, templates, tasks, seed, h,
                      dict(base_accuracy or DEFAULT_BASE_ACCURACY),
                      runtime_model or RuntimeModel())


class EnvExecutor:
    """Cached planted records; the fast path used for training and mining."""

    def __init__(self, env: PlantedEnv, timeout: float = 300.0):
        self.env = env
        self.timeout = timeout
        self._cache: dict[tuple[str, str], ExecutionRecord] = {}

    def __call__(self, w: Workflow, task: Task) -> ExecutionRecord:
        key = (canonical_string(w), task.task_id)
        rec = self._cache.get(key)
        if rec is None:
            rec = self._cache[key] = self.env.record(w, task, self.timeout)
        return rec

    def gold_ok(self, task: Task) -> bool:
        return task.task_id in self.env.task_index


# ------------------------------------------------------------------- oracles


def _weights(n: int, weights) -> list[float]:
    if weights is None:
        return [1.0 / n] * n
    w = [float(x) for x in weights]
    if len(w) != n or any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative, one per task, and sum to 1")
    return w


def brute_force_report(Y: OutcomeMatrix, weights=None) -> GapReport:
    """Static/dynamic accuracies and the gap by direct summation over cells."""
    rows = [[int(b) for b in row] for row in Y.bits]
    K, Q = len(rows), len(rows[0])
    w = _weights(Q, weights)
    p = [math.fsum(w[q] * rows[i][q] for q in range(Q)) for i in range(K)]
    i_star = max(range(K), key=lambda i: (p[i], -i))
    ex_static = p[i_star]
    union = [max(rows[i][q] for i in range(K)) for q in range(Q)]
    ex_dynamic = math.fsum(w[q] * union[q] for q in range(Q))
    lower = []
    for j in range(K):
        d = math.fsum(w[q] for q in range(Q) if rows[i_star][q] != rows[j][q])
        lower.append((p[j] - p[i_star] + d) / 2)
    covered = any(
        math.fsum(w[q] for q in range(Q) if union[q] and not rows[i][q]) == 0 for i in range(K))
    return GapReport(p=tuple(p), ex_static=ex_static, ex_dynamic=ex_dynamic,
                     delta=ex_dynamic - ex_static, i_star=i_star, lower_bounds=tuple(lower),
                     coverage=covered)


MAX_ENUMERATED_CELLS = 20


def enumerate_outcome_tables(K: int, Q: int) -> Iterator[OutcomeMatrix]:
    """Every K x Q bit table, in binary counting order (cell (i, q) is bit i*Q + q)."""
    if K < 1 or Q < 1 or K * Q > MAX_ENUMERATED_CELLS:
        raise ValueError(f"need 1 <= K, Q and K*Q <= {MAX_ENUMERATED_CELLS}")
    labels = tuple(f"W{i + 1}" for i in range(K))
    tids = tuple(f"q{j + 1}" for j in range(Q))
    shifts = np.arange(K * Q, dtype=np.int64)
    for n in range(1 << (K * Q)):
        bits = ((n >> shifts) & 1).astype(np.uint8).reshape(K, Q)
        yield OutcomeMatrix(labels, tids, bits)


def all_tables_array(K: int, Q: int) -> np.ndarray:
    """The same tables as :func:`enumerate_outcome_tables`, stacked."""
    if K < 1 or Q < 1 or K * Q > MAX_ENUMERATED_CELLS:
        raise ValueError(f"need 1 <= K, Q and K*Q <= {MAX_ENUMERATED_CELLS}")
    n = np.arange(1 << (K * Q), dtype=np.int64)[:, None]
    return ((n >> np.arange(K * Q)) & 1).astype(np.uint8).reshape(-1, K, Q)
