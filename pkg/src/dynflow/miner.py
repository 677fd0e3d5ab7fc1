"""Supervision mining: simplest-first search for the first correct workflow.

Tasks already solved by a lone generator, or whose gold SQL does not run, are
filtered out first. Templates are then tried in complexity order, and inside a
template the actor assignments are tried in canonical order.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .execution import ExecutionRecord
from .synth import mix64
from .workflow import (ActorPool, ActorRole, Task, Template, Workflow, complexity_order,
                       enumerate_workflows)

DEFAULT_BUDGET = 64


@dataclass(frozen=True)
class SupervisionRecord:
    task_id: str
    workflow: Workflow
    template_rank: int
    elapsed_seconds: float

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "template_id": self.workflow.template_id,
                "assignment": list(self.workflow.assignment),
                "template_rank": self.template_rank, "elapsed_seconds": self.elapsed_seconds}

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Deferred:
    """No template produced a correct workflow within budget."""

    task_id: str


@dataclass(frozen=True)
class MinerConfig:
    templates: tuple[Template, ...]
    per_template_budget: int = DEFAULT_BUDGET
    timeout_seconds: float = 300.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.per_template_budget < 1:
            raise ValueError("per_template_budget must be at least 1")
        ranks = [t.complexity_rank for t in self.templates]
        if ranks != sorted(ranks):
            raise ValueError("templates must be sorted by complexity rank")

    @classmethod
    def from_templates(cls, templates: Iterable[Template], **kw) -> "MinerConfig":
        return cls(tuple(complexity_order(templates)), **kw)


Executor = Callable[[Workflow, Task], ExecutionRecord]


def baseline_workflow(templates: Iterable[Template], pool: ActorPool) -> Workflow:
    """Template 0 with the first generator: the trivial single-step baseline."""
    single = [t for t in templates
              if len(t.slots) == 1 and t.slots[0] == ActorRole.GENERATOR]
    gens = pool.by_role(ActorRole.GENERATOR)
    if not single or not gens:
        raise ValueError("no single-generator template or no generator actor")
    return Workflow(single[0], (gens[0],))


def filter_trivial(tasks: Sequence[Task], executor: Executor, baseline: Workflow
                   ) -> tuple[list[Task], list[Task]]:
    """Split into (kept, dropped). Dropped: invalid gold SQL, or the baseline
    already answers correctly."""
    kept, dropped = [], []
    gold_ok = getattr(executor, "gold_ok", lambda t: True)
    for t in tasks:
        if not gold_ok(t) or executor(baseline, t).success:
            dropped.append(t)
        else:
            kept.append(t)
    return kept, dropped


def candidate_assignments(template: Template, pool: ActorPool, task: Task,
                          cfg: MinerConfig) -> list[Workflow]:
    """Canonical order; above budget, a seeded sample that keeps that order."""
    ws = enumerate_workflows([template], pool)
    if len(ws) <= cfg.per_template_budget:
        return ws
    rng = np.random.default_rng(mix64(cfg.seed, "miner", task.task_id, template.id))
    pick = np.sort(rng.choice(len(ws), size=cfg.per_template_budget, replace=False))
    return [ws[i] for i in pick]


def mine(task: Task, cfg: MinerConfig, pool: ActorPool, executor: Executor
         ) -> SupervisionRecord | Deferred:
    for rank, template in enumerate(cfg.templates):
        for w in candidate_assignments(template, pool, task, cfg):
            rec = executor(w, task)
            if rec.success:
                return SupervisionRecord(task.task_id, w, rank, rec.elapsed_seconds)
    return Deferred(task.task_id)


def mine_all(tasks: Sequence[Task], cfg: MinerConfig, pool: ActorPool, executor: Executor,
             workers: int = 1) -> list[SupervisionRecord | Deferred]:
    """Mine each task; tasks are independent so they may run in parallel.
    Output order follows ``tasks``."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(lambda t: mine(t, cfg, pool, executor), tasks))
    return [mine(t, cfg, pool, executor) for t in tasks]
