import sys

import numpy as np
import pytest

from dynflow.synth import RuntimeModel, plant_env
from dynflow.workflow import (DIFFICULTIES, ActorPool, ActorRole, ActorSpec, Task,
                              canonical_string, complexity_order, enumerate_workflows,
                              builtin_templates)


@pytest.fixture(scope="session")
def templates():
    return builtin_templates()


@pytest.fixture(scope="session")
def by_id(templates):
    return {t.id: t for t in templates}


_PREFIX = {"reducer": "r", "parser": "p", "generator": "g", "decomposer": "d",
           "scaler": "sc", "optimizer": "o", "selector": "s"}


def pool_of(**counts) -> ActorPool:
    return ActorPool(tuple(ActorSpec(f"{_PREFIX[role]}{i + 1}", ActorRole(role))
                           for role, n in sorted(counts.items()) for i in range(n)))


@pytest.fixture(scope="session")
def small_env():
    return plant_env(3, q_tasks=40, runtime_model=RuntimeModel(shared_seconds=20.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TableExecutor:
    """Executor over an explicit set of correct (workflow, task) cells."""

    def __init__(self, correct, bad_gold=()):
        self.correct = set(correct)
        self.bad_gold = set(bad_gold)
        self.calls = 0

    def __call__(self, w, task):
        from dynflow.execution import ExecutionRecord
        self.calls += 1
        key = (canonical_string(w), task.task_id)
        if key in self.correct:
            return ExecutionRecord(task.task_id, w, "result_correct", 1.0, "SELECT 1", "ok")
        return ExecutionRecord(task.task_id, w, "result_incorrect", 1.0, "SELECT 2", "bad")

    def gold_ok(self, task):
        return task.task_id not in self.bad_gold


def plant_miner_tasks(seed, n, templates, pool, unsolvable_rate=0.2):
    """Tasks with a drawn minimal template rank (None = unsolvable).

    Correct cells sit only at ranks >= the minimum, with at least one at it.
    Returns (tasks, executor, minimal_rank_by_task).
    """
    rng = np.random.default_rng(seed)
    ordered = complexity_order(templates)
    by_rank = [enumerate_workflows([t], pool) for t in ordered]
    tasks, correct, truth = [], [], {}
    for i in range(n):
        t = Task(f"m{i}", f"question {i}", "db", "SELECT 1", DIFFICULTIES[i % 4])
        tasks.append(t)
        if rng.random() < unsolvable_rate:
            truth[t.task_id] = None
            continue
        m = int(rng.integers(1, len(ordered)))  # rank 0 is the trivial baseline
        truth[t.task_id] = m
        first = by_rank[m][int(rng.integers(len(by_rank[m])))]
        correct.append((canonical_string(first), t.task_id))
        for r in range(m, len(ordered)):
            for w in by_rank[r]:
                if rng.random() < 0.1:
                    correct.append((canonical_string(w), t.task_id))
    return tasks, TableExecutor(correct), truth


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("#")[1].split()[0])):
        terminalreporter.write_line(line)
