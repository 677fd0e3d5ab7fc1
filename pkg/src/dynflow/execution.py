"""Workflow execution, execution accuracy and majority voting.

Actors run stage by stage. Synthetic actors are answered by a planted
environment and report a planted duration; external actors are child
processes speaking newline-delimited JSON and are charged wall-clock time.
The workflow's elapsed time is the sum over stages of the stage duration,
where a parallel group costs its slowest member.
"""
from __future__ import annotations

import hashlib
import json
import math
import queue
import sqlite3
import subprocess
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from .workflow import ActorPool, ActorRole, ActorSpec, Task, Workflow

NUMERIC_TOL = 1e-6


class ExecutionStage(str, Enum):
    """Pipeline verdicts, in order of progress."""

    FORMAT_INVALID = "format_invalid"
    TIMEOUT = "timeout"
    EXECUTION_FAILED = "execution_failed"
    RESULT_INCORRECT = "result_incorrect"
    RESULT_CORRECT = "result_correct"

    @property
    def order(self) -> int:
        return list(ExecutionStage).index(self)


_SQL_STAGES = {ExecutionStage.EXECUTION_FAILED, ExecutionStage.RESULT_INCORRECT,
               ExecutionStage.RESULT_CORRECT}
_SIG_STAGES = {ExecutionStage.RESULT_INCORRECT, ExecutionStage.RESULT_CORRECT}


@dataclass(frozen=True)
class ExecutionRecord:
    task_id: str
    workflow: Workflow | None
    stage: ExecutionStage
    elapsed_seconds: float = 0.0
    produced_sql: str | None = None
    result_signature: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage", ExecutionStage(self.stage))
        if self.elapsed_seconds < 0 or math.isnan(self.elapsed_seconds):
            raise ValueError("elapsed_seconds must be nonnegative")
        if (self.produced_sql is not None) != (self.stage in _SQL_STAGES):
            raise ValueError(f"produced_sql presence inconsistent with stage {self.stage.value}")
        if (self.result_signature is not None) != (self.stage in _SIG_STAGES):
            raise ValueError(f"result_signature presence inconsistent with stage {self.stage.value}")
        if self.workflow is None and self.stage != ExecutionStage.FORMAT_INVALID:
            raise ValueError("only format_invalid records may lack a workflow")

    @property
    def success(self) -> bool:
        return self.stage == ExecutionStage.RESULT_CORRECT


# ------------------------------------------------------------------ result sets


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        n = len(self.columns)
        if any(len(r) != n for r in self.rows):
            raise ValueError("row arity does not match column count")


def _norm_cell(v):
    if v is None:
        return (0, 0.0)
    if isinstance(v, bool):
        return (1, float(v))
    if isinstance(v, (int, float)):
        return (1, float(v))
    if isinstance(v, bytes):
        return (3, v.hex())
    return (2, str(v).strip())


def _cells_equal(a, b) -> bool:
    if a[0] != b[0]:
        return False
    if a[0] == 1:
        x, y = a[1], b[1]
        if math.isnan(x) or math.isnan(y):
            return math.isnan(x) and math.isnan(y)
        return x == y or abs(x - y) <= NUMERIC_TOL
    return a[1] == b[1]


def _rows_equal(r, s) -> bool:
    return all(_cells_equal(a, b) for a, b in zip(r, s))


def compare_results(predicted: ResultSet, gold: ResultSet) -> bool:
    """Bag equality of rows: order ignored, numbers within 1e-6, strings trimmed.

    Column names are ignored; column counts must match.
    """
    if len(predicted.columns) != len(gold.columns) or len(predicted.rows) != len(gold.rows):
        return False
    p = sorted(tuple(_norm_cell(v) for v in r) for r in predicted.rows)
    g = sorted(tuple(_norm_cell(v) for v in r) for r in gold.rows)
    if all(_rows_equal(a, b) for a, b in zip(p, g)):
        return True
    # Near-equal floats can sort differently; fall back to greedy matching.
    unused = list(range(len(g)))
    for row in p:
        for k, j in enumerate(unused):
            if _rows_equal(row, g[j]):
                del unused[k]
                break
        else:
            return False
    return True


def result_signature(rs: ResultSet) -> str:
    """Order-insensitive digest; floats rounded to 6 decimals."""
    rows = []
    for r in rs.rows:
        cells = []
        for v in r:
            kind, val = _norm_cell(v)
            if kind == 1:
                val = round(val, 6) + 0.0
            cells.append([kind, val])
        rows.append(json.dumps(cells))
    payload = json.dumps([len(rs.columns), sorted(rows)])
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# --------------------------------------------------------------------- backends


class BackendError(Exception):
    """The engine rejected the SQL."""


class BudgetExceeded(Exception):
    """Work was abandoned because the wall-clock budget ran out."""


class RelationalBackend(Protocol):
    serial: bool

    def execute(self, sql: str, db_ref: str, budget: float) -> ResultSet: ...


def count_statements(sql: str) -> int:
    """Number of non-empty ``;``-separated statements, ignoring quoted text."""
    n, buf, quote = 0, [], None
    for ch in sql:
        if quote:
            buf.append(ch)
            if ch == quote:
                quote = None
        elif ch in ("'", '"'):
            quote = ch
            buf.append(ch)
        elif ch == ";":
            n += bool("".join(buf).strip())
            buf = []
        else:
            buf.append(ch)
    return n + bool("".join(buf).strip())


class SqliteBackend:
    """Embedded SQLite over read-only databases built from SQL dumps.

    ``db_ref`` names either a key of ``dumps`` (SQL text), a ``.sql`` dump file,
    or a SQLite database file. Each thread owns its connections, so concurrent
    ``execute`` calls are safe.
    """

    serial = False

    def __init__(self, dumps: Mapping[str, str] | None = None):
        self.dumps = dict(dumps or {})
        self._local = threading.local()

    def _connect(self, db_ref: str) -> sqlite3.Connection:
        conns = getattr(self._local, "conns", None)
        if conns is None:
            conns = self._local.conns = {}
        if db_ref not in conns:
            if db_ref in self.dumps:
                conn = sqlite3.connect(":memory:", check_same_thread=False)
                conn.executescript(self.dumps[db_ref])
            else:
                path = Path(db_ref)
                if not path.exists():
                    raise BackendError(f"database {db_ref!r} not found")
                if path.suffix == ".sql":
                    conn = sqlite3.connect(":memory:", check_same_thread=False)
                    conn.executescript(path.read_text())
                else:
                    conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True,
                                           check_same_thread=False)
            conns[db_ref] = conn
        return conns[db_ref]

    def execute(self, sql: str, db_ref: str, budget: float = math.inf) -> ResultSet:
        if count_statements(sql) != 1:
            raise BackendError("expected exactly one SQL statement")
        conn = self._connect(db_ref)
        deadline = time.monotonic() + budget if math.isfinite(budget) else None
        if deadline is not None:
            conn.set_progress_handler(lambda: int(time.monotonic() > deadline), 1000)
        try:
            cur = conn.execute(sql)
            rows = cur.fetchall()
            cols = tuple(d[0] for d in cur.description or ())
        except sqlite3.OperationalError as exc:
            if deadline is not None and "interrupted" in str(exc):
                raise BudgetExceeded(str(exc)) from None
            raise BackendError(str(exc)) from None
        except sqlite3.Error as exc:
            raise BackendError(str(exc)) from None
        except sqlite3.Warning as exc:
            raise BackendError(str(exc)) from None
        finally:
            if deadline is not None:
                conn.set_progress_handler(None, 1000)
        return ResultSet(cols, rows)


_backend_locks: dict[int, threading.Lock] = defaultdict(threading.Lock)


def _execute(backend: RelationalBackend, sql: str, db_ref: str, budget: float) -> ResultSet:
    if getattr(backend, "serial", False):
        with _backend_locks[id(backend)]:
            return backend.execute(sql, db_ref, budget)
    return backend.execute(sql, db_ref, budget)


# ------------------------------------------------------------- external actors


class ActorProcessError(Exception):
    """An actor failed or answered with a malformed frame."""


class ExternalActorClient:
    """One child process per actor; one JSON line out, one JSON line back."""

    def __init__(self, command: Sequence[str], max_restarts: int = 1):
        self.command = list(command)
        self.max_restarts = max_restarts
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._lock = threading.Lock()

    def _start(self):
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                      stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                      text=True, bufsize=1)
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc, lines):
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def _kill(self):
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def close(self):
        with self._lock:
            if self._proc is not None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass
                self._kill()

    def _exchange(self, line: str, timeout: float) -> str | None:
        if self._proc is None or self._proc.poll() is not None:
            self._start()
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            return None
        try:
            return self._lines.get(timeout=None if math.isinf(timeout) else max(timeout, 0.0))
        except queue.Empty:
            self._kill()
            raise BudgetExceeded("actor did not answer within budget") from None

    def request(self, payload: dict, timeout: float = math.inf) -> dict:
        line = json.dumps(payload) + "\n"
        deadline = time.monotonic() + timeout
        with self._lock:
            for attempt in range(self.max_restarts + 1):
                reply = self._exchange(line, deadline - time.monotonic())
                if reply is not None:
                    break
                self._kill()  # crashed: restart on the next attempt
            else:
                raise ActorProcessError(f"actor process {self.command!r} crashed")
        try:
            msg = json.loads(reply)
        except json.JSONDecodeError:
            raise ActorProcessError(f"malformed response frame: {reply[:80]!r}") from None
        if not isinstance(msg, dict):
            raise ActorProcessError("response frame is not an object")
        if "error" in msg:
            raise ActorProcessError(str(msg["error"]))
        if "output" not in msg:
            raise ActorProcessError("response frame lacks 'output'")
        return msg


class ActorClients:
    """Lazily started external clients, one per actor id."""

    def __init__(self):
        self._clients: dict[str, ExternalActorClient] = {}
        self._lock = threading.Lock()

    def get(self, actor: ActorSpec) -> ExternalActorClient:
        with self._lock:
            if actor.id not in self._clients:
                self._clients[actor.id] = ExternalActorClient(actor.binding.command)
            return self._clients[actor.id]

    def close(self):
        for c in self._clients.values():
            c.close()
        self._clients.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ----------------------------------------------------------------- actor calls


@dataclass
class Candidate:
    sql: str
    score: float | None = None


@dataclass
class StageInput:
    context: dict = field(default_factory=dict)
    candidates: list[Candidate] = field(default_factory=list)


@dataclass
class ActorOutput:
    """``value`` is a dict (context enrichment), a list of candidates
    (generator/scaler/optimizer) or an int (selector's pick)."""

    value: Any
    seconds: float


class SyntheticActors(Protocol):
    def actor_output(self, actor: ActorSpec, slot: int, workflow: Workflow, task: Task,
                     stage_input: StageInput) -> ActorOutput: ...


def select_by_score(candidates: Sequence[Candidate]) -> int:
    """Index of the highest-scoring candidate; the earliest wins ties."""
    best, best_score = 0, -math.inf
    for i, c in enumerate(candidates):
        s = -math.inf if c.score is None else c.score
        if s > best_score:
            best, best_score = i, s
    return best


def _coerce_external(actor: ActorSpec, out, stage_input: StageInput):
    role = actor.role
    cands = stage_input.candidates
    if role in (ActorRole.REDUCER, ActorRole.PARSER, ActorRole.DECOMPOSER):
        return out if isinstance(out, dict) else {"output": out}
    if role in (ActorRole.GENERATOR, ActorRole.SCALER):
        sqls = [out] if isinstance(out, str) else out
        if not isinstance(sqls, list) or not sqls or not all(isinstance(s, str) for s in sqls):
            raise ActorProcessError(f"{role.value} must return SQL text or a list of SQL")
        return [Candidate(s) for s in sqls]
    if role == ActorRole.OPTIMIZER:
        sqls = [out] if isinstance(out, str) else out
        if (not isinstance(sqls, list) or len(sqls) != len(cands)
                or not all(isinstance(s, str) for s in sqls)):
            raise ActorProcessError("optimizer must return one rewrite per candidate")
        return [Candidate(s, c.score) for s, c in zip(sqls, cands)]
    # selector
    if isinstance(out, bool) or not isinstance(out, (int, str)):
        raise ActorProcessError("selector must return an index or a candidate SQL")
    if isinstance(out, str):
        for i, c in enumerate(cands):
            if c.sql == out:
                return i
        raise ActorProcessError("selector returned SQL that is not a candidate")
    if not 0 <= out < len(cands):
        raise ActorProcessError("selector index out of range")
    return out


def invoke_actor(actor: ActorSpec, stage_input: StageInput, task: Task, budget: float, *,
                 workflow: Workflow | None = None, slot: int = 0,
                 synthetic: SyntheticActors | None = None,
                 clients: ActorClients | None = None) -> ActorOutput:
    """Run one actor on the current stage input.

    Raises :class:`ActorProcessError` or :class:`BudgetExceeded`.
    """
    if budget <= 0:
        raise BudgetExceeded("no budget left")
    if actor.binding.kind == "synthetic":
        if synthetic is None:
            raise ActorProcessError(f"actor {actor.id!r} is synthetic but no environment is attached")
        return synthetic.actor_output(actor, slot, workflow, task, stage_input)
    if clients is None:
        raise ActorProcessError(f"actor {actor.id!r} is external but no client pool is attached")
    request = {
        "role": actor.role.value, "task_id": task.task_id, "question": task.question,
        "schema": task.db_ref, "knowledge": task.knowledge or "",
        "context": stage_input.context, "candidates": [c.sql for c in stage_input.candidates],
    }
    start = time.monotonic()
    msg = clients.get(actor).request(request, timeout=budget)
    seconds = time.monotonic() - start
    return ActorOutput(_coerce_external(actor, msg["output"], stage_input), seconds)


# --------------------------------------------------------------- run_workflow


def _apply_stage(stage_roles, actors, outputs, state: StageInput) -> StageInput:
    role = stage_roles[0]
    if role in (ActorRole.REDUCER, ActorRole.PARSER, ActorRole.DECOMPOSER):
        ctx = dict(state.context)
        for r, a, out in zip(stage_roles, actors, outputs):
            ctx.setdefault(r.value, []).append({"actor": a.id, "output": out.value})
        return StageInput(ctx, list(state.candidates))
    if role in (ActorRole.GENERATOR, ActorRole.SCALER):
        cands = list(state.candidates)
        for out in outputs:
            cands.extend(out.value)
        return StageInput(state.context, cands)
    if role == ActorRole.OPTIMIZER:
        return StageInput(state.context, [c for out in outputs for c in out.value])
    return StageInput(state.context, [state.candidates[out.value] for out in outputs])


def run_workflow(w: Workflow, task: Task, backend: RelationalBackend, timeout: float = 300.0, *,
                 pool: ActorPool, synthetic: SyntheticActors | None = None,
                 clients: ActorClients | None = None, workers: int = 1,
                 charge_sql_time: bool = True) -> ExecutionRecord:
    """Execute ``w`` on ``task``; every failure is encoded in the record's stage."""
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    elapsed = 0.0
    state = StageInput()
    slot = 0

    def timed_out(seconds):
        return ExecutionRecord(task.task_id, w, ExecutionStage.TIMEOUT, max(seconds, timeout))

    def failed(sql=""):
        return ExecutionRecord(task.task_id, w, ExecutionStage.EXECUTION_FAILED, elapsed, sql)

    for stage, actor_ids in w.stage_actors():
        # Mixed groups such as [generator, scaler] are treated by their first role;
        # both emit candidates, so the stage semantics agree.
        actors = [pool[a] for a in actor_ids]
        budget = timeout - elapsed
        calls = [(a, slot + k) for k, a in enumerate(actors)]

        def call(item, _state=state, _budget=budget):
            a, s = item
            return invoke_actor(a, _state, task, _budget, workflow=w, slot=s,
                                synthetic=synthetic, clients=clients)

        try:
            if workers > 1 and len(calls) > 1:
                with ThreadPoolExecutor(max_workers=min(workers, len(calls))) as ex:
                    outputs = list(ex.map(call, calls))
            else:
                outputs = [call(c) for c in calls]
        except BudgetExceeded:
            return timed_out(timeout)
        except ActorProcessError:
            return failed()
        slot += len(actors)
        elapsed += max(o.seconds for o in outputs)
        if elapsed > timeout:
            return timed_out(elapsed)
        try:
            state = _apply_stage(stage.roles, actors, outputs, state)
        except (IndexError, TypeError):
            return failed()

    sqls = [c.sql for c in state.candidates]
    if len(sqls) != 1 or count_statements(sqls[0]) != 1:
        return failed(";\n".join(sqls))
    sql = sqls[0]
    start = time.monotonic()
    try:
        predicted = _execute(backend, sql, task.db_ref, timeout - elapsed)
    except BudgetExceeded:
        return timed_out(timeout)
    except BackendError:
        if charge_sql_time:
            elapsed += time.monotonic() - start
        return failed(sql)
    if charge_sql_time:
        elapsed += time.monotonic() - start
    if elapsed > timeout:
        return timed_out(elapsed)
    sig = result_signature(predicted)
    try:
        gold = _execute(backend, task.gold_sql, task.db_ref, math.inf)
        correct = compare_results(predicted, gold)
    except (BackendError, BudgetExceeded):
        correct = False
    stage = ExecutionStage.RESULT_CORRECT if correct else ExecutionStage.RESULT_INCORRECT
    return ExecutionRecord(task.task_id, w, stage, elapsed, sql, sig)


# ------------------------------------------------------------- majority voting


def majority_vote(records: Sequence[ExecutionRecord]) -> ExecutionRecord:
    """Plurality over result signatures.

    Ties go to the group with the smallest total elapsed time, then to the group
    seen first. Without any signature the first record is returned.
    """
    if not records:
        raise ValueError("majority_vote needs at least one record")
    if len({r.task_id for r in records}) != 1:
        raise ValueError("records span several tasks")
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        if r.result_signature is not None:
            groups.setdefault(r.result_signature, []).append(i)
    if not groups:
        return records[0]

    def key(members):
        return (-len(members), math.fsum(records[i].elapsed_seconds for i in members), members[0])

    best = min(groups.values(), key=key)
    return records[best[0]]


class EngineExecutor:
    """``executor(workflow, task)`` over the full engine; also checks gold SQL."""

    def __init__(self, backend: RelationalBackend, pool: ActorPool, timeout: float = 300.0, *,
                 synthetic: SyntheticActors | None = None, clients: ActorClients | None = None,
                 workers: int = 1, charge_sql_time: bool = True):
        self.backend = backend
        self.pool = pool
        self.timeout = timeout
        self.synthetic = synthetic
        self.clients = clients
        self.workers = workers
        self.charge_sql_time = charge_sql_time

    def __call__(self, w: Workflow, task: Task) -> ExecutionRecord:
        return run_workflow(w, task, self.backend, self.timeout, pool=self.pool,
                            synthetic=self.synthetic, clients=self.clients, workers=self.workers,
                            charge_sql_time=self.charge_sql_time)

    def gold_ok(self, task: Task) -> bool:
        if count_statements(task.gold_sql) != 1:
            return False
        try:
            _execute(self.backend, task.gold_sql, task.db_ref, math.inf)
        except (BackendError, BudgetExceeded):
            return False
        return True
