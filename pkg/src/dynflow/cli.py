"""``dynflow`` command line: simulate, run, analyze, train, mine, report.

Exit codes: 0 ok, 2 configuration error, 3 input error, 4 invariant violation.
Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as dio
from .analysis import (distance_matrix, efficiency_report, gap_report, matrices_from_records,
                       pareto_points)
from .execution import EngineExecutor, ExecutionRecord, ExecutionStage, SqliteBackend
from .miner import Deferred, MinerConfig, baseline_workflow, filter_trivial, mine_all
from .policy import FeatureLayout, GrpoConfig, WorkflowSpace, evaluate_ex, train
from .reward import EnvJudge, RewardConfig, staged_reward
from .synth import EnvExecutor, PlantedEnv, RuntimeModel, plant_env
from .workflow import (AnswerFormatError, MaskVector, canonical_string, load_registry,
                       parse_answer)

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


@dataclass
class RunConfig:
    """Settings shared by subcommands; ``--config`` JSON supplies defaults."""

    out: Path = Path(".")
    seed: int = 0
    workers: int = 1
    deterministic: bool = False
    registry: Path | None = None
    env: Path | None = None
    reward: RewardConfig = field(default_factory=RewardConfig)
    grpo: dict = field(default_factory=dict)

    KEYS = ("out", "seed", "workers", "deterministic", "registry", "env", "reward", "grpo")

    @classmethod
    def load(cls, path: str | Path) -> dict:
        p = Path(path)
        if not p.exists():
            raise InputError(f"config file {path} not found")
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = set(obj) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        for key in ("registry", "env"):
            if obj.get(key) is not None and not Path(obj[key]).exists():
                raise ConfigError(f"{path}: {key} path {obj[key]} does not exist")
        return obj


def _default_workers() -> int:
    raw = os.environ.get("DYNFLOW_WORKERS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DYNFLOW_WORKERS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("DYNFLOW_WORKERS must be at least 1")
    return n


def _timestamp(deterministic: bool) -> str | None:
    return None if deterministic else datetime.now(timezone.utc).isoformat(timespec="seconds")


def _parse_pairs(text: str | None, kind=float) -> dict | None:
    if text is None:
        return None
    out = {}
    for part in text.split(","):
        k, sep, v = part.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {part!r}")
        out[k.strip()] = kind(v)
    return out


def _range(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(",")
    return float(lo), float(hi)


def _load_env(path) -> PlantedEnv:
    if path is None:
        raise ConfigError("--env is required")
    p = Path(path)
    if not p.exists():
        raise InputError(f"environment file {path} not found")
    try:
        return PlantedEnv.from_json(json.loads(p.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(obj):
    print(json.dumps(dio._round12(obj), sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    try:
        roles = _parse_pairs(args.pool, int)
        rm = RuntimeModel(noise=_range(args.noise), shared_seconds=args.shared_seconds)
        templates = load_registry(args.registry).templates if args.registry else None
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None
    try:
        env = plant_env(args.seed, args.k, roles, args.q, args.h, rm, templates=templates)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if args.exec_fail_rate is not None:
        env = PlantedEnv(env.pool, env.templates, env.tasks, env.seed, env.h, env.base_accuracy,
                         env.runtime_model, args.exec_fail_rate)
    out = _out(args)
    (out / "env.json").write_text(env.dumps())
    Y, T = env.matrices
    dio.write_outcomes_csv(Y, out / "outcomes.csv")
    dio.write_runtimes_csv(T, out / "runtimes.csv")
    g = gap_report(Y)
    _say({"workflows": len(env.workflows), "tasks": len(env.tasks),
          "ex_static": g.ex_static, "ex_dynamic": g.ex_dynamic, "delta": g.delta})
    return EXIT_OK


def _executor(env: PlantedEnv, args):
    if args.executor == "planted":
        return EnvExecutor(env, args.timeout)
    backend = SqliteBackend({env.db_ref: env.database_dump()})
    return EngineExecutor(backend, env.pool, args.timeout, synthetic=env,
                          charge_sql_time=not args.deterministic)


def _read_answers(path):
    p = Path(path)
    if not p.exists():
        raise InputError(f"answers file {path} not found")
    rows = []
    with open(p, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append((str(obj["task_id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError):
                raise InputError(f"{path}: line {n} is not a {{task_id, text}} object") from None
    return rows


def cmd_run(args) -> int:
    env = _load_env(args.env)
    execute = _executor(env, args)
    cfg = RewardConfig(args.timeout)
    full = MaskVector.full(env.pool).as_dict()
    if args.answers:
        by_id = {t.task_id: t for t in env.tasks}
        jobs = []
        for task_id, text in _read_answers(args.answers):
            if task_id not in by_id:
                raise InputError(f"answer for unknown task {task_id!r}")
            try:
                jobs.append((parse_answer(text, env.pool, env.templates), by_id[task_id]))
            except AnswerFormatError:
                jobs.append((None, by_id[task_id]))
    else:
        jobs = [(w, t) for w in env.workflows for t in env.tasks]

    def one(job):
        w, t = job
        if w is None:
            rec = ExecutionRecord(t.task_id, None, ExecutionStage.FORMAT_INVALID)
            return rec, staged_reward(False, None, cfg)
        rec = execute(w, t)
        return rec, staged_reward(True, rec, cfg)

    out = _out(args)
    with dio.log_sink(out / "log.jsonl") as writer:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            for rec, bd in pool.map(one, jobs):
                writer.write(dio.record_to_log(rec, bd, mask=full,
                                               timestamp=_timestamp(args.deterministic)))
    _say({"records": len(jobs)})
    return EXIT_OK


def _matrices(args):
    try:
        if args.log:
            if not Path(args.log).exists():
                raise InputError(f"log file {args.log} not found")
            reader = dio.LogReader(args.log, lenient=args.lenient)
            seen = [0]

            def counted():
                for rec in reader:
                    seen[0] += 1
                    yield rec
            Y, T = matrices_from_records(counted())
            return Y, T, {"records": seen[0], "skipped_lines": reader.skipped}
        if not (args.outcomes and args.runtimes):
            raise ConfigError("give --log or both --outcomes and --runtimes")
        for p in (args.outcomes, args.runtimes):
            if not Path(p).exists():
                raise InputError(f"matrix file {p} not found")
        Y, T = dio.read_outcomes_csv(args.outcomes), dio.read_runtimes_csv(args.runtimes)
        if Y.workflows != T.workflows or Y.tasks != T.tasks:
            raise InputError("outcome and runtime matrices are labelled differently")
        return Y, T, {}
    except (dio.LogFormatError, ValueError) as e:
        raise InputError(str(e)) from None


def cmd_analyze(args) -> int:
    Y, T, read = _matrices(args)
    out = _out(args)
    g = gap_report(Y)
    dio.write_distance_csv(distance_matrix(Y, T), out / "distance_matrix.csv")
    dio.write_gap_json(g, Y.workflows, out / "gap_report.json")
    dio.write_efficiency_csv(efficiency_report(Y, T), out / "efficiency_report.csv")
    dio.write_pareto_csv(pareto_points(Y, T), out / "pareto.csv")
    _say({"workflows": len(Y.workflows), "tasks": len(Y.tasks), **read,
          "ex_static": g.ex_static, "ex_dynamic": g.ex_dynamic, "delta": g.delta})
    return EXIT_OK


def _split(env: PlantedEnv):
    # even positions train, odd positions are held out
    return env.tasks[0::2], env.tasks[1::2]


def cmd_train(args) -> int:
    env = _load_env(args.env)
    try:
        cfg = GrpoConfig(G=args.G, clip=args.clip, beta=args.beta, learning_rate=args.lr,
                         steps=args.steps, seed=args.seed, masking=not args.no_masking,
                         pseudo_probability=args.p, judge_noise=args.judge_noise,
                         timeout_seconds=args.timeout, workers=args.workers)
        RewardConfig(args.timeout, args.p, args.judge_noise)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    layout = FeatureLayout.build(env.templates, env.pool, interactions=not args.no_interactions)
    space = WorkflowSpace(env.templates, env.pool, layout)
    execute = EnvExecutor(env, args.timeout)
    judge = EnvJudge(env, args.judge_noise, args.timeout)
    tr, ho = _split(env)
    out = _out(args)
    rcfg = cfg.reward_config
    with dio.log_sink(out / "train_log.jsonl") as writer:
        def log_group(step, group):
            for k, c in enumerate(group.chosen):
                w = canonical_string(group.candidates[c])
                mask = group.mask.as_dict()
                ts = _timestamp(args.deterministic)
                if group.lambdas[k]:
                    rec = group.records[k]
                    writer.write(dio.record_to_log(rec, staged_reward(True, rec, rcfg),
                                                   mask=mask, timestamp=ts))
                else:
                    writer.write(dio.LogRecord(group.task_id, w, None, None, None,
                                               float(group.rewards[k]), 0, mask, ts))

        theta, trace = train(cfg, tr, space, execute, judge, ho, on_group=log_group)
    dio.write_checkpoint(out / "checkpoint.json", theta, layout, cfg.steps, cfg.seed,
                         cfg.to_json())
    dio.write_trace_csv(trace, out / "trace.csv")
    final = trace[-1].holdout_ex if trace else evaluate_ex(theta, ho, space, execute)
    _say({"steps": cfg.steps, "holdout_ex": final})
    return EXIT_OK


def cmd_mine(args) -> int:
    env = _load_env(args.env)
    try:
        cfg = MinerConfig.from_templates(env.templates, per_template_budget=args.budget,
                                         timeout_seconds=args.timeout, seed=args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    execute = _executor(env, args)
    kept, dropped = filter_trivial(env.tasks, execute, baseline_workflow(env.templates, env.pool))
    results = mine_all(kept, cfg, env.pool, execute, workers=args.workers)
    records = [r for r in results if not isinstance(r, Deferred)]
    dio.write_supervision(records, _out(args) / "supervision.jsonl")
    _say({"dropped": len(dropped), "kept": len(kept), "mined": len(records),
          "deferred": len(results) - len(records)})
    return EXIT_OK


def cmd_report(args) -> int:
    env = _load_env(args.env)
    out = _out(args)
    Y, T = env.matrices
    dio.write_pareto_csv(pareto_points(Y, T), out / "pareto.csv")
    dio.write_efficiency_csv(efficiency_report(Y, T), out / "efficiency_report.csv")
    D = distance_matrix(Y, T)
    n = len(D.labels)
    dio.write_rows_csv(out / "distance_long.csv", ["i", "j", "d_sample", "d_efficiency", "d"],
                       ((D.labels[i], D.labels[j], D.d_sample[i, j], D.d_efficiency[i, j],
                         D.d[i, j]) for i in range(n) for j in range(n)))
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise InputError(f"checkpoint {args.checkpoint} not found")
        try:
            ck = dio.read_checkpoint(args.checkpoint)
            layout = FeatureLayout.from_json(ck["feature_layout"])
        except (ValueError, KeyError) as e:
            raise InputError(str(e)) from None
        space = WorkflowSpace(env.templates, env.pool, layout)
        theta = np.asarray(ck["theta"], dtype=float)
        if theta.shape != (len(layout),):
            raise InputError("checkpoint parameters do not match its feature layout")
        execute = EnvExecutor(env)
        _, ho = _split(env)
        rows = []
        for r in args.retention:
            rng = np.random.default_rng([args.seed, int(round(r * 1000))])
            rows.append((r, evaluate_ex(theta, ho, space, execute, r, rng, args.masks)))
        dio.write_rows_csv(out / "retention.csv", ["r", "ex"], rows)
    _say({"written": sorted(p.name for p in out.iterdir() if p.suffix == ".csv")})
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config supplying defaults")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=None,
                        help="worker cap (default: $DYNFLOW_WORKERS or 1)")
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps and wall-clock SQL time")
    common.add_argument("--timeout", type=float, default=300.0)

    p = _Parser(prog="dynflow", description="Query-level workflow selection toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="plant an environment")
    s.add_argument("--h", type=float, default=1.0)
    s.add_argument("--k", type=int, default=10, help="number of templates")
    s.add_argument("--q", type=int, default=200, help="number of tasks")
    s.add_argument("--pool", help="actor counts, e.g. generator=2,selector=1")
    s.add_argument("--registry", help="registry JSON supplying templates")
    s.add_argument("--noise", default="0.5,2.0", help="runtime factor range lo,hi")
    s.add_argument("--shared-seconds", type=float, default=None,
                   help="give every workflow the same per-query runtime")
    s.add_argument("--exec-fail-rate", type=float, default=None)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", parents=[common], help="execute workflows and log rewards")
    r.add_argument("--env")
    r.add_argument("--answers", help="JSONL of {task_id, text} policy answers")
    r.add_argument("--executor", choices=("engine", "planted"), default="engine")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", parents=[common], help="gap, distance, efficiency, pareto")
    a.add_argument("--log")
    a.add_argument("--outcomes")
    a.add_argument("--runtimes")
    a.add_argument("--lenient", action="store_true", help="skip corrupt log lines")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", parents=[common], help="GRPO training")
    t.add_argument("--env")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--G", type=int, default=5)
    t.add_argument("--clip", type=float, default=0.2)
    t.add_argument("--beta", type=float, default=0.01)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--p", type=float, default=0.0, help="pseudo-reward probability")
    t.add_argument("--judge-noise", type=float, default=0.0)
    t.add_argument("--no-masking", action="store_true")
    t.add_argument("--no-interactions", action="store_true",
                   help="drop difficulty interaction features")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mine", parents=[common], help="mine supervision records")
    m.add_argument("--env")
    m.add_argument("--budget", type=int, default=64)
    m.add_argument("--executor", choices=("engine", "planted"), default="planted")
    m.set_defaults(func=cmd_mine)

    rp = sub.add_parser("report", parents=[common], help="plot-ready CSVs")
    rp.add_argument("--env")
    rp.add_argument("--checkpoint")
    rp.add_argument("--retention", type=float, nargs="+",
                    default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    rp.add_argument("--masks", type=int, default=5, help="masks per task below full retention")
    rp.set_defaults(func=cmd_report)
    return p


def _apply_config(args, argv: Sequence[str]):
    if not args.config:
        return
    obj = RunConfig.load(args.config)
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key in ("out", "seed", "workers", "env"):
        if key in obj and key not in given and hasattr(args, key):
            setattr(args, key, obj[key])
    if obj.get("deterministic") and "deterministic" not in given:
        args.deterministic = True
    if "timeout" not in given and "timeout_seconds" in obj.get("reward", {}):
        args.timeout = obj["reward"]["timeout_seconds"]
    for key, value in obj.get("grpo", {}).items():
        dest = {"learning_rate": "lr", "pseudo_probability": "p"}.get(key, key)
        if not hasattr(args, dest):
            raise ConfigError(f"unknown grpo setting {key!r}")
        if dest not in given:
            setattr(args, dest, value)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        _apply_config(args, argv)
        if args.workers is None:
            args.workers = _default_workers()
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.timeout <= 0:
            raise ConfigError("--timeout must be positive")
        return args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except InputError as e:
        return _fail(EXIT_INPUT, "input", str(e))
    except Exception as e:  # invariant violations and anything unforeseen
        return _fail(EXIT_INVARIANT, "invariant", f"{type(e).__name__}: {e}")


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "code": code,
                                 "message": " ".join(message.split())}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
