"""Staged rewards, pseudo rewards and their random mix.

Components are evaluated in order of execution cost and evaluation stops at
the first failing gate; the total is the sum of the components reached:

    format  +0.5 | -0.5 (stop)
    timeout  0   | -0.5 (stop)
    execution +1 | -1   (stop)
    result  +1.5 | -1.5 (stop)
    time    0.5 * (timeout - elapsed) / timeout
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .execution import ExecutionRecord, ExecutionStage

FORMAT_OK, FORMAT_BAD = 0.5, -0.5
TIMEOUT_PENALTY = -0.5
EXEC_OK, EXEC_BAD = 1.0, -1.0
RESULT_OK, RESULT_BAD = 1.5, -1.5
TIME_SCALE = 0.5
PSEUDO_BASE = 3.0
FLIP_THRESHOLD = 0.3


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    timeout_pen: float | None = None
    execution: float | None = None
    result: float | None = None
    time: float | None = None

    def __post_init__(self):
        chain = [self.timeout_pen, self.execution, self.result, self.time]
        # no component after a missing one
        seen_missing = False
        for c in chain:
            if c is None:
                seen_missing = True
            elif seen_missing:
                raise ValueError("reward component present past a missing gate")
        if self.time is not None and self.result != RESULT_OK:
            raise ValueError("time reward requires a correct result")

    @property
    def total(self) -> float:
        return sum(c for c in (self.format, self.timeout_pen, self.execution, self.result,
                               self.time) if c is not None)

    def to_json(self) -> dict:
        return {"format": self.format, "timeout_pen": self.timeout_pen,
                "execution": self.execution, "result": self.result, "time": self.time}

    @classmethod
    def from_json(cls, obj) -> "RewardBreakdown":
        return cls(obj["format"], obj.get("timeout_pen"), obj.get("execution"),
                   obj.get("result"), obj.get("time"))


@dataclass(frozen=True)
class RewardConfig:
    timeout_seconds: float = 300.0
    pseudo_probability: float = 0.0
    judge_noise: float = 0.0

    def __post_init__(self):
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        if not 0.0 <= self.pseudo_probability < 1.0:
            raise ValueError("pseudo_probability must lie in [0, 1)")
        if not 0.0 <= self.judge_noise <= 1.0:
            raise ValueError("judge_noise must lie in [0, 1]")


def time_reward(elapsed: float, timeout: float) -> float:
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    if not 0.0 <= elapsed <= timeout:
        raise ValueError(f"elapsed {elapsed} outside [0, {timeout}]")
    return TIME_SCALE * (timeout - elapsed) / timeout


def staged_reward(parse_ok: bool, record: ExecutionRecord | None,
                  cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    if not parse_ok:
        return RewardBreakdown(FORMAT_BAD)
    if record is None or record.stage == ExecutionStage.FORMAT_INVALID:
        raise ValueError("a parsed answer needs an execution record")
    if record.stage == ExecutionStage.TIMEOUT:
        return RewardBreakdown(FORMAT_OK, TIMEOUT_PENALTY)
    if record.stage == ExecutionStage.EXECUTION_FAILED:
        return RewardBreakdown(FORMAT_OK, 0.0, EXEC_BAD)
    if record.stage == ExecutionStage.RESULT_INCORRECT:
        return RewardBreakdown(FORMAT_OK, 0.0, EXEC_OK, RESULT_BAD)
    elapsed = min(record.elapsed_seconds, cfg.timeout_seconds)
    return RewardBreakdown(FORMAT_OK, 0.0, EXEC_OK, RESULT_OK,
                           time_reward(elapsed, cfg.timeout_seconds))


# -------------------------------------------------------------------- pseudo


@dataclass(frozen=True)
class PseudoJudgment:
    """A pairwise verdict; low-confidence rejections are turned into preferences."""

    preferred: bool
    s: float

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if not self.preferred and self.s < FLIP_THRESHOLD:
            object.__setattr__(self, "preferred", True)

    @classmethod
    def from_wire(cls, msg: dict) -> "PseudoJudgment":
        """Parse ``{"judgment": "BETTER"|"NOT_BETTER", "confidence_score": float}``."""
        verdict = msg.get("judgment")
        if verdict not in ("BETTER", "NOT_BETTER"):
            raise ValueError(f"bad judgment {verdict!r}")
        s = float(msg["confidence_score"])
        return cls(verdict == "BETTER", min(1.0, max(0.0, s)))


def pseudo_reward(j: PseudoJudgment) -> float:
    return PSEUDO_BASE + 0.5 * j.s if j.preferred else -0.5 * j.s


def mixed_reward(real_reward: float | Callable[[], float], judge: Callable[[], PseudoJudgment],
                 p: float, rng: np.random.Generator) -> tuple[float, int]:
    """Keep the real reward with probability ``1 - p``; otherwise ask the judge.

    ``real_reward`` may be a thunk so the workflow only runs when its reward
    is used. Returns ``(reward, lam)`` where ``lam = 1`` marks the real reward.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    lam = int(rng.random() >= p)
    if lam:
        return (real_reward() if callable(real_reward) else real_reward), 1
    return pseudo_reward(judge()), 0


def confidence_from_gap(gap: float) -> float:
    """Map an absolute reward gap to [0, 1): 2 * sigmoid(|gap|) - 1."""
    return math.tanh(abs(gap) / 2.0)


def synthetic_judge(env, candidate, baseline, task, noise: float, rng: np.random.Generator,
                    cfg: RewardConfig = RewardConfig()) -> PseudoJudgment:
    """Compare true staged totals of two workflows in a planted environment.

    The verdict is flipped with probability ``noise``.
    """
    c = staged_reward(True, env.record(candidate, task, cfg.timeout_seconds), cfg).total
    b = staged_reward(True, env.record(baseline, task, cfg.timeout_seconds), cfg).total
    preferred = c > b
    if rng.random() < noise:
        preferred = not preferred
    return PseudoJudgment(preferred, confidence_from_gap(c - b))


def judge_baseline(env, task, timeout: float = 300.0):
    """Best-known workflow for ``task``: highest staged total when some workflow
    solves it, else the most accurate workflow overall."""
    Y, _ = env.matrices
    q = env.task_index[task.task_id]
    cfg = RewardConfig(timeout)
    if Y.bits[:, q].any():
        best, best_total = None, -math.inf
        for i in np.flatnonzero(Y.bits[:, q]):
            w = env.workflows[i]
            total = staged_reward(True, env.record(w, task, timeout), cfg).total
            if total > best_total:
                best, best_total = w, total
        return best
    return env.workflows[int(np.argmax(Y.bits.mean(axis=1)))]


class EnvJudge:
    """Synthetic judge against each task's best-known workflow (cached)."""

    def __init__(self, env, noise: float = 0.0, timeout: float = 300.0):
        self.env = env
        self.noise = noise
        self.cfg = RewardConfig(timeout)
        self._baselines: dict = {}

    def __call__(self, w, task, rng: np.random.Generator) -> PseudoJudgment:
        base = self._baselines.get(task.task_id)
        if base is None:
            base = self._baselines[task.task_id] = judge_baseline(
                self.env, task, self.cfg.timeout_seconds)
        return synthetic_judge(self.env, w, base, task, self.noise, rng, self.cfg)
