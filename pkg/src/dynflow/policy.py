"""A featurized softmax policy over workflows, trained with GRPO.

Each rollout is a single categorical decision over the masked workflow space,
so the importance ratio of a rollout is ``pi(chosen) / pi_old(chosen)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .execution import ExecutionRecord
from .reward import PseudoJudgment, RewardConfig, mixed_reward, staged_reward
from .workflow import (DIFFICULTIES, ActorPool, Difficulty, MaskVector, Task, Template, Workflow,
                       count_workflows, enumerate_workflows)

DEFAULT_MASK_SCHEDULE = {Difficulty.EASY: 0.5, Difficulty.MODERATE: 0.65,
                         Difficulty.COMPLEX: 0.8, Difficulty.HIGHLY_COMPLEX: 0.95}
SIGMA_GUARD = 1e-8


# ------------------------------------------------------------------ features


@dataclass(frozen=True)
class FeatureLayout:
    """``[difficulty one-hot] [template one-hot] [actor indicators]
    [stages / max stages] [width / max width] [bias]``, optionally followed by
    difficulty x template and difficulty x actor blocks."""

    template_ids: tuple[str, ...]
    actor_ids: tuple[str, ...]
    max_stages: int
    max_width: int
    interactions: bool = True

    @classmethod
    def build(cls, templates: Sequence[Template], pool: ActorPool,
              interactions: bool = True) -> "FeatureLayout":
        return cls(tuple(sorted(t.id for t in templates)), pool.ids,
                   max(len(t.stages) for t in templates), max(t.max_width for t in templates),
                   interactions)

    @property
    def base_length(self) -> int:
        return 4 + len(self.template_ids) + len(self.actor_ids) + 3

    def __len__(self) -> int:
        n = self.base_length
        if self.interactions:
            n += 4 * (len(self.template_ids) + len(self.actor_ids))
        return n

    def to_json(self) -> dict:
        return {"difficulties": [d.value for d in DIFFICULTIES],
                "templates": list(self.template_ids), "actors": list(self.actor_ids),
                "max_stages": self.max_stages, "max_width": self.max_width,
                "interactions": self.interactions}

    @classmethod
    def from_json(cls, obj) -> "FeatureLayout":
        return cls(tuple(obj["templates"]), tuple(obj["actors"]), obj["max_stages"],
                   obj["max_width"], obj["interactions"])


def featurize(task: Task, w: Workflow, layout: FeatureLayout) -> np.ndarray:
    T, P = len(layout.template_ids), len(layout.actor_ids)
    try:
        ti = layout.template_ids.index(w.template.id)
        ai = sorted({layout.actor_ids.index(a) for a in w.assignment})
    except ValueError:
        raise KeyError(f"workflow {w} uses a template or actor outside the layout") from None
    di = DIFFICULTIES.index(task.difficulty)
    x = np.zeros(len(layout))
    x[di] = 1.0
    x[4 + ti] = 1.0
    x[[4 + T + a for a in ai]] = 1.0
    x[4 + T + P] = len(w.template.stages) / layout.max_stages
    x[4 + T + P + 1] = w.template.max_width / layout.max_width
    x[4 + T + P + 2] = 1.0
    if layout.interactions:
        off = layout.base_length
        x[off + di * T + ti] = 1.0
        off += 4 * T
        x[[off + di * P + a for a in ai]] = 1.0
    return x


class WorkflowSpace:
    """The full workflow enumeration with cached features and mask filtering."""

    def __init__(self, templates: Sequence[Template], pool: ActorPool,
                 layout: FeatureLayout | None = None):
        self.templates = tuple(templates)
        self.pool = pool
        self.layout = layout or FeatureLayout.build(templates, pool)
        self.workflows = tuple(enumerate_workflows(self.templates, pool))
        ids = {a: k for k, a in enumerate(pool.ids)}
        self.usage = np.zeros((len(self.workflows), len(pool)), dtype=bool)
        for i, w in enumerate(self.workflows):
            self.usage[i, [ids[a] for a in w.assignment]] = True
        self._features: dict[Difficulty, np.ndarray] = {}

    def features(self, difficulty: Difficulty) -> np.ndarray:
        if difficulty not in self._features:
            task = Task("_", "", "_", "_", difficulty)
            self._features[difficulty] = np.stack([featurize(task, w, self.layout)
                                                   for w in self.workflows])
        return self._features[difficulty]

    def allowed(self, mask: MaskVector | None) -> np.ndarray:
        """Indices into ``workflows`` admissible under ``mask``, in enumeration order."""
        if mask is None:
            return np.arange(len(self.workflows))
        bits = np.array([v for _, v in mask.bits], dtype=bool)
        return np.flatnonzero(~(self.usage & ~bits).any(axis=1))


# -------------------------------------------------------------------- policy


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def policy_distribution(theta: np.ndarray, task: Task, candidates: Sequence[Workflow],
                        layout: FeatureLayout) -> np.ndarray:
    if not candidates:
        raise ValueError("no candidate workflows")
    phi = np.stack([featurize(task, w, layout) for w in candidates])
    return softmax(phi @ theta)


def sample_mask(pool: ActorPool, schedule: Mapping[Difficulty, float], difficulty: Difficulty,
                templates: Sequence[Template], rng: np.random.Generator) -> MaskVector:
    """Keep each actor with probability ``schedule[difficulty]``; redraw while
    no workflow survives."""
    r = schedule[Difficulty(difficulty)]
    if not 0.0 < r <= 1.0:
        raise ValueError(f"retention rate {r} outside (0, 1]")
    while True:
        keep = rng.random(len(pool)) < r
        mask = MaskVector(tuple(zip(pool.ids, keep.astype(int).tolist())))
        if count_workflows(templates, pool, mask) > 0:
            return mask


def group_advantages(rewards) -> np.ndarray:
    """``(R - mean) / std`` with the population std; all zeros when std < 1e-8."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty reward group")
    sigma = r.std()
    if sigma < SIGMA_GUARD:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def kl_divergence(logp: np.ndarray, logq: np.ndarray) -> float:
    p = np.exp(logp)
    return float(np.dot(p, logp - logq))


@dataclass
class GrpoConfig:
    G: int = 5
    clip: float = 0.2
    beta: float = 0.01
    learning_rate: float = 0.05
    steps: int = 2000
    seed: int = 0
    masking: bool = True
    mask_schedule: Mapping[Difficulty, float] = field(
        default_factory=lambda: dict(DEFAULT_MASK_SCHEDULE))
    pseudo_probability: float = 0.0
    judge_noise: float = 0.0
    timeout_seconds: float = 300.0
    inner_steps: int = 1
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.G < 1:
            raise ValueError("G must be positive")
        self.mask_schedule = {Difficulty(k): float(v) for k, v in self.mask_schedule.items()}
        for r in self.mask_schedule.values():
            if not 0.0 < r <= 1.0:
                raise ValueError("retention rates must lie in (0, 1]")

    @property
    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.timeout_seconds, self.pseudo_probability, self.judge_noise)

    def retention(self, difficulty: Difficulty) -> float:
        return self.mask_schedule[difficulty] if self.masking else 1.0

    def to_json(self) -> dict:
        return {"G": self.G, "clip": self.clip, "beta": self.beta,
                "learning_rate": self.learning_rate, "steps": self.steps, "seed": self.seed,
                "masking": self.masking,
                "mask_schedule": {k.value: v for k, v in self.mask_schedule.items()},
                "pseudo_probability": self.pseudo_probability, "judge_noise": self.judge_noise,
                "timeout_seconds": self.timeout_seconds, "inner_steps": self.inner_steps}


@dataclass
class RolloutGroup:
    task_id: str
    mask: MaskVector
    candidates: tuple[Workflow, ...]
    candidate_index: np.ndarray  # positions in the space's full enumeration
    chosen: np.ndarray
    old_probs: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    lambdas: np.ndarray
    records: list = field(default_factory=list)


Executor = Callable[[Workflow, Task], ExecutionRecord]
Judge = Callable[[Workflow, Task, np.random.Generator], PseudoJudgment]


def rollout_group(theta_old: np.ndarray, task: Task, cfg: GrpoConfig, space: WorkflowSpace,
                  executor: Executor, judge: Judge | None, rng: np.random.Generator) -> RolloutGroup:
    """Sample a mask and G workflows from the old policy, then reward them.

    Each rollout draws its pseudo-reward coin and judge noise from its own
    substream, so results do not depend on ``cfg.workers``.
    """
    full = MaskVector.full(space.pool)
    if cfg.masking and cfg.retention(task.difficulty) < 1.0:
        mask = sample_mask(space.pool, cfg.mask_schedule, task.difficulty, space.templates, rng)
    else:
        mask = full
    idx = space.allowed(mask)
    phi = space.features(task.difficulty)[idx]
    probs = softmax(phi @ theta_old)
    chosen = rng.choice(len(idx), size=cfg.G, p=probs)
    seeds = rng.integers(0, 2**63, size=cfg.G)
    rcfg = cfg.reward_config

    def one(i):
        w = space.workflows[idx[chosen[i]]]
        sub = np.random.default_rng(int(seeds[i]))
        box = {}

        def real():
            rec = executor(w, task)
            box["record"] = rec
            return staged_reward(True, rec, rcfg).total

        if cfg.pseudo_probability > 0 and judge is None:
            raise ValueError("pseudo rewards need a judge")
        reward, lam = mixed_reward(real, lambda: judge(w, task, sub), cfg.pseudo_probability, sub)
        return reward, lam, box.get("record")

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(one, range(cfg.G)))
    else:
        results = [one(i) for i in range(cfg.G)]
    rewards = np.array([r[0] for r in results])
    return RolloutGroup(
        task_id=task.task_id, mask=mask,
        candidates=tuple(space.workflows[i] for i in idx), candidate_index=idx,
        chosen=chosen, old_probs=probs[chosen], rewards=rewards,
        advantages=group_advantages(rewards),
        lambdas=np.array([r[1] for r in results], dtype=int),
        records=[r[2] for r in results])


def grpo_loss_and_grad(theta: np.ndarray, theta_old: np.ndarray, theta_ref: np.ndarray,
                       group: RolloutGroup, phi: np.ndarray, cfg: GrpoConfig
                       ) -> tuple[float, np.ndarray]:
    """Negative clipped surrogate plus ``beta * KL(pi || pi_ref)`` and its gradient.

    ``phi`` holds the features of ``group.candidates``, row for row.
    """
    n = len(group.candidates)
    if phi.shape[0] != n or (group.chosen >= n).any():
        raise ValueError("feature rows do not match the group's candidate list")
    if not np.allclose(softmax(phi @ theta_old)[group.chosen], group.old_probs,
                       rtol=1e-9, atol=1e-12):
        raise ValueError("group was not sampled from theta_old over these candidates")
    logp = log_softmax(phi @ theta)
    p = np.exp(logp)
    G = len(group.chosen)
    mean_phi = p @ phi
    obj = 0.0
    grad_obj = np.zeros_like(theta)
    lo, hi = 1.0 - cfg.clip, 1.0 + cfg.clip
    for c, old, a in zip(group.chosen, group.old_probs, group.advantages):
        ratio = p[c] / old
        unclipped = ratio * a
        clipped = min(max(ratio, lo), hi) * a
        if unclipped <= clipped:
            obj += unclipped
            grad_obj += a * ratio * (phi[c] - mean_phi)
        else:
            obj += clipped  # constant in theta
    obj /= G
    grad_obj /= G
    logq = log_softmax(phi @ theta_ref)
    diff = logp - logq
    kl = float(np.dot(p, diff))
    grad_kl = phi.T @ (p * (diff - kl))
    loss = -(obj - cfg.beta * kl)
    grad = -(grad_obj - cfg.beta * grad_kl)
    return float(loss), grad


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TraceRow:
    step: int
    mean_reward: float
    holdout_ex: float
    kl: float
    mask_r: float


def greedy_index(theta: np.ndarray, difficulty: Difficulty, space: WorkflowSpace,
                 mask: MaskVector | None = None) -> int:
    idx = space.allowed(mask)
    scores = space.features(difficulty)[idx] @ theta
    return int(idx[int(np.argmax(scores))])


def greedy(theta: np.ndarray, task: Task, space: WorkflowSpace,
           mask: MaskVector | None = None) -> Workflow:
    return space.workflows[greedy_index(theta, task.difficulty, space, mask)]


def evaluate_ex(theta: np.ndarray, tasks: Sequence[Task], space: WorkflowSpace,
                executor: Executor, retention: float = 1.0, rng: np.random.Generator | None = None,
                masks_per_task: int = 1) -> float:
    """Greedy-decoding execution accuracy; below full retention, masks are
    sampled per task (redrawn while empty) and results averaged."""
    if not tasks:
        return float("nan")
    hits = 0
    n = 0
    cache: dict[tuple, int] = {}
    for t in tasks:
        for _ in range(masks_per_task if retention < 1.0 else 1):
            mask = None
            if retention < 1.0:
                mask = sample_mask(space.pool, {t.difficulty: retention}, t.difficulty,
                                   space.templates, rng)
            key = (t.difficulty, None if mask is None else mask.key())
            if key not in cache:
                cache[key] = greedy_index(theta, t.difficulty, space, mask)
            hits += executor(space.workflows[cache[key]], t).success
            n += 1
    return hits / n


def train(cfg: GrpoConfig, tasks: Sequence[Task], space: WorkflowSpace, executor: Executor,
          judge: Judge | None = None, holdout: Sequence[Task] = (),
          theta0: np.ndarray | None = None, on_group: Callable[[int, RolloutGroup], None] | None = None
          ) -> tuple[np.ndarray, list[TraceRow]]:
    """GRPO with plain gradient descent.

    ``theta_old`` is refreshed every step and ``theta_ref`` stays at the
    initial parameters.
    """
    if not tasks:
        raise ValueError("no training tasks")
    rng = np.random.default_rng(cfg.seed)
    theta = np.zeros(len(space.layout)) if theta0 is None else np.array(theta0, dtype=float)
    theta_ref = theta.copy()
    trace: list[TraceRow] = []
    for step in range(cfg.steps):
        task = tasks[int(rng.integers(len(tasks)))]
        theta_old = theta.copy()
        group = rollout_group(theta_old, task, cfg, space, executor, judge, rng)
        if on_group is not None:
            on_group(step, group)
        phi = space.features(task.difficulty)[group.candidate_index]
        for _ in range(cfg.inner_steps):
            _, grad = grpo_loss_and_grad(theta, theta_old, theta_ref, group, phi, cfg)
            theta = theta - cfg.learning_rate * grad
        if not np.isfinite(theta).all():
            raise FloatingPointError(
                f"non-finite parameters at step {step} (task {task.task_id}, "
                f"rewards {group.rewards.tolist()})")
        kl = kl_divergence(log_softmax(phi @ theta), log_softmax(phi @ theta_ref))
        ex = evaluate_ex(theta, holdout, space, executor) if holdout else float("nan")
        trace.append(TraceRow(step, float(group.rewards.mean()), ex, kl,
                              cfg.retention(task.difficulty)))
    return theta, trace
