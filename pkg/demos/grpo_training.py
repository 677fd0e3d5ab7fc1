"""
Learning to pick a workflow per query
=====================================

Train the softmax policy with GRPO on half the tasks and score greedy
choices on the other half.
"""
import numpy as np

from dynflow import (EnvExecutor, GrpoConfig, RuntimeModel, WorkflowSpace, evaluate_ex, gap_report,
                     plant_env, train)
from dynflow.analysis import OutcomeMatrix

# every workflow takes the same time on a query, so rewards differ only by correctness
env = plant_env(2, runtime_model=RuntimeModel(shared_seconds=20.0))
train_tasks, held_out = env.tasks[0::2], env.tasks[1::2]
Y = env.matrices[0]
g = gap_report(OutcomeMatrix(Y.workflows, Y.tasks[1::2], Y.bits[:, 1::2]))
print(f"held-out: best fixed {g.ex_static:.3f}, oracle {g.ex_dynamic:.3f}")

space = WorkflowSpace(env.templates, env.pool)
executor = EnvExecutor(env)
theta, trace = train(GrpoConfig(steps=2000, seed=0, beta=0.3), train_tasks, space, executor,
                     holdout=held_out)
for row in trace[::400] + trace[-1:]:
    print(f"step {row.step:>4}  mean reward {row.mean_reward:+.2f}  held-out EX {row.holdout_ex:.3f}")

# %%
# What the policy picks by difficulty
# -----------------------------------
for d in ("easy", "moderate", "complex", "highly_complex"):
    scores = space.features(d) @ theta
    print(f"{d:<15} -> {space.workflows[int(np.argmax(scores))]}")

# %%
# Robustness to missing actors
# ----------------------------
for r in (1.0, 0.7, 0.5, 0.3):
    ex = evaluate_ex(theta, held_out, space, executor, retention=r,
                     rng=np.random.default_rng(1), masks_per_task=5)
    print(f"retention {r:.1f}: EX {ex:.3f}")
