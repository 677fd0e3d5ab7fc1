"""
How much could a per-query selector gain?
=========================================

Plant an environment, then compare the best single workflow against an
oracle that picks a correct workflow for every query.
"""
import numpy as np

from dynflow import distance_matrix, gap_report, pareto_points, plant_env
from dynflow.analysis import OutcomeMatrix

env = plant_env(seed=2, q_tasks=200)
Y, T = env.matrices
print(f"{len(env.workflows)} workflows x {len(env.tasks)} tasks")

g = gap_report(Y)
print(f"best fixed workflow: {Y.workflows[g.i_star]}  EX {g.ex_static:.3f}")
print(f"per-query oracle:    EX {g.ex_dynamic:.3f}  (gap {g.delta:.3f})")

# each lower bound is the mass one workflow adds outside the best one's successes
for label, lb in sorted(zip(Y.workflows, g.lower_bounds), key=lambda x: -x[1])[:3]:
    print(f"  {label:<28} adds {lb:.3f}")

# %%
# Disagreement is not enough
# --------------------------
# Two workflows can disagree on every query while a third covers both.
toy = OutcomeMatrix(("W1", "W2", "W3"), ("a", "b"), np.array([[1, 0], [0, 1], [1, 1]], np.uint8))
print("toy gap:", gap_report(toy).delta, "coverage:", gap_report(toy).coverage)

# %%
# Correctness and speed together
# ------------------------------
D = distance_matrix(Y, T)
far = np.unravel_index(np.argmax(D.d), D.d.shape)
print("most distant pair:", D.labels[far[0]], "vs", D.labels[far[1]], f"d={D.d[far]:.3f}")

*static, oracle = pareto_points(Y, T)
fastest = min(static, key=lambda p: p.mean_seconds)
print(f"fastest fixed: {fastest.accuracy:.3f} EX at {fastest.mean_seconds:.1f} s")
print(f"oracle:        {oracle.accuracy:.3f} EX at {oracle.mean_seconds:.1f} s")
