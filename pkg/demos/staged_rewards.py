"""
Staged rewards
==============

Rewards are scored gate by gate and stop at the first failure, so a
format error costs less to score than a wrong answer.
"""
import numpy as np

from dynflow import (ExecutionRecord, PseudoJudgment, Workflow, mixed_reward, builtin_templates,
                     pseudo_reward, staged_reward)

w = Workflow(builtin_templates()[0], ("g1",))
cases = {
    "timeout": ExecutionRecord("q", w, "timeout", 300.0),
    "sql error": ExecutionRecord("q", w, "execution_failed", 4.0, "SELEC 1"),
    "wrong rows": ExecutionRecord("q", w, "result_incorrect", 4.0, "SELECT 2", "x"),
    "correct, 60 s": ExecutionRecord("q", w, "result_correct", 60.0, "SELECT 1", "y"),
    "correct, 1 s": ExecutionRecord("q", w, "result_correct", 1.0, "SELECT 1", "y"),
}
print(f"{'unparseable':<15} {staged_reward(False, None).total:+.3f}")
for name, rec in cases.items():
    b = staged_reward(True, rec)
    print(f"{name:<15} {b.total:+.3f}   {b.to_json()}")

# %%
# Pseudo rewards
# --------------
# A judge compares the workflow with a reference. Weak rejections
# (confidence below 0.3) count as preferences.
for verdict, s in ((True, 1.0), (True, 0.0), (False, 0.8), (False, 0.1)):
    j = PseudoJudgment(verdict, s)
    print(f"judge says {'better' if verdict else 'worse ':<6} s={s:.1f} -> {pseudo_reward(j):+.2f}")

rng = np.random.default_rng(0)
draws = [mixed_reward(3.4, lambda: PseudoJudgment(True, 0.5), 0.1, rng) for _ in range(10_000)]
print(f"share of pseudo rewards at p=0.1: {1 - np.mean([lam for _, lam in draws]):.3f}")
