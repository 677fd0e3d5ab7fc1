"""
Mining supervision, simplest template first
===========================================
"""
from collections import Counter

from dynflow import EnvExecutor, MinerConfig, baseline_workflow, filter_trivial, plant_env
from dynflow.miner import Deferred, mine_all

env = plant_env(5, q_tasks=120, pool_spec={"generator": 2, "optimizer": 2, "parser": 1,
                                           "scaler": 1, "selector": 1, "reducer": 1,
                                           "decomposer": 1})
executor = EnvExecutor(env)

# a task the lone baseline generator already solves teaches nothing
kept, dropped = filter_trivial(env.tasks, executor, baseline_workflow(env.templates, env.pool))
print(f"{len(dropped)} trivial tasks dropped, {len(kept)} kept")

cfg = MinerConfig.from_templates(env.templates)
results = mine_all(kept, cfg, env.pool, executor)
found = [r for r in results if not isinstance(r, Deferred)]
print(f"mined {len(found)}, deferred {len(results) - len(found)}")

ranks = Counter(cfg.templates[r.template_rank].id for r in found)
for tpl in cfg.templates:
    print(f"  template {tpl.id}: {ranks.get(tpl.id, 0)}")
print(found[0].to_line())
