"""
Running workflows against a database
====================================

The engine runs each stage, executes the SQL in SQLite and compares the
rows with the gold query. Synthetic actors replay a planted environment.
"""
from dynflow import EngineExecutor, SqliteBackend, majority_vote, parse_answer, plant_env
from dynflow.workflow import render_answer

env = plant_env(3, q_tasks=12)
backend = SqliteBackend({env.db_ref: env.database_dump()})
engine = EngineExecutor(backend, env.pool, timeout=300.0, synthetic=env, charge_sql_time=False)

task = env.tasks[0]
print(task.question)
for w in env.workflows[:5]:
    rec = engine(w, task)
    print(f"{str(w):<30} {rec.stage.value:<17} {rec.elapsed_seconds:7.2f} s  {rec.produced_sql}")

# %%
# Answers in the policy's text format
# -----------------------------------
text = render_answer(env.workflows[3], think="draft, refine twice, select")
print(text)
print("parsed back:", parse_answer(text, env.pool, env.templates))

# %%
# Five samples, one answer
# ------------------------
records = [engine(w, task) for w in env.workflows[:5]]
print("vote:", majority_vote(records).result_signature)
