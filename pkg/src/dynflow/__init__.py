"""Query-level workflow selection for text-to-SQL pipelines.

Workflows are role templates bound to concrete actors. This package executes
them, rewards them, measures how much a per-query selector could gain over the
best fixed workflow, and trains a small softmax policy with GRPO to capture it.
"""
from .analysis import (DistanceMatrix, EfficiencyReport, GapReport, OutcomeMatrix, ParetoPoint,
                       RuntimeMatrix, d_efficiency, d_sample, distance_matrix, efficiency_report,
                       gap_report, matrices_from_records, pareto_points)
from .execution import (EngineExecutor, ExecutionRecord, ExecutionStage, ResultSet, SqliteBackend,
                        compare_results, majority_vote, result_signature, run_workflow)
from .miner import (Deferred, MinerConfig, SupervisionRecord, baseline_workflow, filter_trivial,
                    mine)
from .policy import (FeatureLayout, GrpoConfig, RolloutGroup, WorkflowSpace, evaluate_ex,
                     featurize, greedy, group_advantages, grpo_loss_and_grad, policy_distribution,
                     rollout_group, sample_mask, train)
from .reward import (EnvJudge, PseudoJudgment, RewardBreakdown, RewardConfig, mixed_reward,
                     pseudo_reward, staged_reward)
from .synth import (EnvExecutor, PlantedEnv, RuntimeModel, brute_force_report,
                    enumerate_outcome_tables, hash01, plant_env)
from .workflow import (ActorPool, ActorRole, ActorSpec, Difficulty, MaskVector, Registry, Task,
                       Template, TemplateStage, Workflow, canonical_string, count_workflows,
                       enumerate_workflows, f_match, load_registry, builtin_templates, parse_answer,
                       render_answer)

__all__ = [
    "DistanceMatrix", "EfficiencyReport", "GapReport", "OutcomeMatrix", "ParetoPoint",
    "RuntimeMatrix", "d_efficiency", "d_sample", "distance_matrix", "efficiency_report",
    "gap_report", "matrices_from_records", "pareto_points", "EngineExecutor", "ExecutionRecord",
    "ExecutionStage", "ResultSet", "SqliteBackend", "compare_results", "majority_vote",
    "result_signature", "run_workflow", "Deferred", "MinerConfig", "SupervisionRecord",
    "baseline_workflow", "filter_trivial", "mine", "FeatureLayout", "GrpoConfig", "RolloutGroup",
    "WorkflowSpace", "evaluate_ex", "featurize", "greedy", "group_advantages",
    "grpo_loss_and_grad", "policy_distribution", "rollout_group", "sample_mask", "train",
    "EnvJudge", "PseudoJudgment", "RewardBreakdown", "RewardConfig", "mixed_reward",
    "pseudo_reward", "staged_reward", "EnvExecutor", "PlantedEnv", "RuntimeModel",
    "brute_force_report", "enumerate_outcome_tables", "hash01", "plant_env", "ActorPool",
    "ActorRole", "ActorSpec", "Difficulty", "MaskVector", "Registry", "Task", "Template",
    "TemplateStage", "Workflow", "canonical_string", "count_workflows", "enumerate_workflows",
    "f_match", "load_registry", "builtin_templates", "parse_answer", "render_answer",
]

__version__ = "0.1.0"
