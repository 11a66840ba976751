"""Asynchronous RL harness for multi-turn search agents, with a deterministic
simulator for the scheduling claims and a toy learnable policy."""

from .agent_runtime import (
    ActionKind,
    AgentAction,
    AgentMode,
    BudgetConfig,
    History,
    HistoryKind,
    MalformedTag,
    build_prompt,
    parse_action,
    run_trajectory,
    step,
)
from .grpo import (
    GroupBatch,
    ToyPolicy,
    build_group,
    dynamic_filter,
    group_advantages,
    grpo_loss,
)
from .rewards import exact_match_judge, f1_score, format_reward, score_trajectory
from .scheduler import (
    SchedulerConfig,
    SchedulerMode,
    SimulationEngine,
    UtilizationReport,
    assemble_batch,
    run_simulation,
)
from .sim_env import Corpus, LatencyModel, generate_corpus
from .synthesis import filter_opensource, fuzz, inject, synthesize, verify
from .types import Fact, FactLedger, QAItem, RewardRecord, Trajectory

__version__ = "0.1.0"
