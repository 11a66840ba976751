"""Rollout evaluation: Avg@k / Pass@k and minimum-turn sweeps."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from .agent_runtime import AgentMode, BudgetConfig, run_trajectory
from .rewards import Judge, exact_match_judge
from .types import GenerationClient, QAItem, ToolClient

# factory(qa, qa_index, trial) -> client for that single rollout
ClientFactory = Callable[[QAItem, int, int], GenerationClient]


@dataclass
class EvalReport:
    k: int
    avg_at_k: float
    pass_at_k: float
    records: list[dict]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "avg_at_k": self.avg_at_k,
            "pass_at_k": self.pass_at_k,
            "records": self.records,
        }


def evaluate(
    qa_items: list[QAItem],
    client_factory: ClientFactory,
    env: ToolClient,
    budget: BudgetConfig,
    k: int = 4,
    judge: Judge = exact_match_judge,
    mode: AgentMode = AgentMode.BASE,
    top_k: int = 5,
) -> EvalReport:
    """Run k rollouts per question.

    Avg@k is the mean per-question success rate; Pass@k is the fraction of
    questions solved in at least one of the k trials, so Pass@k >= Avg@k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not qa_items:
        raise ValueError("no questions to evaluate")
    records = []
    for qa_index, qa in enumerate(qa_items):
        successes = []
        answers = []
        for trial in range(k):
            client = client_factory(qa, qa_index, trial)
            traj = run_trajectory(qa, client, env, budget, mode, top_k)
            answer = traj.answer or ""
            successes.append(int(judge(qa.question, qa.answer, answer)))
            answers.append(answer)
        records.append({
            "qa_id": qa.id,
            "successes": successes,
            "answers": answers,
            "avg": sum(successes) / k,
            "passed": int(any(successes)),
        })
    avg = sum(r["avg"] for r in records) / len(records)
    passed = sum(r["passed"] for r in records) / len(records)
    return EvalReport(k=k, avg_at_k=avg, pass_at_k=passed, records=records)


def min_turns_sweep(
    qa_items: list[QAItem],
    client_factory: ClientFactory,
    env: ToolClient,
    budget: BudgetConfig,
    min_turns_values: list[int],
    k: int = 4,
    judge: Judge = exact_match_judge,
    mode: AgentMode = AgentMode.BASE,
    top_k: int = 5,
) -> list[dict]:
    """Accuracy under enforced minimum turn counts (one row per setting)."""
    rows = []
    for m in min_turns_values:
        swept = replace(budget, min_turns=m)
        report = evaluate(qa_items, client_factory, env, swept, k, judge, mode, top_k)
        rows.append({"min_turns": m, "avg_at_k": report.avg_at_k,
                     "pass_at_k": report.pass_at_k})
    return rows
