"""Reward functions: word-level F1, format gating, and the judge interface."""

from __future__ import annotations

import string
from collections import Counter
from typing import Callable

from .agent_runtime import AgentMode
from .types import QAItem, RewardRecord, Trajectory

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

# judge(question, gold, predicted) -> {0, 1}
Judge = Callable[[str, str, str], int]


def answer_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation, drop articles, split on whitespace."""
    words = text.lower().translate(_PUNCT_TABLE).split()
    return [w for w in words if w not in _ARTICLES]


def f1_score(prediction: str, reference: str) -> float:
    """Bag-of-words F1 with multiplicity over normalized tokens.

    Both sides empty scores 1.0; exactly one side empty scores 0.0.
    """
    pred = answer_tokens(prediction)
    ref = answer_tokens(reference)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def exact_match_judge(question: str, gold: str, predicted: str) -> int:
    return int(answer_tokens(gold) == answer_tokens(predicted))


def format_reward(traj: Trajectory) -> int:
    """1 iff every turn parsed cleanly and the rollout ended in a real Answer."""
    if not traj.valid or not traj.turns:
        return 0
    if any(t.malformed for t in traj.turns):
        return 0
    last = traj.turns[-1]
    if last.action_kind != "answer" or not last.effective or traj.answer is None:
        return 0
    return 1


def score_trajectory(
    traj: Trajectory,
    qa: QAItem,
    mode: AgentMode = AgentMode.BASE,
    judge: Judge | None = None,
) -> RewardRecord:
    """Final reward: format x F1 for base models, judge verdict for reasoning models.

    Invalid (aborted) trajectories always score 0.
    """
    f1 = f1_score(traj.answer or "", qa.answer)
    fmt = format_reward(traj)
    if mode is AgentMode.REASONING:
        if judge is None:
            raise ValueError("reasoning mode requires a judge")
        verdict = judge(qa.question, qa.answer, traj.answer or "") if traj.valid else 0
        return RewardRecord(f1=f1, format_ok=fmt, judge=verdict, final=float(verdict))
    return RewardRecord(f1=f1, format_ok=fmt, judge=None, final=float(fmt) * f1)
