"""Shared domain objects: QA items, fact ledgers, trajectories, client protocols."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np


class ToolUnavailable(Exception):
    """A tool endpoint could not serve the request; the turn records the failure."""


class GenerationFailed(Exception):
    """The generation backend produced no output; the trajectory is aborted."""


@dataclass(frozen=True)
class SearchHit:
    snippet: str
    url: str
    score: float


@dataclass(frozen=True)
class SearchResults:
    hits: tuple[SearchHit, ...] = ()

    def render(self) -> str:
        if not self.hits:
            return "Search results: none"
        lines = ["Search results:"]
        for rank, hit in enumerate(self.hits, start=1):
            lines.append(f"{rank}. [{hit.url}] {hit.snippet}")
        return "\n".join(lines)


@dataclass
class PolicyStep:
    """One learnable decision: feature vector, chosen symbol, behavior log-prob."""

    features: np.ndarray
    symbol: int
    logprob: float


@dataclass
class Generation:
    """Output of one model call, stamped with the weight version that produced it."""

    text: str
    version: int = 0
    policy_step: PolicyStep | None = None


class GenerationClient(Protocol):
    def generate(self, prompt: str) -> Generation: ...


class ToolClient(Protocol):
    def search(self, query: str, k: int = 5) -> SearchResults: ...

    def browse(self, url: str) -> str: ...


@dataclass(frozen=True)
class Fact:
    entity: str
    statement: str
    source: str = ""


class FactLedger:
    """Append-only list of supporting facts; duplicate (entity, statement) pairs rejected."""

    def __init__(self, facts: Iterable[Fact] = ()):
        self._facts: list[Fact] = []
        self._seen: set[tuple[str, str]] = set()
        for fact in facts:
            self.add(fact)

    def add(self, fact: Fact) -> None:
        key = (fact.entity, fact.statement)
        if key in self._seen:
            raise ValueError(f"duplicate fact for entity {fact.entity!r}")
        self._seen.add(key)
        self._facts.append(fact)

    def contains(self, entity: str, statement: str) -> bool:
        return (entity, statement) in self._seen

    @property
    def facts(self) -> tuple[Fact, ...]:
        return tuple(self._facts)

    def __len__(self) -> int:
        return len(self._facts)

    def copy(self) -> "FactLedger":
        return FactLedger(self._facts)

    def to_json(self) -> list[dict]:
        return [
            {"entity": f.entity, "statement": f.statement, "source": f.source}
            for f in self._facts
        ]


@dataclass(frozen=True)
class SynthAction:
    kind: str  # "injection" | "fuzz"
    round: int
    diff: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "round": self.round, "diff": self.diff}


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    answer: str
    ledger: FactLedger = field(default_factory=FactLedger)
    lineage: tuple[SynthAction, ...] = ()

    def __post_init__(self):
        if not self.answer:
            raise ValueError("QAItem.answer must be non-empty")
        rounds = [a.round for a in self.lineage]
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise ValueError("lineage rounds must be strictly increasing")


@dataclass(frozen=True)
class RewardRecord:
    f1: float
    format_ok: int
    judge: int | None
    final: float

    def to_json(self) -> dict:
        return {
            "f1": self.f1,
            "format_ok": self.format_ok,
            "judge": self.judge,
            "final": self.final,
        }


@dataclass
class Turn:
    """One agent turn: a model generation plus its optional tool interaction."""

    index: int
    output: str
    action_kind: str
    action_payload: str
    effective: bool
    malformed: bool
    tool_result: str | None = None
    summary: str | None = None
    versions: tuple[int, ...] = (0,)


@dataclass
class Trajectory:
    """One complete rollout: the unit of collection, scoring, and training."""

    qa_id: str
    turns: list[Turn] = field(default_factory=list)
    answer: str | None = None
    valid: bool = True
    reward: RewardRecord | None = None
    advantage: float | None = None  # stamped when the trajectory joins a group
    policy_steps: list[PolicyStep] = field(default_factory=list)
    # Scheduler bookkeeping, stamped when the rollout runs under an executor.
    task_index: int = -1
    group_index: int = 0
    submit_version: int = 0
    started_at: float = 0.0
    completed_at: float = 0.0
    # Full History object from the agent runtime; kept for audits, not serialized.
    history: object | None = None

    @property
    def model_versions(self) -> list[int]:
        versions: list[int] = []
        for turn in self.turns:
            versions.extend(turn.versions)
        return versions

    @property
    def first_version(self) -> int:
        versions = self.model_versions
        return versions[0] if versions else self.submit_version

    @property
    def spans_versions(self) -> bool:
        return len(set(self.model_versions)) > 1

    @property
    def n_search_turns(self) -> int:
        return sum(1 for t in self.turns if t.action_kind == "search" and t.effective)

    @property
    def n_tool_calls(self) -> int:
        return sum(
            1
            for t in self.turns
            if t.action_kind in ("search", "browse") and t.effective
        )

    def to_json(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "turns": [t.output for t in self.turns],
            "actions": [
                {"kind": t.action_kind, "payload": t.action_payload, "effective": t.effective}
                for t in self.turns
            ],
            "tool_results": [t.tool_result for t in self.turns],
            "model_versions": self.model_versions,
            "reward": self.reward.to_json() if self.reward else None,
            "advantage": self.advantage,
            "valid": self.valid,
        }


def trajectories_to_jsonl(trajectories: list["Trajectory"]) -> str:
    import json

    return "\n".join(json.dumps(t.to_json(), sort_keys=True) for t in trajectories)
