"""Agent trajectory state machine.

Prompt construction under two history policies, tagged-action parsing, tool
dispatch, and budget enforcement (turn limit, minimum turns, character
windows). The trajectory itself is a generator that yields stage requests
(generate / search / browse) and receives their results, so the same state
machine can be driven synchronously against live clients or by the
discrete-event scheduler with simulated latencies.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Generator

from .types import (
    GenerationClient,
    GenerationFailed,
    QAItem,
    ToolClient,
    ToolUnavailable,
    Trajectory,
    Turn,
)

SYSTEM_PREAMBLE = (
    "You are a research assistant that answers questions using a search engine "
    "and a web browser. Emit <search> query </search> to search, "
    "<access> url </access> to open a page, and <answer> final answer </answer> "
    "when you are confident."
)

FORCED_ANSWER_PROMPT = (
    "This is your final turn. Respond only with your answer inside "
    "<answer></answer> tags."
)

SUMMARY_MARKER = "Summarize the page content below into a compact summary."

# How much of a raw thought survives compaction in reasoning mode.
COMPACT_THOUGHT_CHARS = 200


class MalformedTag(Exception):
    """A tag opened but never closed, or carried an empty payload."""


class TurnLimitExceeded(Exception):
    pass


class AgentMode(Enum):
    BASE = "base"
    REASONING = "reasoning"


class ActionKind(Enum):
    THINK = "think"
    SEARCH = "search"
    BROWSE = "browse"
    SUMMARIZE = "summarize"
    ANSWER = "answer"


@dataclass(frozen=True)
class AgentAction:
    kind: ActionKind
    payload: str
    think: str = ""


class HistoryKind(Enum):
    MODEL_TEXT = "model_text"
    SEARCH_RESULT = "search_result"
    PAGE_SUMMARY = "page_summary"
    TOOL_CALL = "tool_call"
    COMPACT_THOUGHT = "compact_thought"


@dataclass(frozen=True)
class HistoryEntry:
    kind: HistoryKind
    text: str
    turn: int
    chars: int


class History:
    """Ordered, append-only record of everything that happened in a trajectory."""

    def __init__(self):
        self._entries: list[HistoryEntry] = []

    def append(self, kind: HistoryKind, text: str, turn: int) -> HistoryEntry:
        if turn < 0:
            raise ValueError("turn must be non-negative")
        if self._entries and turn < self._entries[-1].turn:
            raise ValueError("history turns must be non-decreasing")
        entry = HistoryEntry(kind, text, turn, len(text))
        self._entries.append(entry)
        return entry

    @property
    def entries(self) -> tuple[HistoryEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def serialize(self) -> list[str]:
        return [f"{e.kind.value}|{e.turn}|{e.text}" for e in self._entries]


@dataclass(frozen=True)
class BudgetConfig:
    turn_limit: int = 32
    min_turns: int = 0
    history_window_chars: int = 25_000
    prompt_char_cap: int = 10_000

    def __post_init__(self):
        if self.turn_limit < 1:
            raise ValueError("turn_limit must be positive")
        if self.min_turns < 0:
            raise ValueError("min_turns must be non-negative")
        if self.min_turns >= self.turn_limit:
            raise ValueError("min_turns must be strictly below turn_limit")
        if self.history_window_chars < 1 or self.prompt_char_cap < 1:
            raise ValueError("character budgets must be positive")

    @classmethod
    def reasoning(cls, **overrides) -> "BudgetConfig":
        defaults = dict(turn_limit=128, min_turns=0,
                        history_window_chars=25_000, prompt_char_cap=10_000)
        defaults.update(overrides)
        return cls(**defaults)


_TAG_KINDS = {"search": ActionKind.SEARCH,
              "access": ActionKind.BROWSE,
              "answer": ActionKind.ANSWER}


def parse_action(model_output: str) -> AgentAction:
    """Extract the first tagged action from raw model output.

    The earliest opening tag among <search>, <access>, <answer> wins. Text
    preceding the tag is carried as think content. An unclosed or empty
    earliest tag raises MalformedTag even if a later tag is well-formed.
    Output with no tags at all is a Think action.
    """
    earliest: tuple[int, str] | None = None
    for name in _TAG_KINDS:
        pos = model_output.find(f"<{name}>")
        if pos != -1 and (earliest is None or pos < earliest[0]):
            earliest = (pos, name)
    if earliest is None:
        return AgentAction(ActionKind.THINK, model_output.strip())
    pos, name = earliest
    open_tag = f"<{name}>"
    close = model_output.find(f"</{name}>", pos + len(open_tag))
    if close == -1:
        raise MalformedTag(f"unclosed <{name}> tag")
    payload = model_output[pos + len(open_tag):close].strip()
    if not payload:
        raise MalformedTag(f"empty <{name}> payload")
    return AgentAction(_TAG_KINDS[name], payload, think=model_output[:pos].strip())


def _render_entry(entry: HistoryEntry) -> str:
    kind = entry.kind
    if kind is HistoryKind.MODEL_TEXT:
        return f"Assistant:\n{entry.text}"
    if kind is HistoryKind.COMPACT_THOUGHT:
        return f"Assistant (condensed):\n{entry.text}"
    if kind is HistoryKind.TOOL_CALL:
        return f"Tool call: {entry.text}"
    if kind is HistoryKind.PAGE_SUMMARY:
        return f"Page summary:\n{entry.text}"
    return entry.text  # search results render themselves


def compact_entries(history: History) -> list[HistoryEntry]:
    """Reasoning-mode view: raw thoughts shrink to their head, tool records stay."""
    out: list[HistoryEntry] = []
    for entry in history.entries:
        if entry.kind is HistoryKind.MODEL_TEXT:
            text = entry.text[:COMPACT_THOUGHT_CHARS]
            out.append(HistoryEntry(HistoryKind.COMPACT_THOUGHT, text, entry.turn, len(text)))
        else:
            out.append(entry)
    return out


def build_prompt(mode: AgentMode, history: History, budget: BudgetConfig,
                 question: str = "") -> str:
    """Render the prompt for the next generation.

    Base mode concatenates the full history in order. Reasoning mode compacts
    thoughts, keeps only the most recent window of entries (dropping oldest
    whole entries first), then enforces the overall prompt character cap by
    dropping further old entries; the preamble and question are never cut.
    """
    head_parts = [SYSTEM_PREAMBLE]
    if question:
        head_parts.append(f"Question: {question}")
    head = "\n\n".join(head_parts)

    if mode is AgentMode.BASE:
        body = "\n".join(_render_entry(e) for e in history.entries)
        return head + ("\n\n" + body if body else "")

    compacted = compact_entries(history)
    rendered = [_render_entry(e) for e in compacted]
    kept = _suffix_within(rendered, budget.history_window_chars)
    while kept and len(head) + 2 + _joined_len(kept) > budget.prompt_char_cap:
        kept = kept[1:]
    body = "\n".join(kept)
    return head + ("\n\n" + body if body else "")


def _joined_len(parts: list[str]) -> int:
    return sum(len(p) for p in parts) + max(0, len(parts) - 1)


def _suffix_within(rendered: list[str], window: int) -> list[str]:
    kept: list[str] = []
    total = 0
    for part in reversed(rendered):
        cost = len(part) + (1 if kept else 0)
        if total + cost > window:
            break
        kept.append(part)
        total += cost
    kept.reverse()
    return kept


def step(state: History, output: str, budget: BudgetConfig,
         turn: int) -> tuple[AgentAction, bool]:
    """Parse one model output and apply budget rules.

    An Answer before min_turns is suppressed into a Think. At the last
    allowed turn any non-Answer action is rewritten into a forced-answer
    request (its payload is the answer-only instruction) and is not
    dispatched. The bool is False whenever the parsed action was rewritten.
    """
    if turn >= budget.turn_limit:
        raise TurnLimitExceeded(f"turn {turn} >= limit {budget.turn_limit}")
    action = parse_action(output)
    if action.kind is ActionKind.ANSWER and turn < budget.min_turns:
        return AgentAction(ActionKind.THINK, output.strip(), think=action.think), False
    if turn == budget.turn_limit - 1 and action.kind is not ActionKind.ANSWER:
        return AgentAction(ActionKind.THINK, FORCED_ANSWER_PROMPT, think=output.strip()), False
    return action, True


@dataclass(frozen=True)
class GenerateRequest:
    prompt: str
    purpose: str = "action"  # "action" | "summary"


@dataclass(frozen=True)
class SearchToolRequest:
    query: str
    k: int = 5


@dataclass(frozen=True)
class BrowseToolRequest:
    url: str


@dataclass
class ToolResult:
    text: str
    error: str | None = None


StageRequest = GenerateRequest | SearchToolRequest | BrowseToolRequest


def summarize_instruction(page_text: str) -> str:
    return f"{SUMMARY_MARKER}\nPage content:\n{page_text}"


def trajectory_machine(
    qa: QAItem,
    budget: BudgetConfig,
    mode: AgentMode = AgentMode.BASE,
    k: int = 5,
) -> Generator[StageRequest, object, Trajectory]:
    """Drive one rollout as a resumable state machine.

    Yields stage requests; expects a Generation back for GenerateRequest
    (None signals generation failure and aborts the trajectory) and a
    ToolResult back for tool requests (error text is recorded as the
    observation and the trajectory continues). Returns the finished
    Trajectory via StopIteration.
    """
    if not qa.question:
        raise ValueError("qa.question must be non-empty")
    history = History()
    traj = Trajectory(qa_id=qa.id)

    for turn_idx in range(budget.turn_limit):
        final = turn_idx == budget.turn_limit - 1
        prompt = build_prompt(mode, history, budget, question=qa.question)
        if final:
            prompt = prompt + "\n\n" + FORCED_ANSWER_PROMPT
        gen = yield GenerateRequest(prompt)
        if gen is None:
            traj.valid = False
            break
        versions = [gen.version]
        if gen.policy_step is not None:
            traj.policy_steps.append(gen.policy_step)
        history.append(HistoryKind.MODEL_TEXT, gen.text, turn_idx)

        malformed = False
        try:
            action, effective = step(history, gen.text, budget, turn_idx)
        except MalformedTag:
            malformed = True
            action = AgentAction(ActionKind.THINK, gen.text.strip())
            effective = False

        tool_result: str | None = None
        summary: str | None = None
        aborted = False
        if effective and action.kind is ActionKind.SEARCH:
            history.append(HistoryKind.TOOL_CALL, f"search: {action.payload}", turn_idx)
            res = yield SearchToolRequest(action.payload, k)
            tool_result = res.text if res.error is None else f"tool error: {res.error}"
            history.append(HistoryKind.SEARCH_RESULT, tool_result, turn_idx)
        elif effective and action.kind is ActionKind.BROWSE:
            history.append(HistoryKind.TOOL_CALL, f"access: {action.payload}", turn_idx)
            res = yield BrowseToolRequest(action.payload)
            if res.error is not None:
                # The error observation stands in for the page summary so a
                # Browse is always followed by exactly one PageSummary entry.
                summary = f"tool error: {res.error}"
                tool_result = summary
                history.append(HistoryKind.PAGE_SUMMARY, summary, turn_idx)
            else:
                tool_result = res.text
                sprompt = (build_prompt(mode, history, budget, question=qa.question)
                           + "\n\n" + summarize_instruction(res.text))
                sgen = yield GenerateRequest(sprompt, purpose="summary")
                if sgen is None:
                    traj.valid = False
                    aborted = True
                else:
                    versions.append(sgen.version)
                    if sgen.policy_step is not None:
                        traj.policy_steps.append(sgen.policy_step)
                    summary = sgen.text
                    history.append(HistoryKind.PAGE_SUMMARY, summary, turn_idx)

        traj.turns.append(Turn(
            index=turn_idx,
            output=gen.text,
            action_kind=action.kind.value,
            action_payload=action.payload,
            effective=effective,
            malformed=malformed,
            tool_result=tool_result,
            summary=summary,
            versions=tuple(versions),
        ))
        if aborted:
            break
        if effective and action.kind is ActionKind.ANSWER:
            traj.answer = action.payload
            break
        if final:
            break
    traj.history = history
    return traj


def run_trajectory(
    qa: QAItem,
    policy: GenerationClient,
    env: ToolClient,
    budget: BudgetConfig,
    mode: AgentMode = AgentMode.BASE,
    k: int = 5,
) -> Trajectory:
    """Drive the trajectory machine synchronously against live clients."""
    machine = trajectory_machine(qa, budget, mode, k)
    try:
        request = next(machine)
        while True:
            result: object
            if isinstance(request, GenerateRequest):
                try:
                    result = policy.generate(request.prompt)
                except GenerationFailed:
                    result = None
            elif isinstance(request, SearchToolRequest):
                try:
                    result = ToolResult(env.search(request.query, request.k).render())
                except ToolUnavailable as exc:
                    result = ToolResult("", error=str(exc))
            elif isinstance(request, BrowseToolRequest):
                try:
                    result = ToolResult(env.browse(request.url))
                except ToolUnavailable as exc:
                    result = ToolResult("", error=str(exc))
            else:  # pragma: no cover - requests are exhaustive
                raise TypeError(f"unknown stage request {request!r}")
            request = machine.send(result)
    except StopIteration as stop:
        return stop.value
