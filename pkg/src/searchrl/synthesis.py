"""QA synthesis agent: iterative fact injection and fuzzing over seed questions.

Each modification is followed by a three-step quality gate (clarity and
groundedness, no-tool difficulty measurement, answer uniqueness). A separate
difficulty filter reproduces the screening applied to pre-existing QA
datasets: questions must be solvable, not too easy, and must actually
require searching.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Protocol

from .rewards import answer_tokens
from .sim_env import Corpus
from .types import Fact, FactLedger, GenerationClient, QAItem, SynthAction, Trajectory


class NoEntityFound(Exception):
    """No entity in the question has an unused fact available."""


class FactSourceEmpty(Exception):
    """The fact source holds no facts at all."""


class NothingToFuzz(Exception):
    """No fuzz rule matches any span of the question."""


class JudgeUnavailable(Exception):
    """The judge could not be reached; the item is quarantined."""


class Judge(Protocol):
    def clarity_ok(self, question: str) -> bool: ...

    def grounded_ok(self, question: str, answer: str, ledger: FactLedger) -> bool: ...

    def is_correct(self, question: str, gold: str, predicted: str) -> bool: ...

    def is_alternative(self, question: str, gold: str, candidate: str,
                       ledger: FactLedger) -> bool: ...


class RuleJudge:
    """Deterministic stand-in for an LLM judge."""

    def clarity_ok(self, question: str) -> bool:
        return len(question.strip()) >= 10 and question.strip().endswith("?")

    def grounded_ok(self, question: str, answer: str, ledger: FactLedger) -> bool:
        return bool(answer.strip()) and all(f.statement.strip() for f in ledger.facts)

    def is_correct(self, question: str, gold: str, predicted: str) -> bool:
        return answer_tokens(gold) == answer_tokens(predicted)

    def is_alternative(self, question: str, gold: str, candidate: str,
                       ledger: FactLedger) -> bool:
        return False


class FactSource(Protocol):
    def entities(self) -> list[str]: ...

    def fact_for(self, entity: str, ledger: FactLedger) -> Fact | None: ...

    def total_facts(self) -> int: ...


class ScriptedFactSource:
    """Fixed entity -> facts table; facts are handed out in order, skipping
    anything already on the ledger."""

    def __init__(self, table: dict[str, list[Fact]]):
        self._table = {k: list(v) for k, v in table.items()}

    def entities(self) -> list[str]:
        return list(self._table)

    def fact_for(self, entity: str, ledger: FactLedger) -> Fact | None:
        for fact in self._table.get(entity, []):
            if not ledger.contains(fact.entity, fact.statement):
                return fact
        return None

    def total_facts(self) -> int:
        return sum(len(v) for v in self._table.values())


class CorpusFactSource:
    """Looks up page facts for entities mentioned in a question."""

    def __init__(self, corpus: Corpus):
        self._by_entity: dict[str, list[Fact]] = {}
        for url in sorted(corpus.pages):
            for cf in corpus.pages[url].facts:
                self._by_entity.setdefault(cf.entity, []).append(
                    Fact(cf.entity, cf.statement, source=cf.url))

    def entities(self) -> list[str]:
        return sorted(self._by_entity)

    def fact_for(self, entity: str, ledger: FactLedger) -> Fact | None:
        for fact in self._by_entity.get(entity, []):
            if not ledger.contains(fact.entity, fact.statement):
                return fact
        return None

    def total_facts(self) -> int:
        return sum(len(v) for v in self._by_entity.values())


def _next_round(item: QAItem) -> int:
    return item.lineage[-1].round + 1 if item.lineage else 1


def inject(item: QAItem, facts: FactSource, judge: Judge) -> QAItem:
    """Embed one related fact into the question.

    Anchor entities are those mentioned in the question (reading order),
    then entities already on the ledger: once an entity mention has been
    replaced by a description, further facts about it attach as qualifying
    clauses with the name masked, so the question never reveals it again.
    The answer never changes and the fact lands on the ledger. The judge is
    accepted for interface parity with generative rewriters; this rule-based
    injector does not consult it.
    """
    if facts.total_facts() == 0:
        raise FactSourceEmpty("fact source holds no facts")
    candidates = [e for _, e in sorted(
        (item.question.find(e), e) for e in facts.entities() if e in item.question)]
    for fact in item.ledger.facts:
        if fact.entity not in item.question and fact.entity not in candidates:
            candidates.append(fact.entity)
    chosen: tuple[str, Fact] | None = None
    for entity in candidates:
        fact = facts.fact_for(entity, item.ledger)
        if fact is not None:
            chosen = (entity, fact)
            break
    if chosen is None:
        raise NoEntityFound(f"no injectable entity for question {item.id!r}")
    entity, fact = chosen
    statement = fact.statement.rstrip(".")
    if entity in item.question and statement.startswith(entity):
        description = "the one that " + statement[len(entity):].strip()
        new_question = item.question.replace(entity, description, 1)
        diff = f"{entity} -> {description}"
    else:
        clause = statement if entity in item.question \
            else statement.replace(entity, "this entity")
        base = item.question.rstrip("?").rstrip()
        new_question = f"{base}, given that {clause}?"
        diff = f"appended: {clause}"
    ledger = item.ledger.copy()
    ledger.add(fact)
    lineage = item.lineage + (SynthAction("injection", _next_round(item), diff),)
    return QAItem(item.id, new_question, item.answer, ledger, lineage)


_FUZZ_ENTITY_TABLE = {
    "Catskill Mountain Railroad": "a historic mountain railway",
}

_TYPE_NOUN_MAP = {
    "Railroad": "railway", "Railway": "railway", "Station": "station",
    "Bridge": "bridge", "Museum": "museum", "Library": "library",
    "Tower": "tower", "Garden": "garden", "Harbor": "harbor", "Mill": "mill",
    "College": "college", "University": "university", "Post": "post",
}

_TYPED_ENTITY_RE = re.compile(
    r"\b((?:[A-Z][\w']+ )+)(" + "|".join(_TYPE_NOUN_MAP) + r")\b")
_YEAR_RE = re.compile(r"\b(1[6-9]\d\d|20\d\d)\b")
_PERSON_RE = re.compile(r"\b([A-Z][a-z]+ (?:[A-Z]\.? )?[A-Z][a-z]+)\b")


def _decade_phrase(year: int) -> str:
    decade = (year // 10) * 10
    last = year % 10
    part = "early" if last <= 4 else ("mid" if last <= 7 else "late")
    return f"the {part} {decade}s"


def fuzz(item: QAItem, judge: Judge) -> QAItem:
    """Blur one concrete span of the question into a vaguer description.

    Rule order: known entity categories (including typed names like
    '<Name> Station'), then exact years into decade phrases, then person-like
    proper names. The first matching rule fires on its leftmost span. Answer
    and ledger are untouched.
    """
    question = item.question
    span = replacement = None

    for name, category in _FUZZ_ENTITY_TABLE.items():
        if name in question:
            span, replacement = name, category
            break
    if span is None:
        m = _TYPED_ENTITY_RE.search(question)
        if m:
            words = m.group(1).split()
            middle = " ".join(w.lower() for w in words[1:])
            noun = _TYPE_NOUN_MAP[m.group(2)]
            descr = f"a historic {middle} {noun}" if middle else f"a historic {noun}"
            span, replacement = m.group(0), descr
    if span is None:
        m = _YEAR_RE.search(question)
        if m:
            span, replacement = m.group(0), _decade_phrase(int(m.group(0)))
    if span is None:
        m = _PERSON_RE.search(question)
        if m:
            span, replacement = m.group(0), "a certain individual"
    if span is None:
        raise NothingToFuzz(f"no fuzzable span in question {item.id!r}")

    new_question = question.replace(span, replacement, 1)
    lineage = item.lineage + (
        SynthAction("fuzz", _next_round(item), f"{span} -> {replacement}"),)
    return QAItem(item.id, new_question, item.answer, item.ledger.copy(), lineage)


@dataclass(frozen=True)
class VerificationReport:
    clarity_ok: bool
    grounded_ok: bool
    attempts: int
    correct: int
    uniqueness_ok: bool
    passed: bool

    def to_json(self) -> dict:
        return {
            "clarity_ok": self.clarity_ok,
            "grounded_ok": self.grounded_ok,
            "difficulty": {"attempts": self.attempts, "correct": self.correct},
            "uniqueness_ok": self.uniqueness_ok,
            "passed": self.passed,
        }


_NO_TOOL_PROMPT = (
    "Answer the question directly from your own knowledge, without any tools. "
    "Reply inside <answer></answer> tags.\nQuestion: "
)

_ANSWER_TAG_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


class FixedAnswerLRM:
    """No-tool reference model mock that always gives the same answer."""

    def __init__(self, text: str = "unknown", version: int = 0):
        self.text = text
        self.version = version

    def generate(self, prompt: str):
        from .types import Generation

        return Generation(f"<answer>{self.text}</answer>", self.version)


class KnownAnswerLRM:
    """No-tool reference model mock that knows the gold answer per question."""

    def __init__(self, answers_by_question: dict[str, str], version: int = 0):
        self._answers = dict(answers_by_question)
        self.version = version

    def generate(self, prompt: str):
        from .types import Generation

        for question, answer in self._answers.items():
            if question in prompt:
                return Generation(f"<answer>{answer}</answer>", self.version)
        return Generation("<answer>unknown</answer>", self.version)


class AnswerLeakLRM:
    """No-tool reference model mock that answers correctly exactly when a
    known gold answer leaked into the question text.

    This makes the difficulty gate reject self-answering variants, e.g. when
    injection embedded the fact that states the answer."""

    def __init__(self, answers: list[str], version: int = 0):
        self._answers = sorted({a for a in answers if a}, key=len, reverse=True)
        self.version = version

    def generate(self, prompt: str):
        from .types import Generation

        for answer in self._answers:
            if answer in prompt:
                return Generation(f"<answer>{answer}</answer>", self.version)
        return Generation("<answer>unknown</answer>", self.version)


def _extract_answer(text: str) -> str:
    m = _ANSWER_TAG_RE.search(text)
    return m.group(1).strip() if m else text.strip()


def verify(
    item: QAItem,
    judge: Judge,
    lrm: GenerationClient,
    attempts: int = 8,
    difficulty_threshold: float = 0.5,
) -> VerificationReport:
    """Three-step quality gate for a synthetic question.

    1. clarity and groundedness via the judge;
    2. the reference model answers `attempts` times with no tools, counting
       correct answers as the difficulty measure;
    3. mismatched answers are re-judged as possible alternative valid answers,
       any confirmed alternative voids uniqueness.

    Passing requires all boolean gates plus correct/attempts at or below the
    threshold, and a question the model always answers is always rejected.
    """
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    clarity = judge.clarity_ok(item.question)
    grounded = judge.grounded_ok(item.question, item.answer, item.ledger)
    correct = 0
    mismatched: list[str] = []
    for _ in range(attempts):
        predicted = _extract_answer(lrm.generate(_NO_TOOL_PROMPT + item.question).text)
        if judge.is_correct(item.question, item.answer, predicted):
            correct += 1
        else:
            mismatched.append(predicted)
    uniqueness = True
    for candidate in mismatched:
        if judge.is_alternative(item.question, item.answer, candidate, item.ledger):
            uniqueness = False
            break
    difficulty_ok = correct < attempts and correct / attempts <= difficulty_threshold
    passed = clarity and grounded and uniqueness and difficulty_ok
    return VerificationReport(clarity, grounded, attempts, correct, uniqueness, passed)


@dataclass(frozen=True)
class SynthesisConfig:
    max_rounds: int = 9
    per_seed_keep: int = 3
    attempts: int = 8
    difficulty_threshold: float = 0.5
    fuzz_after_facts: int = 3


@dataclass
class SynthesisOutput:
    item: QAItem
    report: VerificationReport

    def to_json(self) -> dict:
        return {
            "id": self.item.id,
            "question": self.item.question,
            "answer": self.item.answer,
            "ledger": self.item.ledger.to_json(),
            "lineage": [a.to_json() for a in self.item.lineage],
            "verification": self.report.to_json(),
        }


def synthesize(
    seed: QAItem,
    cfg: SynthesisConfig,
    facts: FactSource,
    judge: Judge,
    lrm: GenerationClient,
) -> list[SynthesisOutput]:
    """Evolve a seed question through injection and fuzz rounds.

    Injection runs until the ledger holds `fuzz_after_facts` facts, then the
    two actions alternate; when the preferred action has nothing to do, the
    other is tried, and the round loop stops once neither applies. Every
    candidate is verified; the most recent `per_seed_keep` passing variants
    are emitted, each with its verification report.
    """
    if not (judge.clarity_ok(seed.question)
            and judge.grounded_ok(seed.question, seed.answer, seed.ledger)):
        return []
    outputs: list[SynthesisOutput] = []
    current = seed
    last_action: str | None = None
    for _ in range(cfg.max_rounds):
        want_fuzz = (len(current.ledger) >= cfg.fuzz_after_facts
                     and last_action == "injection")
        candidate = None
        if want_fuzz:
            try:
                candidate, last_action = fuzz(current, judge), "fuzz"
            except NothingToFuzz:
                pass
        if candidate is None:
            try:
                candidate, last_action = inject(current, facts, judge), "injection"
            except (NoEntityFound, FactSourceEmpty):
                if want_fuzz:
                    break
                try:
                    candidate, last_action = fuzz(current, judge), "fuzz"
                except NothingToFuzz:
                    break
        report = verify(candidate, judge, lrm, cfg.attempts, cfg.difficulty_threshold)
        if report.passed:
            outputs.append(SynthesisOutput(candidate, report))
        current = candidate
    return outputs[-cfg.per_seed_keep:]


def filter_opensource(
    qa: QAItem,
    rollouts: list[Trajectory],
    accuracy_cutoff: float = 0.5,
    low_turn_threshold: int = 1,
    is_correct: Callable[[Trajectory], bool] | None = None,
) -> bool:
    """Difficulty filter for pre-existing QA data, judged from sampled rollouts.

    Drops a question when no rollout is correct, when accuracy reaches the
    cutoff, or when any correct rollout needed no more than
    `low_turn_threshold` search turns. Everything else is kept.
    """
    if not rollouts:
        return False
    if is_correct is None:
        is_correct = lambda t: t.reward is not None and t.reward.final >= 1.0
    correct = [t for t in rollouts if is_correct(t)]
    if not correct:
        return False
    if len(correct) / len(rollouts) >= accuracy_cutoff:
        return False
    if any(t.n_search_turns <= low_turn_threshold for t in correct):
        return False
    return True
