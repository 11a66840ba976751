"""Deterministic synthetic world for agent rollouts.

A small fact corpus with multi-hop chains, a term-overlap search endpoint,
a browse endpoint, scripted mock policies, and seeded lognormal latency
models that reproduce heavy-tailed trajectory durations.
"""

from __future__ import annotations

import json
import re
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .agent_runtime import FORCED_ANSWER_PROMPT
from .types import (
    Generation,
    GenerationFailed,
    QAItem,
    SearchHit,
    SearchResults,
    ToolUnavailable,
)

SNIPPET_CHARS = 300
SNIPPET_RADIUS = 150
DEFAULT_TOP_K = 5

_ENTITY = r"[A-Z][a-z]+ [A-Z][a-z]+"
LINK_RE = re.compile(rf"({_ENTITY}) is linked to ({_ENTITY})\.")
CODE_RE = re.compile(rf"the secret code of ({_ENTITY}) is ([a-z0-9]+)\.")
QUESTION_START_RE = re.compile(rf"links from ({_ENTITY})\?")

_SYLLABLES = [c + v for c in "bdklmnrstvz" for v in "aeiou"]
_TYPE_NOUNS = ["Station", "Bridge", "Museum", "Library", "Tower", "Garden", "Harbor", "Mill"]
_FILLER = [
    "quiet", "meadow", "valley", "rainfall", "seasonal", "harvest", "lantern",
    "pebble", "orchard", "breeze", "willow", "copper", "saddle", "thread",
    "hollow", "ridge", "timber", "granite", "basin", "plateau", "drizzle",
    "clover", "fern", "thistle", "brook", "marsh", "heather", "slate",
]


@dataclass(frozen=True)
class CorpusFact:
    fact_id: str
    entity: str
    statement: str
    url: str


@dataclass(frozen=True)
class Page:
    url: str
    title: str
    body: str
    facts: tuple[CorpusFact, ...]


@dataclass(frozen=True)
class HopChain:
    qa_id: str
    fact_ids: tuple[str, ...]


def _extract_facts(url: str, body: str) -> tuple[CorpusFact, ...]:
    found: list[tuple[int, str, str]] = []
    for match in LINK_RE.finditer(body):
        found.append((match.start(), match.group(1), match.group(0)))
    for match in CODE_RE.finditer(body):
        found.append((match.start(), match.group(1), match.group(0)))
    found.sort()
    return tuple(
        CorpusFact(f"{url}#f{i}", entity, statement, url)
        for i, (_, entity, statement) in enumerate(found)
    )


class Corpus:
    """Immutable page store plus the hop chains that define QA items."""

    def __init__(self, pages: dict[str, Page], chains: list[HopChain]):
        self.pages = dict(pages)
        self.chains = list(chains)
        self._facts: dict[str, CorpusFact] = {}
        for page in self.pages.values():
            for fact in page.facts:
                self._facts[fact.fact_id] = fact
        for chain in self.chains:
            for fid in chain.fact_ids:
                if fid not in self._facts:
                    raise ValueError(f"chain {chain.qa_id} references unknown fact {fid}")
        self._counters = {
            url: Counter(_tokens(page.body)) for url, page in self.pages.items()
        }
        self._lower = {url: page.body.lower() for url, page in self.pages.items()}

    def fact(self, fact_id: str) -> CorpusFact:
        return self._facts[fact_id]

    def entities(self) -> list[str]:
        return sorted({f.entity for f in self._facts.values()})

    def qa_items(self) -> list[QAItem]:
        items = []
        for chain in self.chains:
            facts = [self.fact(fid) for fid in chain.fact_ids]
            start = facts[0].entity
            code_match = CODE_RE.search(facts[-1].statement)
            if code_match is None:
                raise ValueError(f"chain {chain.qa_id} does not end in a code fact")
            code = code_match.group(2)
            if chain.qa_id.startswith("triv"):
                question = (
                    f"The records state that the secret code of {start} is {code}. "
                    "What is that secret code?"
                )
            else:
                question = (
                    "What is the secret code of the final entity reached by "
                    f"following links from {start}?"
                )
            items.append(QAItem(id=chain.qa_id, question=question, answer=code))
        return items

    def to_json(self) -> dict:
        return {
            "pages": [
                {"url": p.url, "title": p.title, "body": p.body}
                for p in (self.pages[u] for u in sorted(self.pages))
            ],
            "chains": [
                {"qa_id": c.qa_id, "facts": list(c.fact_ids)} for c in self.chains
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Corpus":
        pages = {}
        for raw in data["pages"]:
            url = raw["url"]
            pages[url] = Page(url, raw["title"], raw["body"], _extract_facts(url, raw["body"]))
        chains = [HopChain(c["qa_id"], tuple(c["facts"])) for c in data["chains"]]
        return cls(pages, chains)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        return cls.from_json(json.loads(Path(path).read_text()))


def _tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def search(corpus: Corpus, query: str, k: int = DEFAULT_TOP_K) -> SearchResults:
    """Rank pages by total occurrences of query tokens in the page body.

    Ties break by url ascending. The snippet is a window of the body around
    the first occurrence of the best-matching query token.
    """
    if not query.strip():
        raise ValueError("query must be non-empty")
    tokens = _tokens(query)
    hits: list[SearchHit] = []
    for url in sorted(corpus.pages):
        counter = corpus._counters[url]
        score = sum(counter.get(t, 0) for t in tokens)
        if score == 0:
            continue
        best = max(tokens, key=lambda t: (counter.get(t, 0), -tokens.index(t)))
        pos = corpus._lower[url].find(best)
        start = max(0, pos - SNIPPET_RADIUS)
        snippet = corpus.pages[url].body[start:start + SNIPPET_CHARS]
        hits.append(SearchHit(snippet, url, float(score)))
    hits.sort(key=lambda h: (-h.score, h.url))
    return SearchResults(tuple(hits[:k]))


def browse(corpus: Corpus, url: str) -> str:
    page = corpus.pages.get(url)
    return page.body if page is not None else "404"


class SimEnvironment:
    """ToolClient over a corpus, with optional seeded endpoint failures."""

    def __init__(self, corpus: Corpus, fail_rate: float = 0.0, seed: int = 0):
        self.corpus = corpus
        self._fail_rate = fail_rate
        self._rng = np.random.default_rng([seed, 17]) if fail_rate > 0 else None

    def _maybe_fail(self, what: str) -> None:
        if self._rng is not None and self._rng.random() < self._fail_rate:
            raise ToolUnavailable(f"{what} endpoint unavailable")

    def search(self, query: str, k: int = DEFAULT_TOP_K) -> SearchResults:
        self._maybe_fail("search")
        return search(self.corpus, query, k)

    def browse(self, url: str) -> str:
        self._maybe_fail("browse")
        return browse(self.corpus, url)


# --- corpus generation ---------------------------------------------------


class _NameMaker:
    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._used: set[str] = set()

    def word(self, n_syllables: int = 3) -> str:
        while True:
            w = "".join(
                _SYLLABLES[self._rng.integers(len(_SYLLABLES))]
                for _ in range(n_syllables)
            )
            if w not in self._used:
                self._used.add(w)
                return w

    def entity(self) -> str:
        noun = _TYPE_NOUNS[self._rng.integers(len(_TYPE_NOUNS))]
        return f"{self.word().capitalize()} {noun}"


def _page_body(entity: str, fact_sentence: str, rng: np.random.Generator) -> str:
    opener = (
        f"{entity}. {fact_sentence} profile of {entity}. "
        f"{entity} appears in the regional survey records. "
        f"{entity} was catalogued by the survey."
    )
    filler = " ".join(_FILLER[rng.integers(len(_FILLER))] for _ in range(40))
    return f"{opener} {filler}."


def _url_for(entity: str) -> str:
    return "wiki/" + entity.lower().replace(" ", "-")


def generate_corpus(
    chains: int = 4,
    hops: int = 2,
    distractors: int = 4,
    seed: int = 0,
    trivial: bool = False,
) -> Corpus:
    """Build a synthetic world of linked pages.

    Each chain is a run of `hops` pages where page j states a link to page
    j+1 and the final page states a secret code; the derived question asks
    for that code starting from the first entity. Trivial corpora embed the
    code in the question itself, so no tool use is ever needed.
    """
    if chains < 1 or hops < 1:
        raise ValueError("chains and hops must be positive")
    rng = np.random.default_rng([seed, 11])
    names = _NameMaker(rng)
    pages_raw: list[dict] = []
    chains_raw: list[dict] = []
    prefix = "triv" if trivial else "qa"
    for c in range(chains):
        entities = [names.entity() for _ in range(hops)]
        code = names.word()
        fact_ids = []
        for j, entity in enumerate(entities):
            if j < hops - 1:
                fact = f"{entity} is linked to {entities[j + 1]}."
            else:
                fact = f"the secret code of {entity} is {code}."
            url = _url_for(entity)
            pages_raw.append({"url": url, "title": entity,
                              "body": _page_body(entity, fact, rng)})
            fact_ids.append(f"{url}#f0")
        chains_raw.append({"qa_id": f"{prefix}-{c:04d}", "facts": fact_ids})
    for _ in range(distractors):
        entity = names.entity()
        code = names.word()
        fact = f"the secret code of {entity} is {code}."
        url = _url_for(entity)
        pages_raw.append({"url": url, "title": entity,
                          "body": _page_body(entity, fact, rng)})
    return Corpus.from_json({"pages": pages_raw, "chains": chains_raw})


# --- prompt navigation helpers (used by scripts and the toy policy) ------


def extract_start_entity(text: str) -> str | None:
    match = QUESTION_START_RE.search(text)
    return match.group(1) if match else None


def walk_links(text: str, start: str, max_hops: int = 16) -> str:
    """Follow `X is linked to Y` statements from start; returns the last entity."""
    links = {a: b for a, b in LINK_RE.findall(text)}
    current = start
    seen = {current}
    for _ in range(max_hops):
        nxt = links.get(current)
        if nxt is None or nxt in seen:
            break
        seen.add(nxt)
        current = nxt
    return current

def find_code(text: str, entity: str) -> str | None:
    match = re.search(
        rf"the secret code of {re.escape(entity)} is ([a-z0-9]+)", text)
    return match.group(1) if match else None


def first_code(text: str) -> str | None:
    match = CODE_RE.search(text)
    return match.group(2) if match else None


# --- scripted policies ----------------------------------------------------


class PolicyScript(Protocol):
    def respond(self, prompt: str, rng: np.random.Generator) -> str: ...


def scripted_generate(prompt: str, script: PolicyScript, seed: int) -> str:
    """Deterministic mock generation: randomness is keyed on (seed, prompt)."""
    rng = np.random.default_rng([seed, zlib.crc32(prompt.encode("utf-8"))])
    return script.respond(prompt, rng)


class OracleChainScript:
    """Follows the hop chain revealed by search results and answers the code."""

    def respond(self, prompt: str, rng: np.random.Generator) -> str:
        start = extract_start_entity(prompt)
        if start is None:
            code = first_code(prompt)
            return f"<answer>{code}</answer>" if code else "no chain to follow."
        tail = walk_links(prompt, start)
        code = find_code(prompt, tail)
        if code:
            return f"<answer>{code}</answer>"
        if FORCED_ANSWER_PROMPT in prompt:
            return "<answer>unknown</answer>"
        return f"<search>{tail}</search>"


class EagerAnswerScript:
    """Guesses immediately on a fresh prompt; navigates properly once pushed."""

    def respond(self, prompt: str, rng: np.random.Generator) -> str:
        start = extract_start_entity(prompt)
        if start is None:
            code = first_code(prompt)
            return f"<answer>{code}</answer>" if code else "<answer>unknown</answer>"
        tail = walk_links(prompt, start)
        code = find_code(prompt, tail)
        if code:
            return f"<answer>{code}</answer>"
        if "Assistant:" not in prompt and "Search results:" not in prompt:
            return "<answer>unknown</answer>"
        if FORCED_ANSWER_PROMPT in prompt:
            return "<answer>unknown</answer>"
        return f"<search>{tail}</search>"


class RandomTaggedScript:
    """Emits random valid actions; complies with the forced-answer instruction."""

    def __init__(self, queries: list[str], urls: list[str] | None = None,
                 answer_prob: float = 0.15, browse_prob: float = 0.15,
                 think_prob: float = 0.25):
        if not queries:
            raise ValueError("queries pool must be non-empty")
        self.queries = list(queries)
        self.urls = list(urls or [])
        self.answer_prob = answer_prob
        self.browse_prob = browse_prob if self.urls else 0.0
        self.think_prob = think_prob
        self.words = sorted({w for q in queries for w in q.split()}) or ["unknown"]

    def respond(self, prompt: str, rng: np.random.Generator) -> str:
        if FORCED_ANSWER_PROMPT in prompt:
            return f"<answer>{self.words[rng.integers(len(self.words))]}</answer>"
        roll = rng.random()
        if roll < self.answer_prob:
            return f"<answer>{self.words[rng.integers(len(self.words))]}</answer>"
        roll -= self.answer_prob
        if roll < self.browse_prob:
            return f"<access>{self.urls[rng.integers(len(self.urls))]}</access>"
        roll -= self.browse_prob
        if roll < self.think_prob:
            return "weighing the evidence gathered so far."
        return f"<search>{self.queries[rng.integers(len(self.queries))]}</search>"


class SilentScript:
    """Never emits a tag."""

    def respond(self, prompt: str, rng: np.random.Generator) -> str:
        return "no conclusive action."


class ReplayScript:
    """Plays back a fixed list of outputs; raises when exhausted."""

    def __init__(self, outputs: list[str]):
        self._outputs = list(outputs)
        self._index = 0

    def respond(self, prompt: str, rng: np.random.Generator) -> str:
        if self._index >= len(self._outputs):
            raise GenerationFailed("replay script exhausted")
        out = self._outputs[self._index]
        self._index += 1
        return out


class AnswerScript:
    def __init__(self, text: str = "done"):
        self.text = text

    def respond(self, prompt: str, rng: np.random.Generator) -> str:
        return f"<answer>{self.text}</answer>"


class ScriptedClient:
    """GenerationClient adapter over a policy script."""

    def __init__(self, script: PolicyScript, seed: int = 0, version: int = 0):
        self.script = script
        self.seed = seed
        self.version = version

    def generate(self, prompt: str) -> Generation:
        return Generation(scripted_generate(prompt, self.script, self.seed), self.version)


class ScriptedBackend:
    """Scheduler rollout backend over a corpus and one shared policy script.

    Each task gets its own derived seed, so trajectory content depends only
    on (seed, task), never on how the scheduler interleaves tasks.
    """

    def __init__(self, corpus: Corpus, script: PolicyScript, seed: int):
        self.corpus = corpus
        self.script = script
        self.seed = seed
        self._task_seeds: dict[int, int] = {}

    def _seed_for(self, task_index: int) -> int:
        cached = self._task_seeds.get(task_index)
        if cached is None:
            cached = int(np.random.default_rng([self.seed, 41, task_index])
                         .integers(2**31))
            self._task_seeds[task_index] = cached
        return cached

    def generate(self, task_index: int, prompt: str) -> Generation:
        return Generation(scripted_generate(prompt, self.script,
                                            self._seed_for(task_index)))

    def search(self, query: str, k: int = DEFAULT_TOP_K) -> SearchResults:
        return search(self.corpus, query, k)

    def browse(self, url: str) -> str:
        return browse(self.corpus, url)


# --- latency models --------------------------------------------------------

GENERATE = "generate"
TOOL = "tool"
_KIND_IDS = {GENERATE: 101, TOOL: 202}


@dataclass(frozen=True)
class LatencyModel:
    """Lognormal stage durations in simulated seconds."""

    mu_generate: float = 0.0
    sigma_generate: float = 1.0
    mu_tool: float = -1.0
    sigma_tool: float = 0.5
    seed: int = 0

    def params(self, kind: str) -> tuple[float, float]:
        if kind == GENERATE:
            return self.mu_generate, self.sigma_generate
        if kind == TOOL:
            return self.mu_tool, self.sigma_tool
        raise ValueError(f"unknown stage kind {kind!r}")


class LatencySampler:
    """Seeded stream of durations; generate and tool streams are independent."""

    def __init__(self, model: LatencyModel):
        self.model = model
        self._rngs = {
            kind: np.random.default_rng([model.seed, kid])
            for kind, kid in _KIND_IDS.items()
        }

    def sample(self, kind: str) -> float:
        mu, sigma = self.model.params(kind)
        return float(self._rngs[kind].lognormal(mu, sigma))


def sample_duration(sampler: LatencySampler, kind: str) -> float:
    return sampler.sample(kind)


class PerTaskLatency:
    """Independent substream per (task, kind), so durations do not depend on
    how the scheduler interleaves tasks: the same seed yields the same stage
    durations under every scheduling mode."""

    def __init__(self, model: LatencyModel):
        self.model = model
        self._rngs: dict[tuple[int, int], np.random.Generator] = {}

    def sample(self, task_index: int, kind: str) -> float:
        key = (task_index, _KIND_IDS[kind])
        rng = self._rngs.get(key)
        if rng is None:
            rng = np.random.default_rng([self.model.seed, task_index, key[1]])
            self._rngs[key] = rng
        mu, sigma = self.model.params(kind)
        return float(rng.lognormal(mu, sigma))


class FixedPerTaskLatency:
    """Scripted durations: one fixed generate duration per task."""

    def __init__(self, generate_by_task: dict[int, float] | list[float],
                 tool: float = 0.0, generate_default: float = 1.0):
        if isinstance(generate_by_task, list):
            generate_by_task = dict(enumerate(generate_by_task))
        self._generate = generate_by_task
        self._tool = tool
        self._default = generate_default

    def sample(self, task_index: int, kind: str) -> float:
        if kind == TOOL:
            return self._tool
        return self._generate.get(task_index, self._default)
