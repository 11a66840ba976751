"""End-to-end toy training: a learnable softmax policy drives rollouts under
the fully asynchronous scheduler, and each training step applies a clipped
group-relative policy-gradient update at weight publication time.

The policy only chooses among abstract action symbols (think / search /
browse / answer); a deterministic template layer turns the chosen symbol
into tagged text, extracting queries and answer candidates from the prompt.
Learning therefore means learning *when* to keep searching and when to
answer, which is exactly the signal the reward provides.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .agent_runtime import (
    AgentMode,
    BudgetConfig,
    FORCED_ANSWER_PROMPT,
    SUMMARY_MARKER,
)
from .grpo import DEFAULT_CLIP_EPS, ToyPolicy, dynamic_filter, grpo_loss
from .rewards import score_trajectory
from .scheduler import (
    AssembledBatch,
    SchedulerConfig,
    SchedulerMode,
    SimulationEngine,
    SimulationResult,
)
from .sim_env import (
    Corpus,
    LatencyModel,
    PerTaskLatency,
    browse,
    extract_start_entity,
    find_code,
    first_code,
    search,
    walk_links,
)
from .types import Generation, PolicyStep, QAItem

TOY_ALPHABET = ("think", "search", "browse", "answer")
TOY_FEATURES = ("bias", "has_code", "results", "forced", "turns")

_URL_RE = re.compile(r"\[([^\]\s]+)\]")
_PAGE_CONTENT_RE = re.compile(r"Page content:\n(.*)", re.DOTALL)


def answer_candidate(prompt: str) -> str | None:
    """Best available answer: follow the link chain from the question's start
    entity and read off that entity's code if it is visible anywhere."""
    start = extract_start_entity(prompt)
    if start is None:
        return first_code(prompt)
    tail = walk_links(prompt, start)
    return find_code(prompt, tail)


def search_target(prompt: str) -> str:
    start = extract_start_entity(prompt)
    if start is None:
        return "survey records"
    return walk_links(prompt, start)


class ToyAgent:
    """Symbol sampling plus the template layer shared by both drivers."""

    def __init__(self, policy: ToyPolicy, turn_limit: int):
        self.policy = policy
        self.turn_limit = turn_limit

    def features(self, prompt: str) -> np.ndarray:
        has_code = 1.0 if answer_candidate(prompt) is not None else 0.0
        results = min(prompt.count("Search results:"), 3) / 3.0
        forced = 1.0 if FORCED_ANSWER_PROMPT in prompt else 0.0
        turns = min(prompt.count("Assistant:\n") / self.turn_limit, 1.0)
        return np.array([1.0, has_code, results, forced, turns])

    def _render(self, symbol: str, prompt: str) -> str:
        if symbol == "search":
            return f"<search>{search_target(prompt)}</search>"
        if symbol == "browse":
            urls = _URL_RE.findall(prompt)
            if urls:
                return f"<access>{urls[-1]}</access>"
            return "no page available to open."
        if symbol == "answer":
            candidate = answer_candidate(prompt)
            return f"<answer>{candidate or 'unknown'}</answer>"
        return "weighing the gathered evidence."

    def respond(self, prompt: str, rng: np.random.Generator) -> Generation:
        if SUMMARY_MARKER in prompt:
            m = _PAGE_CONTENT_RE.search(prompt)
            page = m.group(1) if m else ""
            return Generation(f"page notes: {page[:300]}")
        feats = self.features(prompt)
        symbol, logprob = self.policy.sample(feats, rng)
        text = self._render(self.policy.alphabet[symbol], prompt)
        return Generation(text, policy_step=PolicyStep(feats, symbol, logprob))


class ToyRolloutBackend:
    """Scheduler backend: per-task sampling streams over a shared policy."""

    def __init__(self, agent: ToyAgent, corpus: Corpus, seed: int, top_k: int = 5):
        self.agent = agent
        self.corpus = corpus
        self.seed = seed
        self.top_k = top_k
        self._rngs: dict[int, np.random.Generator] = {}

    def _rng(self, task_index: int) -> np.random.Generator:
        rng = self._rngs.get(task_index)
        if rng is None:
            rng = np.random.default_rng([self.seed, 71, task_index])
            self._rngs[task_index] = rng
        return rng

    def generate(self, task_index: int, prompt: str) -> Generation:
        return self.agent.respond(prompt, self._rng(task_index))

    def search(self, query: str, k: int):
        return search(self.corpus, query, k)

    def browse(self, url: str) -> str:
        return browse(self.corpus, url)


class ToyPolicyClient:
    """Blocking GenerationClient over the toy agent, for evaluation runs."""

    def __init__(self, policy: ToyPolicy, turn_limit: int, seed: int = 0,
                 version: int = 0):
        self._agent = ToyAgent(policy, turn_limit)
        self._rng = np.random.default_rng([seed, 73])
        self.version = version

    def generate(self, prompt: str) -> Generation:
        gen = self._agent.respond(prompt, self._rng)
        gen.version = self.version
        return gen


class DegenerateWorkload(Exception):
    """Dynamic filtering rejected every group for too many consecutive steps."""

    def __init__(self, message: str, rows: list[dict]):
        super().__init__(message)
        self.rows = rows


@dataclass
class TrainToyConfig:
    steps: int = 200
    batch_size: int = 16
    group_size: int = 4
    executors: int = 8
    lr: float = 0.1
    clip_eps: float = DEFAULT_CLIP_EPS
    seed: int = 0
    turn_limit: int = 8
    train_step_time: float = 2.0
    max_staleness: int = 4
    top_k: int = 5
    max_concurrent: int = 32
    degenerate_patience: int = 10
    # Extra rollout supply over steps*batch_size, covering stale discards so
    # the step budget is actually reached; leftovers stop at the step cap.
    workload_margin: float = 1.35
    latency: LatencyModel | None = None


@dataclass
class TrainToyResult:
    policy: ToyPolicy
    rows: list[dict]
    sim: SimulationResult


def _expand_workload(qa_items: list[QAItem], n_entries: int) -> list[QAItem]:
    # Each workload entry is its own advantage group, so repeated questions
    # get distinct ids.
    out = []
    for i in range(n_entries):
        qa = qa_items[i % len(qa_items)]
        out.append(QAItem(id=f"{qa.id}@{i}", question=qa.question, answer=qa.answer))
    return out


def train_toy(corpus: Corpus, cfg: TrainToyConfig) -> TrainToyResult:
    """Run GRPO over the fully asynchronous scheduler until `steps` updates.

    Raises DegenerateWorkload when dynamic filtering leaves nothing to train
    on for `degenerate_patience` consecutive batch assemblies.
    """
    qa_items = corpus.qa_items()
    if not qa_items:
        raise ValueError("corpus has no chains")
    n_trajectories = int(cfg.steps * cfg.batch_size * cfg.workload_margin)
    n_groups = -(-n_trajectories // cfg.group_size)  # ceil
    workload = _expand_workload(qa_items, n_groups)
    qa_by_id = {qa.id: qa for qa in workload}

    policy = ToyPolicy(TOY_ALPHABET, len(TOY_FEATURES))
    agent = ToyAgent(policy, cfg.turn_limit)
    backend = ToyRolloutBackend(agent, corpus, cfg.seed, cfg.top_k)
    latency = cfg.latency or LatencyModel(
        mu_generate=-2.0, sigma_generate=1.0, mu_tool=-2.0, sigma_tool=0.5,
        seed=cfg.seed)
    durations = PerTaskLatency(latency)

    budget = BudgetConfig(turn_limit=cfg.turn_limit, min_turns=0)
    sched_cfg = SchedulerConfig(
        executors=cfg.executors, batch_size=cfg.batch_size,
        group_size=cfg.group_size, train_step_time=cfg.train_step_time,
        max_staleness=cfg.max_staleness, budget=budget,
        agent_mode=AgentMode.BASE, top_k=cfg.top_k, max_train_steps=cfg.steps,
        max_concurrent=cfg.max_concurrent)

    rows: list[dict] = []
    empty_streak = 0

    def on_complete(traj):
        traj.reward = score_trajectory(traj, qa_by_id[traj.qa_id], AgentMode.BASE)

    def train_hook(batch: AssembledBatch, now: float):
        nonlocal empty_streak
        step = len(rows)
        rewards = [t.reward.final for t in batch.trajectories]
        tool_calls = [t.n_tool_calls for t in batch.trajectories]
        retained = dynamic_filter(batch.groups)
        loss_total = 0.0
        grad = np.zeros_like(policy.theta)
        trained = 0
        for group in retained:
            if not any(t.policy_steps for t in group.trajectories):
                continue
            loss, g = grpo_loss(policy, None, group, cfg.clip_eps)
            loss_total += loss
            grad += g
            trained += 1
        rows.append({
            "step": step,
            "time": now,
            "mean_reward": float(np.mean(rewards)),
            "mean_tool_calls": float(np.mean(tool_calls)),
            "groups": len(batch.groups),
            "retained_groups": trained,
            "loss": loss_total / trained if trained else 0.0,
        })
        if trained == 0:
            empty_streak += 1
            if empty_streak >= cfg.degenerate_patience:
                raise DegenerateWorkload(
                    f"no group survived filtering for {empty_streak} consecutive "
                    "batch assemblies", rows)
            return None
        empty_streak = 0
        update = -(cfg.lr / trained) * grad

        def apply():
            policy.theta += update

        return apply

    engine = SimulationEngine(
        SchedulerMode.FULLY_ASYNC, workload, sched_cfg, cfg.seed, backend,
        durations, on_complete=on_complete, train_hook=train_hook)
    sim = engine.run()
    return TrainToyResult(policy=policy, rows=rows, sim=sim)
