"""Rollout scheduling over a discrete-event clock.

Three regimes:

* sync          - generation for batch N+1 starts only after training step N
                  finished and every batch-N trajectory completed.
* one-step-off  - generation for batch N+1 overlaps training for step N but
                  still ends at a batch barrier, so batch N+2 never starts
                  before training N completes.
* async         - all trajectories are live at once, executors are
                  work-conserving over pending generation work, training
                  fires the moment enough trajectories are queued, and
                  in-flight trajectories span weight versions (bounded by
                  max staleness).

Executors model generation servers: they serve one generation stage at a
time from a shared queue, while tool calls run on separate tool servers
with unlimited concurrency. A trajectory therefore occupies an executor
only while generating, which is what makes batch barriers expensive (too
few live trajectories to keep the servers fed) and full asynchrony cheap.

The trajectory state machine is driven here with simulated stage latencies;
the same machine runs unchanged against live clients (see
agent_runtime.run_trajectory). Stage results are computed eagerly at stage
start, so generations always reflect the weights current when they started.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

from .agent_runtime import (
    AgentMode,
    BrowseToolRequest,
    BudgetConfig,
    GenerateRequest,
    SearchToolRequest,
    ToolResult,
    trajectory_machine,
)
from .grpo import GroupBatch, build_group
from .sim_env import GENERATE, TOOL
from .types import (
    Generation,
    QAItem,
    SearchResults,
    ToolUnavailable,
    Trajectory,
)


class SchedulerMode(Enum):
    SYNC = "sync"
    ONE_STEP_OFF = "one-step-off"
    FULLY_ASYNC = "async"

    def staleness_bound(self, max_staleness: int) -> int:
        if self is SchedulerMode.SYNC:
            return 0
        if self is SchedulerMode.ONE_STEP_OFF:
            return 1
        return max_staleness


class VersionRegression(Exception):
    pass


class DeadlockError(Exception):
    """Pending work exists but no event can make progress."""


class VersionRegistry:
    """Monotone weight-version counter; generations stamp the current value."""

    def __init__(self):
        self._version = 0

    @property
    def version(self) -> int:
        return self._version

    def publish(self, version: int) -> None:
        if version != self._version + 1:
            raise VersionRegression(
                f"cannot publish version {version} after {self._version}")
        self._version = version


def publish_weights(registry: VersionRegistry, version: int) -> None:
    registry.publish(version)


@dataclass
class RolloutTask:
    qa_id: str
    group_index: int
    task_index: int
    round_index: int = -1
    submit_version: int = -1
    start_time: float = -1.0
    end_time: float = -1.0
    executor_id: int = -1  # executor of the first generation stage


class DurationSource(Protocol):
    def sample(self, task_index: int, kind: str) -> float: ...


class RolloutBackend(Protocol):
    """Computes stage results instantly; the clock charges sampled durations."""

    def generate(self, task_index: int, prompt: str) -> Generation: ...

    def search(self, query: str, k: int) -> SearchResults: ...

    def browse(self, url: str) -> str: ...


@dataclass
class SchedulerConfig:
    executors: int = 4
    batch_size: int = 8
    group_size: int = 2
    train_step_time: float = 5.0
    max_staleness: int = 4
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    agent_mode: AgentMode = AgentMode.BASE
    top_k: int = 5
    max_train_steps: int | None = None
    # Admission cap on live trajectories in fully asynchronous mode;
    # None admits the whole workload at once.
    max_concurrent: int | None = None

    def __post_init__(self):
        if self.executors < 1:
            raise ValueError("executors must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.train_step_time < 0:
            raise ValueError("train_step_time must be non-negative")
        if self.max_staleness < 0:
            raise ValueError("max_staleness must be non-negative")
        if self.max_concurrent is not None and self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1 when set")


@dataclass
class AssembledBatch:
    groups: list[GroupBatch]
    trajectories: list[Trajectory]
    version_gaps: list[int]


def assemble_batch(
    completed: deque[Trajectory],
    batch_size: int,
    current_version: int,
    max_staleness: int,
) -> tuple[AssembledBatch | None, int]:
    """Take the oldest batch_size fresh trajectories, grouped by question.

    Trajectories whose earliest generation version lags the current version
    by more than max_staleness can never be consumed, so they are dropped
    from the queue and counted even when the batch is not ready. Returns
    (batch, discarded); batch is None when fewer than batch_size fresh
    trajectories are queued.
    """
    fresh: list[Trajectory] = []
    discarded = 0
    for traj in completed:
        if current_version - traj.first_version > max_staleness:
            discarded += 1
        else:
            fresh.append(traj)
    completed.clear()
    completed.extend(fresh)
    if len(fresh) < batch_size:
        return None, discarded
    taken = [completed.popleft() for _ in range(batch_size)]
    by_qa: dict[str, list[Trajectory]] = {}
    for traj in taken:
        by_qa.setdefault(traj.qa_id, []).append(traj)
    groups = [build_group(qa_id, trajs) for qa_id, trajs in by_qa.items()]
    gaps = [current_version - t.first_version for t in taken]
    return AssembledBatch(groups, taken, gaps), discarded


@dataclass
class UtilizationReport:
    mode: str
    total_time: float
    executor_busy_fraction: float
    trainer_busy_fraction: float
    trajectories_completed: int
    throughput: float  # trajectories per simulated hour
    staleness_histogram: dict[int, int]
    stale_discards: int = 0
    train_steps: int = 0
    multi_version_trajectories: int = 0

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "total_time": self.total_time,
            "executor_busy_fraction": self.executor_busy_fraction,
            "trainer_busy_fraction": self.trainer_busy_fraction,
            "trajectories_completed": self.trajectories_completed,
            "throughput": self.throughput,
            "staleness_histogram": {str(k): v for k, v in sorted(self.staleness_histogram.items())},
            "stale_discards": self.stale_discards,
            "train_steps": self.train_steps,
            "multi_version_trajectories": self.multi_version_trajectories,
        }


@dataclass
class SimulationResult:
    report: UtilizationReport
    events: list[dict]
    trajectories: list[Trajectory]
    batches: list[AssembledBatch]


@dataclass
class _ActiveTask:
    task: RolloutTask
    machine: object
    pending_result: object = None


# Training hook: receives the assembled batch and the simulated time when the
# step starts; may return a callable applied when the step finishes, so the
# weight update takes effect exactly at publication.
TrainHook = Callable[[AssembledBatch, float], Callable[[], None] | None]
CompleteHook = Callable[[Trajectory], None]


class SimulationEngine:
    def __init__(
        self,
        mode: SchedulerMode,
        workload: list[QAItem],
        cfg: SchedulerConfig,
        seed: int,
        backend: RolloutBackend,
        durations: DurationSource,
        on_complete: CompleteHook | None = None,
        train_hook: TrainHook | None = None,
    ):
        self.mode = mode
        self.cfg = cfg
        self.seed = seed
        self.backend = backend
        self.durations = durations
        self.on_complete = on_complete
        self.train_hook = train_hook

        self._qa_by_task: dict[int, QAItem] = {}
        self.tasks: list[RolloutTask] = []
        index = 0
        for qa in workload:
            for g in range(cfg.group_size):
                self.tasks.append(RolloutTask(qa.id, g, index))
                self._qa_by_task[index] = qa
                index += 1
        self._rounds: list[list[int]] = [
            [t.task_index for t in self.tasks[i:i + cfg.batch_size]]
            for i in range(0, len(self.tasks), cfg.batch_size)
        ]
        if mode is not SchedulerMode.FULLY_ASYNC:
            for r, members in enumerate(self._rounds):
                for ti in members:
                    self.tasks[ti].round_index = r

        self._heap: list[tuple[float, int, str, dict]] = []
        self._seq = 0
        self._now = 0.0
        self._active: dict[int, _ActiveTask] = {}
        self._unadmitted: deque[int] = deque()
        self._gen_queue: deque[int] = deque()
        self._executors: list[int | None] = [None] * cfg.executors
        self._stage_end: list[float] = [0.0] * cfg.executors
        self._busy_time = 0.0
        self._completed: deque[Trajectory] = deque()
        self._registry = VersionRegistry()
        self._trainer_busy = False
        self._trainer_time = 0.0
        self._train_steps = 0
        self._pending_apply: Callable[[], None] | None = None
        self._halted = False

        self._gen_remaining = [len(r) for r in self._rounds]
        self._train_done_rounds: set[int] = set()
        self._train_started_rounds: set[int] = set()
        self._released_rounds: set[int] = set()
        self._training_round = -1

        self._stale_discards = 0
        self._staleness_hist: dict[int, int] = {}
        self.events: list[dict] = []
        self.trajectories: list[Trajectory] = []
        self.batches: list[AssembledBatch] = []
        self._finished_tasks = 0

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: float, kind: str, payload: dict) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    def _log(self, actor: str, event: str, **payload) -> None:
        record = {"time": self._now, "actor": actor, "event": event}
        record.update(payload)
        self.events.append(record)

    # -- task activation and generation dispatch -----------------------------

    def _release_round(self, r: int) -> None:
        if r in self._released_rounds or r >= len(self._rounds):
            return
        self._released_rounds.add(r)
        for ti in self._rounds[r]:
            self._activate_task(ti)

    def _admit_async(self) -> None:
        limit = self.cfg.max_concurrent
        while self._unadmitted and (limit is None or len(self._active) < limit):
            self._activate_task(self._unadmitted.popleft())

    def _activate_task(self, task_index: int) -> None:
        task = self.tasks[task_index]
        task.submit_version = self._registry.version
        qa = self._qa_by_task[task_index]
        machine = trajectory_machine(qa, self.cfg.budget, self.cfg.agent_mode,
                                     self.cfg.top_k)
        self._active[task_index] = _ActiveTask(task, machine)
        self._log("scheduler", "task_released", task=task_index,
                  qa_id=task.qa_id, round=task.round_index)
        request = next(machine)
        self._enqueue_generation(task_index, request)

    def _enqueue_generation(self, task_index: int, request: GenerateRequest) -> None:
        active = self._active[task_index]
        active.pending_result = request
        self._gen_queue.append(task_index)
        self._log("scheduler", "gen_enqueued", task=task_index,
                  purpose=request.purpose)
        self._dispatch()

    def _dispatch(self) -> None:
        while self._gen_queue:
            executor = next((e for e, busy in enumerate(self._executors)
                             if busy is None), None)
            if executor is None:
                return
            task_index = self._gen_queue.popleft()
            active = self._active[task_index]
            request = active.pending_result
            assert isinstance(request, GenerateRequest)
            generation = self.backend.generate(task_index, request.prompt)
            generation.version = self._registry.version
            active.pending_result = generation
            duration = self.durations.sample(task_index, GENERATE)
            task = active.task
            if task.start_time < 0:
                task.start_time = self._now
                task.executor_id = executor
            self._executors[executor] = task_index
            self._stage_end[executor] = self._now + duration
            self._busy_time += duration
            self._log(f"executor-{executor}", "gen_start", task=task_index,
                      purpose=request.purpose, duration=duration,
                      round=task.round_index, version=self._registry.version)
            self._push(self._now + duration, "gen_done",
                       {"executor": executor, "task": task_index})

    def _on_gen_done(self, executor: int, task_index: int) -> None:
        self._executors[executor] = None
        self._log(f"executor-{executor}", "gen_end", task=task_index)
        self._advance_machine(task_index)
        self._dispatch()

    def _on_tool_done(self, task_index: int) -> None:
        self._advance_machine(task_index)

    def _advance_machine(self, task_index: int) -> None:
        active = self._active[task_index]
        result = active.pending_result
        active.pending_result = None
        try:
            request = active.machine.send(result)
        except StopIteration as stop:
            self._finish_task(active, stop.value)
            return
        if isinstance(request, GenerateRequest):
            self._enqueue_generation(task_index, request)
            return
        # Tool stages run on tool servers, off-executor.
        if isinstance(request, SearchToolRequest):
            try:
                active.pending_result = ToolResult(
                    self.backend.search(request.query, request.k).render())
            except ToolUnavailable as exc:
                active.pending_result = ToolResult("", error=str(exc))
        elif isinstance(request, BrowseToolRequest):
            try:
                active.pending_result = ToolResult(self.backend.browse(request.url))
            except ToolUnavailable as exc:
                active.pending_result = ToolResult("", error=str(exc))
        else:  # pragma: no cover
            raise TypeError(f"unknown stage request {request!r}")
        duration = self.durations.sample(task_index, TOOL)
        self._log("tool-server", "tool_start", task=task_index, duration=duration)
        self._push(self._now + duration, "tool_done", {"task": task_index})

    def _finish_task(self, active: _ActiveTask, traj: Trajectory) -> None:
        task = active.task
        task.end_time = self._now
        traj.task_index = task.task_index
        traj.group_index = task.group_index
        traj.submit_version = task.submit_version
        traj.started_at = task.start_time
        traj.completed_at = task.end_time
        del self._active[task.task_index]
        self._finished_tasks += 1
        if self.on_complete is not None:
            self.on_complete(traj)
        self._completed.append(traj)
        self.trajectories.append(traj)
        self._log("scheduler", "task_end", task=task.task_index,
                  qa_id=task.qa_id, round=task.round_index,
                  versions=traj.model_versions)
        if self.mode is not SchedulerMode.FULLY_ASYNC and task.round_index >= 0:
            self._gen_remaining[task.round_index] -= 1
        elif self.mode is SchedulerMode.FULLY_ASYNC:
            self._admit_async()
        self._advance_schedule()

    # -- training ------------------------------------------------------------

    def _round_gen_done(self, r: int) -> bool:
        return r < 0 or (r < len(self._rounds) and self._gen_remaining[r] == 0)

    def _round_trained(self, r: int) -> bool:
        return r < 0 or r in self._train_done_rounds

    def _advance_schedule(self) -> None:
        if self._halted:
            return
        if self.mode is SchedulerMode.FULLY_ASYNC:
            self._maybe_train_async()
            return
        for r in range(len(self._rounds)):
            if r in self._released_rounds:
                continue
            if self.mode is SchedulerMode.SYNC:
                ready = self._round_trained(r - 1)
            else:  # one-step-off
                ready = self._round_gen_done(r - 1) and self._round_trained(r - 2)
            if ready:
                self._release_round(r)
        if self._trainer_busy:
            return
        r = self._training_round + 1
        if r >= len(self._rounds) or r in self._train_started_rounds:
            return
        if self._round_gen_done(r) and self._round_trained(r - 1):
            batch, discarded = assemble_batch(
                self._completed, len(self._rounds[r]), self._registry.version,
                self.mode.staleness_bound(self.cfg.max_staleness))
            self._note_discards(discarded)
            if batch is None:
                raise DeadlockError(
                    f"round {r} generation finished but its batch cannot assemble")
            self._train_started_rounds.add(r)
            self._training_round = r
            self._start_training(batch, round_index=r)

    def _maybe_train_async(self) -> None:
        if self._trainer_busy:
            return
        batch, discarded = assemble_batch(
            self._completed, self.cfg.batch_size, self._registry.version,
            self.cfg.max_staleness)
        self._note_discards(discarded)
        if batch is None:
            return
        self._start_training(batch, round_index=self._train_steps)

    def _note_discards(self, discarded: int) -> None:
        if discarded:
            self._stale_discards += discarded
            self._log("trainer", "stale_discard", count=discarded)

    def _start_training(self, batch: AssembledBatch, round_index: int) -> None:
        self.batches.append(batch)
        for gap in batch.version_gaps:
            self._staleness_hist[gap] = self._staleness_hist.get(gap, 0) + 1
        self._log("trainer", "batch_assembled", round=round_index,
                  size=len(batch.trajectories),
                  version_gaps=batch.version_gaps,
                  qa_ids=[g.qa_id for g in batch.groups])
        if self.train_hook is not None:
            self._pending_apply = self.train_hook(batch, self._now)
        self._trainer_busy = True
        self._log("trainer", "train_start", round=round_index,
                  step=self._train_steps, version=self._registry.version)
        self._push(self._now + self.cfg.train_step_time, "train_done",
                   {"round": round_index, "step": self._train_steps})

    def _on_train_done(self, round_index: int, step: int) -> None:
        if self._pending_apply is not None:
            self._pending_apply()
            self._pending_apply = None
        new_version = self._registry.version + 1
        self._registry.publish(new_version)
        self._trainer_busy = False
        self._trainer_time += self.cfg.train_step_time
        self._train_steps += 1
        self._train_done_rounds.add(round_index)
        self._log("trainer", "train_done", round=round_index, step=step)
        self._log("trainer", "weights_published", version=new_version)
        if (self.cfg.max_train_steps is not None
                and self._train_steps >= self.cfg.max_train_steps):
            self._halt()
            return
        self._advance_schedule()

    def _halt(self) -> None:
        self._halted = True
        self._heap.clear()
        self._gen_queue.clear()
        self._unadmitted.clear()
        # Busy time was accrued at stage start; refund the unfinished tails.
        for executor, task_index in enumerate(self._executors):
            if task_index is not None:
                self._busy_time -= max(0.0, self._stage_end[executor] - self._now)

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimulationResult:
        if self.mode is SchedulerMode.FULLY_ASYNC:
            self._unadmitted.extend(t.task_index for t in self.tasks)
            self._admit_async()
        else:
            self._release_round(0)
        while self._heap:
            time, _, kind, payload = heapq.heappop(self._heap)
            self._now = time
            if kind == "gen_done":
                self._on_gen_done(payload["executor"], payload["task"])
            elif kind == "tool_done":
                self._on_tool_done(payload["task"])
            elif kind == "train_done":
                self._on_train_done(payload["round"], payload["step"])
            else:  # pragma: no cover
                raise ValueError(f"unknown event kind {kind}")
        if not self._halted and self._finished_tasks < len(self.tasks):
            raise DeadlockError(
                f"no runnable event but only {self._finished_tasks} of "
                f"{len(self.tasks)} tasks completed")
        self._log("scheduler", "sim_end", completed=self._finished_tasks)
        return SimulationResult(self._build_report(), self.events,
                                self.trajectories, self.batches)

    def _build_report(self) -> UtilizationReport:
        total = self._now
        denom = total * self.cfg.executors
        multi = sum(1 for t in self.trajectories if t.spans_versions)
        return UtilizationReport(
            mode=self.mode.value,
            total_time=total,
            executor_busy_fraction=self._busy_time / denom if denom > 0 else 0.0,
            trainer_busy_fraction=self._trainer_time / total if total > 0 else 0.0,
            trajectories_completed=len(self.trajectories),
            throughput=len(self.trajectories) / total * 3600.0 if total > 0 else 0.0,
            staleness_histogram=dict(self._staleness_hist),
            stale_discards=self._stale_discards,
            train_steps=self._train_steps,
            multi_version_trajectories=multi,
        )


def run_simulation(
    mode: SchedulerMode,
    workload: list[QAItem],
    cfg: SchedulerConfig,
    seed: int,
    backend: RolloutBackend,
    durations: DurationSource,
    on_complete: CompleteHook | None = None,
    train_hook: TrainHook | None = None,
) -> UtilizationReport:
    engine = SimulationEngine(mode, workload, cfg, seed, backend, durations,
                              on_complete, train_hook)
    return engine.run().report


# --- event-log audits ---------------------------------------------------------


def audit_work_conservation(events: list[dict], executors: int) -> list[dict]:
    """Intervals where an executor idled while generation work was queued."""
    violations: list[dict] = []
    queued = running = 0
    prev_time: float | None = None
    for ev in events:
        t = ev["time"]
        if prev_time is not None and t > prev_time:
            if queued > 0 and running < executors:
                violations.append({"from": prev_time, "to": t,
                                   "queued": queued, "running": running})
        name = ev["event"]
        if name == "gen_enqueued":
            queued += 1
        elif name == "gen_start":
            queued -= 1
            running += 1
        elif name == "gen_end":
            running -= 1
        prev_time = t
    return violations


def audit_round_ordering(events: list[dict], lag: int) -> list[dict]:
    """Check that no round-r generation starts before training of round r-lag
    finished. lag=1 is the synchronous barrier, lag=2 the one-step-off
    overlap bound."""
    train_done_at: dict[int, float] = {}
    for ev in events:
        if ev["event"] == "train_done":
            train_done_at[ev["round"]] = ev["time"]
    violations = []
    for ev in events:
        if ev["event"] != "gen_start" or ev.get("round", -1) < lag:
            continue
        gate = ev["round"] - lag
        if gate in train_done_at and ev["time"] < train_done_at[gate]:
            violations.append({"task": ev["task"], "round": ev["round"],
                               "start": ev["time"],
                               "train_done": train_done_at[gate]})
    return violations


def events_to_jsonl(events: list[dict]) -> str:
    return "\n".join(json.dumps(ev, sort_keys=True) for ev in events)


def busy_fraction_series(events: list[dict], executors: int, total_time: float,
                         bins: int = 50) -> list[tuple[float, float]]:
    """Per-window executor busy fraction, from generation stage intervals."""
    if total_time <= 0 or bins < 1:
        return []
    intervals = [(ev["time"], ev["time"] + ev["duration"])
                 for ev in events if ev["event"] == "gen_start"]
    width = total_time / bins
    rows = []
    for b in range(bins):
        lo, hi = b * width, (b + 1) * width
        busy = sum(max(0.0, min(hi, e) - max(lo, s)) for s, e in intervals)
        rows.append((lo, busy / (width * executors)))
    return rows
