"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v`; the PASS lines bypass capture.
Golden values for the scheduler-ordering criterion live in tests/golden/ and
can be regenerated with REGEN_GOLDEN=1.
"""

from __future__ import annotations

import itertools
import json
import os
import string
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from searchrl.agent_runtime import BudgetConfig
from searchrl.cli import main as cli_main
from searchrl.grpo import ToyPolicy, build_group, dynamic_filter, group_advantages, grpo_loss
from searchrl.rewards import f1_score
from searchrl.scheduler import (
    SchedulerConfig,
    SchedulerMode,
    SimulationEngine,
    audit_work_conservation,
)
from searchrl.sim_env import (
    LatencyModel,
    PerTaskLatency,
    RandomTaggedScript,
    ScriptedBackend,
    generate_corpus,
)
from searchrl.synthesis import (
    FixedAnswerLRM,
    RuleJudge,
    ScriptedFactSource,
    SynthesisConfig,
    filter_opensource,
    synthesize,
)
from searchrl.training import TrainToyConfig, train_toy
from searchrl.types import Fact, PolicyStep, QAItem, RewardRecord, Trajectory, Turn

GOLDEN_DIR = Path(__file__).parent / "golden"
ALPHABET = ("a", "b", "c", "d")


def _announce(capsys, criterion: int, message: str) -> None:
    with capsys.disabled():
        print(f"[acceptance] criterion {criterion}: PASS - {message}")


# --- criterion 1: GRPO gradient check ------------------------------------------


def _fd_grad(policy, old, group, clip_eps, h=1e-5):
    flat = policy.theta.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, _ = grpo_loss(policy, old, group, clip_eps)
        flat[i] = orig - h
        down, _ = grpo_loss(policy, old, group, clip_eps)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(policy.theta.shape)


def _random_group(rng, n_features, n_traj, max_len):
    trajectories = []
    for _ in range(n_traj):
        steps = [
            PolicyStep(rng.normal(size=n_features),
                       int(rng.integers(len(ALPHABET))), 0.0)
            for _ in range(int(rng.integers(1, max_len + 1)))
        ]
        traj = Trajectory(qa_id="g", policy_steps=steps)
        traj.reward = RewardRecord(0.0, 1, None, float(rng.random()))
        trajectories.append(traj)
    return build_group("g", trajectories)


def test_criterion_1_gradient_check(capsys):
    rng = np.random.default_rng(2024)
    started = time.time()
    worst = 0.0
    for trial in range(100):
        n_features = int(rng.integers(2, 26))  # theta dims = 4 * F <= 100
        policy = ToyPolicy.random(ALPHABET, n_features, seed=1000 + trial)
        old = ToyPolicy.random(ALPHABET, n_features, seed=5000 + trial)
        group = _random_group(rng, n_features,
                              n_traj=int(rng.integers(2, 9)), max_len=20)
        _, analytic = grpo_loss(policy, old, group, clip_eps=0.2)
        fd = _fd_grad(policy, old, group, clip_eps=0.2)
        denom = max(float(np.abs(fd).max()), 1e-8)
        rel = float(np.abs(analytic - fd).max()) / denom
        worst = max(worst, rel)
        assert rel <= 1e-5, f"trial {trial}: relative error {rel}"
    elapsed = time.time() - started
    assert elapsed < 10.0, f"gradient check took {elapsed:.1f}s"
    _announce(capsys, 1, f"100 instances, worst rel err {worst:.2e}, {elapsed:.1f}s")


# --- criterion 2: advantage properties -------------------------------------------


def test_criterion_2_advantage_properties(capsys):
    rng = np.random.default_rng(7)
    for trial in range(1000):
        size = int(rng.integers(2, 9))
        rewards = rng.normal(size=size)
        adv, degenerate = group_advantages(rewards.tolist())
        assert abs(float(np.mean(adv))) <= 1e-9
        if not degenerate:
            shifted, _ = group_advantages((2.5 * rewards + 1.75).tolist())
            assert np.allclose(adv, shifted, atol=1e-9)
        if trial % 10 == 0:
            n_features = int(rng.integers(2, 6))
            policy = ToyPolicy.random(ALPHABET, n_features, seed=trial)
            group = _random_group(rng, n_features, n_traj=4, max_len=6)
            loss, _ = grpo_loss(policy, policy.clone(), group)
            assert abs(loss) <= 1e-9
    _announce(capsys, 2, "zero mean, affine invariance, zero loss at "
                         "theta=theta_old over 1000 trials")


# --- criterion 3: dynamic filtering -----------------------------------------------


def test_criterion_3_dynamic_filter(capsys):
    rng = np.random.default_rng(17)
    groups = []
    for _ in range(10_000):
        size = int(rng.integers(2, 9))
        if rng.random() < 0.35:
            rewards = [float(rng.integers(0, 2))] * size
        else:
            rewards = rng.integers(0, 3, size=size).astype(float).tolist()
        trajs = []
        for r in rewards:
            t = Trajectory(qa_id="q")
            t.reward = RewardRecord(0.0, 1, None, r)
            trajs.append(t)
        groups.append(build_group("q", trajs))
    retained = dynamic_filter(groups)
    violations = sum(
        1 for g in groups if g.retained != (max(g.rewards) != min(g.rewards)))
    assert violations == 0
    assert retained == [g for g in groups if max(g.rewards) != min(g.rewards)]
    _announce(capsys, 3, f"10000 groups, 0 violations, "
                         f"{len(retained)} retained")


# --- criterion 4: F1 oracle equivalence ---------------------------------------------


def _oracle_f1(prediction: str, reference: str) -> float:
    def norm(text):
        cleaned = "".join(ch for ch in text.lower()
                          if ch not in string.punctuation)
        return [w for w in cleaned.split() if w not in ("a", "an", "the")]

    pred, ref = norm(prediction), norm(reference)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    remaining = list(ref)
    common = 0
    for word in pred:
        if word in remaining:
            remaining.remove(word)
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def test_criterion_4_f1_oracle_equivalence(capsys):
    rng = np.random.default_rng(23)
    pool = ["the", "a", "an", "paris", "mice", "dog", "dog", "blue!", "x,y",
            "1934", "code", "of", "city", ""]
    for _ in range(1000):
        a = " ".join(pool[i] for i in rng.integers(0, len(pool),
                                                   size=rng.integers(0, 7)))
        b = " ".join(pool[i] for i in rng.integers(0, len(pool),
                                                   size=rng.integers(0, 7)))
        assert f1_score(a, b) == _oracle_f1(a, b), (a, b)
    _announce(capsys, 4, "1000 random pairs, exact score match")


# --- criteria 5-7: pinned scheduler trace --------------------------------------------

PINNED_SEED = 7


def _pinned_run(mode: SchedulerMode):
    corpus = generate_corpus(chains=16, hops=2, distractors=4, seed=PINNED_SEED)
    qa_items = corpus.qa_items()
    workload = [QAItem(id=f"{qa.id}@{i}", question=qa.question, answer=qa.answer)
                for i, qa in enumerate(qa_items)]  # 16 questions x G=4 = 64 tasks
    titles = sorted(p.title for p in corpus.pages.values())
    script = RandomTaggedScript(titles, sorted(corpus.pages), answer_prob=0.0)
    backend = ScriptedBackend(corpus, script, PINNED_SEED)
    latency = LatencyModel(mu_generate=0.0, sigma_generate=1.5,
                           mu_tool=1.78, sigma_tool=0.25, seed=PINNED_SEED)
    cfg = SchedulerConfig(executors=8, batch_size=16, group_size=4,
                          train_step_time=40.0,
                          budget=BudgetConfig(turn_limit=96))
    engine = SimulationEngine(mode, workload, cfg, PINNED_SEED, backend,
                              PerTaskLatency(latency))
    return engine.run()


@pytest.fixture(scope="module")
def pinned_results():
    started = time.time()
    results = {mode: _pinned_run(mode) for mode in SchedulerMode}
    return results, time.time() - started


def test_criterion_5_scheduler_ordering(capsys, pinned_results):
    results, elapsed = pinned_results
    reports = {mode: res.report for mode, res in results.items()}
    a = reports[SchedulerMode.FULLY_ASYNC]
    o = reports[SchedulerMode.ONE_STEP_OFF]
    s = reports[SchedulerMode.SYNC]
    assert a.executor_busy_fraction >= o.executor_busy_fraction >= s.executor_busy_fraction
    assert a.throughput >= o.throughput >= s.throughput
    assert a.executor_busy_fraction >= 0.95
    assert s.executor_busy_fraction <= 0.80
    assert elapsed < 10.0, f"pinned simulations took {elapsed:.1f}s"

    golden_path = GOLDEN_DIR / "simulation_ordering.json"
    current = {mode.value: reports[mode].to_json() for mode in SchedulerMode}
    if os.environ.get("REGEN_GOLDEN"):
        golden_path.parent.mkdir(parents=True, exist_ok=True)
        golden_path.write_text(json.dumps(current, indent=2, sort_keys=True) + "\n")
    golden = json.loads(golden_path.read_text())
    assert current == golden, "pinned reports drifted from the golden file"
    _announce(capsys, 5, f"async {a.executor_busy_fraction:.3f} >= one-step-off "
                         f"{o.executor_busy_fraction:.3f} >= sync "
                         f"{s.executor_busy_fraction:.3f}; golden match; "
                         f"{elapsed:.1f}s")


def test_criterion_6_work_conservation(capsys):
    corpus = generate_corpus(chains=6, hops=2, distractors=2, seed=5)
    titles = sorted(p.title for p in corpus.pages.values())
    total = 0
    for seed in range(20):
        qa_items = corpus.qa_items()
        workload = [QAItem(id=f"{qa.id}@{i}", question=qa.question,
                           answer=qa.answer)
                    for i, qa in enumerate(qa_items * 2)]
        script = RandomTaggedScript(titles, sorted(corpus.pages),
                                    answer_prob=0.1)
        backend = ScriptedBackend(corpus, script, seed)
        latency = LatencyModel(mu_generate=0.0, sigma_generate=1.2,
                               mu_tool=0.5, sigma_tool=0.3, seed=seed)
        cfg = SchedulerConfig(executors=4, batch_size=8, group_size=2,
                              train_step_time=3.0,
                              budget=BudgetConfig(turn_limit=10))
        engine = SimulationEngine(SchedulerMode.FULLY_ASYNC, workload, cfg,
                                  seed, backend, PerTaskLatency(latency))
        result = engine.run()
        violations = audit_work_conservation(result.events, 4)
        assert violations == [], f"seed {seed}: {violations[:3]}"
        total += len(result.events)
    _announce(capsys, 6, f"20 seeds, zero idle-while-pending intervals "
                         f"({total} events scanned)")


def test_criterion_7_staleness_audit(capsys, pinned_results):
    results, _ = pinned_results
    for mode, result in results.items():
        bound = mode.staleness_bound(4)
        consumed = 0
        for batch in result.batches:
            for gap in batch.version_gaps:
                assert gap <= bound, (mode, gap)
                consumed += 1
        hist_mass = sum(result.report.staleness_histogram.values())
        assert hist_mass == consumed
    async_report = results[SchedulerMode.FULLY_ASYNC].report
    assert async_report.multi_version_trajectories > 0
    _announce(capsys, 7, "all consumed gaps within bounds; "
                         f"{async_report.multi_version_trajectories}/64 async "
                         "trajectories span >= 2 versions")


# --- criterion 8: toy end-to-end training ---------------------------------------------


def test_criterion_8_toy_training_improves(capsys):
    corpus = generate_corpus(chains=20, hops=2, distractors=4, seed=7)
    assert len(corpus.qa_items()) == 20
    result = train_toy(corpus, TrainToyConfig(steps=200, seed=1))
    rows = result.rows
    assert len(rows) == 200
    first = float(np.mean([r["mean_reward"] for r in rows[:10]]))
    last = float(np.mean([r["mean_reward"] for r in rows[-10:]]))
    assert last - first >= 0.3, f"reward improved only {last - first:.3f}"
    tools_first = float(np.mean([r["mean_tool_calls"] for r in rows[:10]]))
    tools_last = float(np.mean([r["mean_tool_calls"] for r in rows[-10:]]))
    assert tools_last > tools_first
    _announce(capsys, 8, f"reward {first:.3f} -> {last:.3f} "
                         f"(+{last - first:.3f}), tool calls "
                         f"{tools_first:.2f} -> {tools_last:.2f}")


# --- criterion 9: synthesis pipeline ----------------------------------------------------


def test_criterion_9_synthesis_pipeline(capsys):
    hein = "Michael P. Hein"
    source = ScriptedFactSource({hein: [
        Fact(hein, f"{hein} held documented role number {i}.")
        for i in range(12)
    ]})
    seed = QAItem(id="seed", question=f"When was {hein} born?", answer="1964")
    outputs = synthesize(seed, SynthesisConfig(max_rounds=9, per_seed_keep=9,
                                               attempts=8),
                         source, RuleJudge(), FixedAnswerLRM("no idea"))
    assert outputs
    for out in outputs:
        assert out.report.passed
        injections = [a for a in out.item.lineage if a.kind == "injection"]
        assert len(out.item.ledger) == len(injections)
        assert out.item.answer == seed.answer  # fuzz and inject never touch it

    def rollout(correct, searches):
        turns = [Turn(index=i, output="<search>q</search>", action_kind="search",
                      action_payload="q", effective=True, malformed=False)
                 for i in range(searches)]
        traj = Trajectory(qa_id="q", turns=turns, answer="x")
        traj.reward = RewardRecord(0.0, 1, None, 1.0 if correct else 0.0)
        return traj

    qa = QAItem(id="q", question="what?", answer="x")
    checked = 0
    for n_correct, searches in itertools.product(range(17), (0, 1, 2, 3)):
        rollouts = [rollout(True, searches) for _ in range(n_correct)]
        rollouts += [rollout(False, 5) for _ in range(16 - n_correct)]
        expected = n_correct > 0 and n_correct / 16 < 0.5 and searches > 1
        assert filter_opensource(qa, rollouts) == expected
        checked += 1
    _announce(capsys, 9, f"{len(outputs)} emitted variants all pass "
                         f"verification; filter truth table {checked} cases")


# --- criterion 10: minimum-turn sweep ------------------------------------------------------


def test_criterion_10_min_turn_sweep(capsys, tmp_path):
    corpus_path = tmp_path / "corpus.json"
    generate_corpus(chains=6, hops=2, distractors=3, seed=13).dump(corpus_path)
    runner = CliRunner()
    out_dir = tmp_path / "sweep"
    result = runner.invoke(cli_main, [
        "eval", "--corpus", str(corpus_path), "--policy", "eager",
        "--k", "2", "--seed", "1", "--turn-limit", "8",
        "--min-turns", "0,2,4", "--out-dir", str(out_dir)])
    assert result.exit_code == 0, result.output
    lines = (out_dir / "accuracy_vs_turns.csv").read_text().splitlines()[1:]
    accuracies = [float(line.split(",")[1]) for line in lines]
    assert accuracies == [0.0, 1.0, 1.0]
    assert all(b >= a for a, b in zip(accuracies, accuracies[1:]))
    _announce(capsys, 10, f"accuracy vs min-turns {accuracies} is "
                          "monotone non-decreasing")
