"""Operator CLI: corpus generation, scheduler simulation, toy training,
QA synthesis, evaluation, and report merging.

Settings come from an optional TOML config file; command-line flags win.
Exit codes: 0 ok, 2 config error, 3 simulation deadlock, 4 degenerate
training workload.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .agent_runtime import AgentMode, BudgetConfig
from .evaluation import evaluate, min_turns_sweep
from .grpo import ToyPolicy
from .rewards import exact_match_judge
from .scheduler import (
    DeadlockError,
    SchedulerConfig,
    SchedulerMode,
    SimulationEngine,
    busy_fraction_series,
    events_to_jsonl,
)
from .sim_env import (
    Corpus,
    EagerAnswerScript,
    LatencyModel,
    OracleChainScript,
    PerTaskLatency,
    RandomTaggedScript,
    ScriptedBackend,
    ScriptedClient,
    SilentScript,
    SimEnvironment,
    generate_corpus,
)
from .synthesis import (
    AnswerLeakLRM,
    CorpusFactSource,
    RuleJudge,
    ScriptedFactSource,
    SynthesisConfig,
    synthesize,
)
from .training import (
    DegenerateWorkload,
    ToyPolicyClient,
    TrainToyConfig,
    _expand_workload,
    train_toy,
)
from .types import Fact, QAItem, trajectories_to_jsonl

EXIT_CONFIG = 2
EXIT_DEADLOCK = 3
EXIT_DEGENERATE = 4

_MODES = {m.value: m for m in SchedulerMode}


def _load_section(config_path: str | None, section: str) -> dict:
    if config_path is None:
        return {}
    try:
        with open(config_path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise click.UsageError(f"cannot read config {config_path}: {exc}")
    return data.get(section, {})


def _setting(section: dict, key: str, flag_value, default=None, required=False):
    value = flag_value if flag_value is not None else section.get(key, default)
    if required and value is None:
        raise click.UsageError(f"missing required setting --{key.replace('_', '-')}")
    return value


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _load_corpus(path: str | None, seed: int, chains: int, hops: int = 2) -> Corpus:
    if path is not None:
        try:
            return Corpus.load(path)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise click.UsageError(f"cannot load corpus {path}: {exc}")
    return generate_corpus(chains=chains, hops=hops, distractors=4, seed=seed)


def _budget_from(section: dict, turn_limit_flag, min_turns_flag=None,
                 default_turn_limit=32) -> BudgetConfig:
    return BudgetConfig(
        turn_limit=int(_setting(section, "turn_limit", turn_limit_flag,
                                default_turn_limit)),
        min_turns=int(_setting(section, "min_turns", min_turns_flag, 0)),
        history_window_chars=int(section.get("history_window_chars", 25_000)),
        prompt_char_cap=int(section.get("prompt_char_cap", 10_000)),
    )


@click.group()
def main():
    """Asynchronous search-agent RL harness and simulator."""


@main.command("gen-corpus")
@click.option("--chains", default=20, show_default=True, type=int)
@click.option("--hops", default=2, show_default=True, type=int)
@click.option("--distractors", default=4, show_default=True, type=int)
@click.option("--seed", required=True, type=int)
@click.option("--trivial", is_flag=True, help="Embed every answer in its question.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_gen_corpus(chains, hops, distractors, seed, trivial, out):
    """Write a synthetic multi-hop corpus as JSON."""
    corpus = generate_corpus(chains=chains, hops=hops, distractors=distractors,
                             seed=seed, trivial=trivial)
    corpus.dump(out)
    click.echo(f"wrote {len(corpus.pages)} pages, {len(corpus.chains)} chains to {out}")


@main.command("simulate")
@click.option("--mode", "mode_name", type=click.Choice(sorted(_MODES)), default=None)
@click.option("--tasks", type=int, default=None)
@click.option("--executors", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--group-size", "-G", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--latency-sigma", type=float, default=None, help="Generation sigma.")
@click.option("--latency-mu", type=float, default=None)
@click.option("--tool-sigma", type=float, default=None)
@click.option("--tool-mu", type=float, default=None)
@click.option("--train-step-time", type=float, default=None)
@click.option("--max-staleness", type=int, default=None)
@click.option("--turn-limit", type=int, default=None)
@click.option("--answer-prob", type=float, default=None)
@click.option("--policy", "policy_name",
              type=click.Choice(["random", "oracle"]), default=None)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def cmd_simulate(mode_name, tasks, executors, batch_size, group_size, seed,
                 latency_sigma, latency_mu, tool_sigma, tool_mu,
                 train_step_time, max_staleness, turn_limit, answer_prob,
                 policy_name, corpus_path, out_path, config_path):
    """Run one scheduling regime and write report.json / events.jsonl /
    busy_fraction.csv."""
    section = _load_section(config_path, "simulate")
    mode = _MODES[_setting(section, "mode", mode_name, "async")]
    seed = int(_setting(section, "seed", seed, required=True))
    tasks = int(_setting(section, "tasks", tasks, 64))
    executors = int(_setting(section, "executors", executors, 8))
    batch_size = int(_setting(section, "batch_size", batch_size, 16))
    group_size = int(_setting(section, "group_size", group_size, 4))
    if tasks % group_size != 0:
        raise click.UsageError("--tasks must be a multiple of --group-size")
    budget = _budget_from(section, turn_limit, default_turn_limit=96)
    latency = LatencyModel(
        mu_generate=float(_setting(section, "latency_mu", latency_mu, 0.0)),
        sigma_generate=float(_setting(section, "latency_sigma", latency_sigma, 1.5)),
        mu_tool=float(_setting(section, "tool_mu", tool_mu, 1.78)),
        sigma_tool=float(_setting(section, "tool_sigma", tool_sigma, 0.25)),
        seed=seed,
    )
    n_entries = tasks // group_size
    corpus = _load_corpus(corpus_path, seed, chains=n_entries)
    workload = _expand_workload(corpus.qa_items(), n_entries)
    policy_name = _setting(section, "policy", policy_name, "random")
    answer_prob = float(_setting(section, "answer_prob", answer_prob, 0.0))
    if policy_name == "oracle":
        script = OracleChainScript()
    else:
        titles = sorted(p.title for p in corpus.pages.values())
        urls = sorted(corpus.pages)
        script = RandomTaggedScript(titles, urls, answer_prob=answer_prob)
    backend = ScriptedBackend(corpus, script, seed)
    cfg = SchedulerConfig(
        executors=executors, batch_size=batch_size, group_size=group_size,
        train_step_time=float(_setting(section, "train_step_time",
                                       train_step_time, 40.0)),
        max_staleness=int(_setting(section, "max_staleness", max_staleness, 4)),
        budget=budget, agent_mode=AgentMode.BASE)
    engine = SimulationEngine(mode, workload, cfg, seed, backend,
                              PerTaskLatency(latency))
    try:
        result = engine.run()
    except DeadlockError as exc:
        click.echo(f"simulation deadlock: {exc}", err=True)
        sys.exit(EXIT_DEADLOCK)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, result.report.to_json())
    (out.parent / "events.jsonl").write_text(events_to_jsonl(result.events) + "\n")
    (out.parent / "trajectories.jsonl").write_text(
        trajectories_to_jsonl(result.trajectories) + "\n")
    series = busy_fraction_series(result.events, executors,
                                  result.report.total_time)
    _write_csv(out.parent / "busy_fraction.csv", ["window_start", "busy_fraction"],
               [[f"{t:.6f}", f"{b:.6f}"] for t, b in series])
    r = result.report
    click.echo(f"{r.mode}: busy={r.executor_busy_fraction:.3f} "
               f"throughput={r.throughput:.1f}/h steps={r.train_steps} "
               f"time={r.total_time:.1f}s")


@main.command("train-toy")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--group-size", "-G", type=int, default=None)
@click.option("--executors", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--clip-eps", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--turn-limit", type=int, default=None)
@click.option("--train-step-time", type=float, default=None)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def cmd_train_toy(corpus_path, steps, batch_size, group_size, executors, lr,
                  clip_eps, seed, turn_limit, train_step_time, out_dir,
                  config_path):
    """Train the toy policy with GRPO under the fully asynchronous scheduler."""
    section = _load_section(config_path, "train")
    seed = int(_setting(section, "seed", seed, required=True))
    cfg = TrainToyConfig(
        steps=int(_setting(section, "steps", steps, 200)),
        batch_size=int(_setting(section, "batch_size", batch_size, 16)),
        group_size=int(_setting(section, "group_size", group_size, 4)),
        executors=int(_setting(section, "executors", executors, 8)),
        lr=float(_setting(section, "lr", lr, 0.1)),
        clip_eps=float(_setting(section, "clip_eps", clip_eps, 0.2)),
        seed=seed,
        turn_limit=int(_setting(section, "turn_limit", turn_limit, 8)),
        train_step_time=float(_setting(section, "train_step_time",
                                       train_step_time, 2.0)),
    )
    corpus = _load_corpus(corpus_path, seed, chains=20)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def write_outputs(rows, policy=None, report=None):
        _write_csv(out / "reward_curve.csv", ["step", "mean_reward"],
                   [[r["step"], f"{r['mean_reward']:.6f}"] for r in rows])
        _write_csv(out / "tool_curve.csv", ["step", "mean_tool_calls"],
                   [[r["step"], f"{r['mean_tool_calls']:.6f}"] for r in rows])
        _write_csv(out / "train_log.csv",
                   ["step", "time", "mean_reward", "mean_tool_calls",
                    "groups", "retained_groups", "loss"],
                   [[r["step"], f"{r['time']:.6f}", f"{r['mean_reward']:.6f}",
                     f"{r['mean_tool_calls']:.6f}", r["groups"],
                     r["retained_groups"], f"{r['loss']:.6f}"] for r in rows])
        if policy is not None:
            _write_json(out / "policy.json", policy.to_json())
        if report is not None:
            _write_json(out / "report.json", report.to_json())

    try:
        result = train_toy(corpus, cfg)
    except DegenerateWorkload as exc:
        write_outputs(exc.rows)
        click.echo(f"degenerate workload: {exc}", err=True)
        sys.exit(EXIT_DEGENERATE)
    except DeadlockError as exc:
        click.echo(f"simulation deadlock: {exc}", err=True)
        sys.exit(EXIT_DEADLOCK)
    write_outputs(result.rows, result.policy, result.sim.report)
    first = result.rows[0]["mean_reward"] if result.rows else 0.0
    last = result.rows[-1]["mean_reward"] if result.rows else 0.0
    click.echo(f"trained {len(result.rows)} steps: "
               f"reward {first:.3f} -> {last:.3f}")


@main.command("synthesize")
@click.option("--seeds", "seeds_path", type=click.Path(exists=True), default=None,
              help="JSONL of {id, question, answer}; defaults to corpus questions.")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), default=None)
@click.option("--facts", "facts_path", type=click.Path(exists=True), default=None,
              help="JSON {entity: [statement, ...]} used as the fact source.")
@click.option("--max-rounds", type=int, default=None)
@click.option("--keep", type=int, default=None)
@click.option("--attempts", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def cmd_synthesize(seeds_path, corpus_path, facts_path, max_rounds, keep,
                   attempts, seed, out_path, config_path):
    """Evolve seed QAs via injection and fuzzing; emit passing variants."""
    section = _load_section(config_path, "synthesize")
    seed = int(_setting(section, "seed", seed, 0))
    cfg = SynthesisConfig(
        max_rounds=int(_setting(section, "max_rounds", max_rounds, 9)),
        per_seed_keep=int(_setting(section, "keep", keep, 3)),
        attempts=int(_setting(section, "attempts", attempts, 8)),
    )
    corpus = None
    if corpus_path is not None:
        corpus = _load_corpus(corpus_path, seed, chains=8)
    if facts_path is not None:
        try:
            table = json.loads(Path(facts_path).read_text())
            source = ScriptedFactSource({
                entity: [Fact(entity, s) for s in statements]
                for entity, statements in table.items()})
        except (OSError, json.JSONDecodeError, AttributeError) as exc:
            raise click.UsageError(f"cannot load facts {facts_path}: {exc}")
    elif corpus is not None:
        source = CorpusFactSource(corpus)
    else:
        raise click.UsageError("one of --corpus or --facts is required")
    seeds = _load_seed_items(seeds_path, corpus)
    judge = RuleJudge()
    # The mock reference model answers correctly exactly when an answer has
    # leaked into the question, so self-answering variants are rejected.
    lrm = AnswerLeakLRM([s.answer for s in seeds])
    outputs = []
    for item in seeds:
        outputs.extend(synthesize(item, cfg, source, judge, lrm))
    lines = [json.dumps(o.to_json(), sort_keys=True) for o in outputs]
    Path(out_path).write_text("\n".join(lines) + ("\n" if lines else ""))
    click.echo(f"emitted {len(outputs)} variants from {len(seeds)} seeds to {out_path}")


def _load_seed_items(seeds_path, corpus) -> list[QAItem]:
    if seeds_path is None:
        if corpus is None:
            raise click.UsageError("--seeds is required when no corpus is given")
        return corpus.qa_items()
    items = []
    try:
        for line in Path(seeds_path).read_text().splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            items.append(QAItem(id=str(raw["id"]), question=raw["question"],
                                answer=raw["answer"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise click.UsageError(f"malformed seeds file {seeds_path}: {exc}")
    return items


@main.command("eval")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), default=None)
@click.option("--questions", "questions_path", type=click.Path(exists=True),
              default=None, help="JSONL eval set; defaults to corpus questions.")
@click.option("--policy", "policy_name",
              type=click.Choice(["oracle", "eager", "random", "silent", "toy"]),
              default=None)
@click.option("--snapshot", "snapshot_path", type=click.Path(exists=True),
              default=None, help="policy.json for --policy toy.")
@click.option("--k", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--turn-limit", type=int, default=None)
@click.option("--min-turns", "min_turns_csv", type=str, default=None,
              help="Comma-separated sweep, e.g. 0,2,4.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def cmd_eval(corpus_path, questions_path, policy_name, snapshot_path, k, seed,
             turn_limit, min_turns_csv, out_dir, config_path):
    """Avg@k / Pass@k evaluation, with an optional minimum-turn sweep."""
    section = _load_section(config_path, "eval")
    seed = int(_setting(section, "seed", seed, 0))
    k = int(_setting(section, "k", k, 4))
    policy_name = _setting(section, "policy", policy_name, "oracle")
    budget = _budget_from(section, turn_limit, default_turn_limit=8)
    corpus = _load_corpus(corpus_path, seed, chains=8)
    if questions_path is not None:
        qa_items = _load_eval_set(questions_path)
    else:
        qa_items = corpus.qa_items()
    env = SimEnvironment(corpus)

    snapshot = None
    if policy_name == "toy":
        if snapshot_path is None:
            raise click.UsageError("--policy toy requires --snapshot")
        try:
            snapshot = ToyPolicy.from_json(json.loads(Path(snapshot_path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise click.UsageError(f"cannot load snapshot {snapshot_path}: {exc}")

    scripts = {
        "oracle": OracleChainScript,
        "eager": EagerAnswerScript,
        "silent": SilentScript,
    }

    def client_factory(qa, qa_index, trial):
        rollout_seed = seed * 1_000_003 + qa_index * 101 + trial
        if policy_name == "toy":
            return ToyPolicyClient(snapshot, budget.turn_limit, seed=rollout_seed)
        if policy_name == "random":
            titles = sorted(p.title for p in corpus.pages.values())
            script = RandomTaggedScript(titles, sorted(corpus.pages))
        else:
            script = scripts[policy_name]()
        return ScriptedClient(script, seed=rollout_seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(qa_items, client_factory, env, budget, k,
                      judge=exact_match_judge)
    _write_json(out / "metrics.json", {
        "k": report.k, "avg_at_k": report.avg_at_k, "pass_at_k": report.pass_at_k,
    })
    lines = [json.dumps(r, sort_keys=True) for r in report.records]
    (out / "per_question.jsonl").write_text("\n".join(lines) + "\n")
    click.echo(f"Avg@{k}={report.avg_at_k:.3f} Pass@{k}={report.pass_at_k:.3f}")

    if min_turns_csv:
        try:
            values = [int(v) for v in min_turns_csv.split(",") if v.strip() != ""]
        except ValueError:
            raise click.UsageError("--min-turns must be comma-separated integers")
        rows = min_turns_sweep(qa_items, client_factory, env, budget, values, k,
                               judge=exact_match_judge)
        _write_csv(out / "accuracy_vs_turns.csv",
                   ["min_turns", "avg_at_k", "pass_at_k"],
                   [[r["min_turns"], f"{r['avg_at_k']:.6f}",
                     f"{r['pass_at_k']:.6f}"] for r in rows])
        for r in rows:
            click.echo(f"min_turns={r['min_turns']}: Avg@{k}={r['avg_at_k']:.3f}")


def _load_eval_set(path: str) -> list[QAItem]:
    items = []
    try:
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            items.append(QAItem(id=str(raw["id"]), question=raw["question"],
                                answer=raw["answer"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise click.UsageError(f"malformed eval set {path}: {exc}")
    if not items:
        raise click.UsageError(f"eval set {path} is empty")
    return items


@main.command("report")
@click.argument("inputs", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_report(inputs, out_path):
    """Merge simulation report JSONs into one CSV for plotting."""
    header = ["file", "mode", "total_time", "executor_busy_fraction",
              "trainer_busy_fraction", "trajectories_completed", "throughput",
              "train_steps", "stale_discards"]
    rows = []
    for path in inputs:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise click.UsageError(f"cannot read report {path}: {exc}")
        rows.append([path] + [data.get(key, "") for key in header[1:]])
    _write_csv(Path(out_path), header, rows)
    for row in rows:
        click.echo(" ".join(f"{h}={v}" for h, v in zip(header, row)))


if __name__ == "__main__":
    main()
