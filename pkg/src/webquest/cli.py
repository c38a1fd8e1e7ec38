"""Operator entry points: train, infer, eval, inspect-memory, scrub-pii.

Configuration lives in a YAML file whose keys mirror :class:`RunConfig`;
command-line flags override file values. Inference requires the memory
directory to be frozen (pass ``--freeze`` to freeze it in place), and legal
datasets can be pre-cleaned of personal identifiers with ``scrub-pii`` so the
cleaned inputs are auditable files rather than an inline transformation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .aet import (
    ALL_STORES,
    Budgets,
    STORE_CRAFT,
    STORE_DOMAIN,
    STORE_RULES,
    STORE_WEB_RULES,
)
from .corpus import (
    Dataset,
    LEGAL,
    SALES,
    Sample,
    load_dataset,
    save_dataset,
    split_seeded,
)
from .gateway import (
    Backend,
    CompletionRequest,
    Gateway,
    GatewayError,
    RemoteChatBackend,
    ResponseSchema,
    make_limiter,
)
from .judge import (
    JudgeError,
    bootstrap_ci,
    aggregate_efficiency,
    render_ci_report,
    render_efficiency_table,
    score_legal,
    score_sales,
)
from .learning import (
    TrainingConfig,
    TrainingError,
    load_records,
    run_inference,
    run_training,
)
from .memory import MemoryState, load as load_memory, persist
from .simenv import OracleBackend, load_oracle_script, load_sim_corpus, SimWebBackend
from .webtools import LiveWebBackend, WebClient

logger = logging.getLogger(__name__)

STORE_TOKENS = {
    "m1": STORE_CRAFT,
    "m2": STORE_RULES,
    "m3": STORE_WEB_RULES,
    "m4": STORE_DOMAIN,
}

# Exploration budget at inference time is task-dependent: consumed-only for
# sales, still allowed for legal so thin domains can gather context.
INFERENCE_EXPLORATION = {SALES: 0, LEGAL: 3}


class UsageError(Exception):
    """Bad flags, missing config, unreadable inputs."""


@dataclass
class RunConfig:
    task: str = SALES
    dataset: str = ""
    memory_dir: str = "memory"
    run_dir: str = "run"
    seed: int = 42
    workers: int = 20
    node_workers: int = 4
    batches: int = 6
    batch_size: int = 10
    min_rule_weight: float = 0.5
    split: str = "none"  # none | train | test
    train_count: int = 60
    post_solve_exploration: bool = True
    budgets: dict = field(default_factory=dict)
    disable_stores: list = field(default_factory=list)
    gateway: dict = field(default_factory=dict)
    web: dict = field(default_factory=dict)

    def disabled_store_names(self) -> frozenset:
        names = set()
        for token in self.disable_stores:
            if token not in STORE_TOKENS:
                raise UsageError(f"unknown store {token!r}; expected one of m1|m2|m3|m4")
            names.add(STORE_TOKENS[token])
        return frozenset(names)

    def build_budgets(self, *, inference: bool) -> Budgets:
        raw = dict(self.budgets)
        if "exploration_budget" not in raw and inference:
            raw["exploration_budget"] = INFERENCE_EXPLORATION[self.task]
        return Budgets(
            question_budget=int(raw.get("question_budget", 25)),
            initial_wave=int(raw.get("initial_wave", 5)),
            reflection_checkpoints=int(raw.get("reflection_checkpoints", 2)),
            max_agent_steps=int(raw.get("max_agent_steps", 10)),
            exploration_budget=int(raw.get("exploration_budget", 3)),
        )


def load_config(path: Optional[str]) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    config_path = Path(path)
    if not config_path.exists():
        raise UsageError(f"config file not found: {config_path}")
    raw = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key, value in raw.items():
        setattr(cfg, key, value)
    if cfg.task not in (SALES, LEGAL):
        raise UsageError(f"config task must be sales or legal, got {cfg.task!r}")
    return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> None:
    for flag, attr in (
        ("task", "task"),
        ("dataset", "dataset"),
        ("memory_dir", "memory_dir"),
        ("run_dir", "run_dir"),
        ("batches", "batches"),
        ("batch_size", "batch_size"),
        ("seed", "seed"),
        ("workers", "workers"),
        ("split", "split"),
        ("train_count", "train_count"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    for flag, key in (
        ("question_budget", "question_budget"),
        ("max_agent_steps", "max_agent_steps"),
        ("exploration_budget", "exploration_budget"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.budgets[key] = value
    if getattr(args, "disable_store", None):
        cfg.disable_stores = list(dict.fromkeys(cfg.disable_stores + args.disable_store))


def build_backend(cfg: RunConfig) -> Backend:
    settings = cfg.gateway
    kind = settings.get("kind", "scripted-oracle")
    if kind == "scripted-oracle":
        script_path = settings.get("oracle_script")
        if not script_path:
            raise UsageError("scripted-oracle gateway requires gateway.oracle_script")
        return OracleBackend(load_oracle_script(script_path))
    if kind == "remote-chat":
        endpoint = settings.get("endpoint")
        model = settings.get("model")
        if not endpoint or not model:
            raise UsageError("remote-chat gateway requires gateway.endpoint and gateway.model")
        api_key = os.environ.get(settings.get("api_key_env", "WEBQUEST_API_KEY"))
        return RemoteChatBackend(endpoint, model, api_key=api_key)
    raise UsageError(f"unknown gateway kind {kind!r}")


def build_web_client(cfg: RunConfig) -> WebClient:
    settings = cfg.web
    kind = settings.get("kind", "simulated")
    cache_dir = settings.get("cache_dir")
    if kind == "simulated":
        corpus_path = settings.get("corpus")
        if not corpus_path:
            raise UsageError("simulated web requires web.corpus")
        backend = SimWebBackend(load_sim_corpus(corpus_path))
        return WebClient(backend, cache_dir=cache_dir, strict_undated=True)
    if kind == "live":
        endpoint = settings.get("endpoint")
        if not endpoint:
            raise UsageError("live web requires web.endpoint")
        backend = LiveWebBackend(
            endpoint,
            api_key=os.environ.get(settings.get("api_key_env", "WEBQUEST_SEARCH_KEY")),
            date_restrict_param=settings.get("date_restrict_param", "date_restrict"),
        )
        # Provider's date-restrict gate is trusted for locally undated pages.
        return WebClient(backend, cache_dir=cache_dir, strict_undated=False)
    raise UsageError(f"unknown web kind {kind!r}")


def _load_configured_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.dataset:
        raise UsageError("no dataset configured (set dataset: in config or pass --dataset)")
    if not Path(cfg.dataset).exists():
        raise UsageError(f"dataset not readable: {cfg.dataset}")
    dataset = load_dataset(cfg.dataset, cfg.task)
    if cfg.split == "none":
        return dataset
    if cfg.split not in ("train", "test"):
        raise UsageError(f"split must be none|train|test, got {cfg.split!r}")
    train, test = split_seeded(dataset, cfg.seed, cfg.train_count)
    return train if cfg.split == "train" else test


def _load_or_new_memory(memory_dir: str) -> MemoryState:
    path = Path(memory_dir)
    if path.is_dir():
        return load_memory(path)
    return MemoryState()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _load_configured_dataset(cfg)
    memory = _load_or_new_memory(cfg.memory_dir)
    training = TrainingConfig(
        batch_size=cfg.batch_size,
        batch_count=cfg.batches,
        budgets=cfg.build_budgets(inference=False),
        min_weight=cfg.min_rule_weight,
        seed=cfg.seed,
        workers=cfg.workers,
        node_workers=cfg.node_workers,
        disabled_stores=cfg.disabled_store_names(),
        post_solve_exploration=cfg.post_solve_exploration,
    )
    memory, reports = run_training(
        dataset,
        training,
        memory,
        backend=build_backend(cfg),
        web_client=build_web_client(cfg),
        run_dir=cfg.run_dir,
        resume_from_batch=args.resume_from_batch or 0,
    )
    persist(memory, cfg.memory_dir)
    for report in reports:
        ok = sum(1 for row in report.per_sample if row["status"] == "ok")
        print(f"batch {report.batch_index}: {ok}/{len(report.per_sample)} runs ok")
    print(f"memory snapshot written to {cfg.memory_dir}")
    return 0


def cmd_infer(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _load_configured_dataset(cfg)
    memory_dir = Path(cfg.memory_dir)
    if not memory_dir.is_dir():
        raise UsageError(f"memory directory not found: {memory_dir}")
    memory = load_memory(memory_dir)
    if not memory.frozen:
        if args.freeze:
            memory.freeze()
            persist(memory, memory_dir)
            print(f"memory at {memory_dir} frozen")
        else:
            print(
                f"refusing to infer: memory at {memory_dir} is not frozen. "
                "Re-run with --freeze to freeze it in place.",
                file=sys.stderr,
            )
            return 1
    records = run_inference(
        dataset,
        memory,
        cfg.build_budgets(inference=True),
        backend=build_backend(cfg),
        web_client=build_web_client(cfg),
        run_dir=cfg.run_dir,
        workers=cfg.workers,
        node_workers=cfg.node_workers,
        disabled_stores=cfg.disabled_store_names(),
        min_weight=cfg.min_rule_weight,
        post_solve_exploration=cfg.post_solve_exploration,
    )
    report = aggregate_efficiency(records)
    table = render_efficiency_table(report, include_timing=False)
    report_path = Path(cfg.run_dir) / "inference_report.txt"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    records_dir = Path(args.records_dir or Path(cfg.run_dir) / "records")
    if not records_dir.is_dir():
        raise UsageError(f"records directory not found: {records_dir}")
    records = load_records(records_dir)
    if not records:
        raise UsageError(f"no records in {records_dir}")
    dataset = _load_configured_dataset(cfg)
    truths = {s.id: s.ground_truth for s in dataset.samples}
    gateway = Gateway(build_backend(cfg), limiter=make_limiter(cfg.workers))
    scores: list[tuple[str, Optional[float]]] = []
    for record in records:
        value: Optional[float] = None
        truth = truths.get(record.sample_id)
        if record.ok and record.final_answer and truth is not None:
            try:
                if cfg.task == SALES:
                    value = score_sales(
                        record.final_answer,
                        truth.value_propositions,
                        gateway,
                        sample_id=record.sample_id,
                    ).normalized
                else:
                    value = score_legal(
                        record.final_answer,
                        truth.winning_party,
                        gateway,
                        sample_id=record.sample_id,
                    ).normalized
            except JudgeError as exc:
                logger.warning("eval scoring failed for %s: %s", record.sample_id, exc)
        scores.append((record.sample_id, value))

    usable = [v for _, v in scores if v is not None]
    lines = [f"samples scored: {len(usable)} of {len(scores)}"]
    if usable:
        mean, lo, hi = bootstrap_ci(usable, iterations=1000, seed=cfg.seed)
        lines.append(render_ci_report([(f"{cfg.task} eval", mean, lo, hi)]))
    lines.append("")
    lines.append(render_efficiency_table(aggregate_efficiency(records), include_timing=False))
    text = "\n".join(lines)
    out_dir = Path(cfg.run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.txt").write_text(text + "\n", encoding="utf-8")
    with (out_dir / "scores.jsonl").open("w", encoding="utf-8") as handle:
        for sample_id, value in scores:
            handle.write(json.dumps({"sample_id": sample_id, "score": value}) + "\n")
    print(text)
    return 0


def cmd_inspect_memory(cfg: RunConfig, args: argparse.Namespace) -> int:
    memory_dir = Path(cfg.memory_dir)
    if not memory_dir.is_dir():
        raise UsageError(f"memory directory not found: {memory_dir}")
    memory = load_memory(memory_dir)
    print(f"memory at {memory_dir} (frozen={memory.frozen}, batches_trained={memory.batches_trained})")
    print(f"\ncraft knowledge ({len(memory.craft.entries)} entries):")
    for entry in memory.craft.entries:
        print(f"  - [batch {entry.batch_added}, {entry.source}] {entry.text}")
    print(f"\ndecomposition rules ({len(memory.rules)}):")
    for rule in memory.rules:
        print(
            f"  - weight={rule.weight:.3f} support={rule.support} "
            f"contradiction={rule.contradiction} batches={rule.batch_history}"
        )
        print(f"    {rule.condition_pattern}")
        print(f"    {rule.action_template}")
    print(f"\nweb-action rules ({len(memory.web_rules)}):")
    for web_rule in memory.web_rules:
        print(f"  - [{web_rule.category}] (support {web_rule.support}) {web_rule.text}")
    print(f"\ndomain facts ({len(memory.domain.entries)} entities):")
    for key in sorted(memory.domain.entries):
        entry = memory.domain.entries[key]
        samples = ", ".join(sorted(entry.provenance_sample_ids))
        print(f"  - {key} (batch {entry.last_updated_batch}; from {samples})")
        for line in entry.facts.splitlines():
            print(f"      {line}")
    return 0


_SCRUB_SCHEMA = ResponseSchema(
    "pii-scrub",
    {
        "type": "object",
        "properties": {"cleaned": {"type": "string", "minLength": 1}},
        "required": ["cleaned"],
    },
)

SCRUB_SYSTEM = (
    "You remove personal identifiers from case text: replace party names, "
    "personal names, and other identifying strings with neutral role labels "
    "(for example 'the petitioner', 'the respondent', 'the employee') while "
    'preserving every legally relevant fact. Reply as fenced json: {"cleaned": "..."}.'
)


def cmd_scrub_pii(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _load_configured_dataset(cfg)
    gateway = Gateway(build_backend(cfg), limiter=make_limiter(cfg.workers))
    cleaned_samples = []
    failures = 0
    for sample in dataset.samples:
        try:
            result = gateway.complete(
                CompletionRequest(
                    role_tag="consolidator",
                    system_text=SCRUB_SYSTEM,
                    user_text=sample.input_context,
                    structured_schema=_SCRUB_SCHEMA,
                )
            )
            text = result.parsed["cleaned"]
        except GatewayError as exc:
            logger.warning("scrub failed for %s; keeping original text: %s", sample.id, exc)
            text = sample.input_context
            failures += 1
        cleaned_samples.append(
            Sample(
                id=sample.id,
                task_kind=sample.task_kind,
                input_context=text,
                reference_date=sample.reference_date,
                entity_keys=sample.entity_keys,
                ground_truth=sample.ground_truth,
            )
        )
    cleaned = Dataset(samples=tuple(cleaned_samples), task_kind=dataset.task_kind)
    save_dataset(cleaned, args.out)
    print(f"wrote {len(cleaned_samples)} cleaned samples to {args.out} ({failures} scrub failures)")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--task", choices=[SALES, LEGAL])
    parser.add_argument("--dataset")
    parser.add_argument("--memory-dir", dest="memory_dir")
    parser.add_argument("--run-dir", dest="run_dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--split", choices=["none", "train", "test"])
    parser.add_argument("--train-count", dest="train_count", type=int)
    parser.add_argument("--question-budget", dest="question_budget", type=int)
    parser.add_argument("--max-agent-steps", dest="max_agent_steps", type=int)
    parser.add_argument("--exploration-budget", dest="exploration_budget", type=int)
    parser.add_argument(
        "--disable-store",
        dest="disable_store",
        action="append",
        choices=sorted(STORE_TOKENS),
        help="disable a memory store (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="webquest",
        description="Budgeted question-tree web research with cross-session memory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the batched update loop")
    _add_common(train)
    train.add_argument("--batches", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--resume-from-batch", dest="resume_from_batch", type=int, default=0)
    train.set_defaults(func=cmd_train)

    infer = sub.add_parser("infer", help="frozen-memory inference over a dataset")
    _add_common(infer)
    infer.add_argument("--freeze", action="store_true", help="freeze the memory dir first")
    infer.set_defaults(func=cmd_infer)

    evaluate = sub.add_parser("eval", help="judge stored records and report")
    _add_common(evaluate)
    evaluate.add_argument("--records-dir", dest="records_dir")
    evaluate.set_defaults(func=cmd_eval)

    inspect = sub.add_parser("inspect-memory", help="pretty-print the memory stores")
    _add_common(inspect)
    inspect.set_defaults(func=cmd_inspect_memory)

    scrub = sub.add_parser("scrub-pii", help="write a PII-scrubbed copy of a dataset")
    _add_common(scrub)
    scrub.add_argument("--out", required=True, help="path for the cleaned dataset")
    scrub.set_defaults(func=cmd_scrub_pii)

    return parser


def run_command(argv: Sequence[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        return args.func(cfg, args)
    except (UsageError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # hard failures keep a non-zero exit
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=os.environ.get("WEBQUEST_LOG", "WARNING"))
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
