"""The cross-session batch update loop and frozen-memory inference.

Each training batch runs three phases. Phase A processes the batch's samples
in parallel with the batch-start memory state, then runs unsupervised
consolidation: staged exploration entries merge into the craft store, each
successful run's scratchpad is distilled into methodology learnings, the
craft store is rewritten wholesale by one call, web-action rules are updated
from search execution logs, and entity facts fold into the domain store.
Ground truth is never an input to this phase. Phase B scores each run
against its ground truth with the judge; failed runs are excluded from what
follows. Phase C checks, per ground-truth point, whether the question tree
covered it, credits the rules that were injected into covering runs with
support and charges contradiction in missing runs, then applies
canonicalized rule proposals (add / reinforce / remove) from one proposer
call. The updated memory is persisted after every batch, so training resumes
at batch granularity.

All cross-run mutations are applied single-writer in a deterministic order
(sample id, then canonical rule key), which makes training byte-reproducible
at any worker count.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .aet import (
    ALL_STORES,
    Budgets,
    RunRecord,
    RunSettings,
    STORE_CRAFT,
    STORE_DOMAIN,
    STORE_RULES,
    STORE_WEB_RULES,
    run_sample,
)
from .corpus import (
    Dataset,
    LegalTruth,
    RECENCY_WINDOW_MONTHS,
    SALES,
    Sample,
    SalesTruth,
    cutoff_for_sample,
    normalize_entity,
    require_ground_truth,
)
from .gateway import (
    Backend,
    CompletionRequest,
    FormatError,
    Gateway,
    GatewayError,
    JUDGE_TEMPERATURE,
    ResponseSchema,
    make_limiter,
)
from .judge import JudgeError, score_legal, score_sales
from .memory import CraftEntry, MemoryState, WEB_RULE_CATEGORIES, persist
from .webtools import WebClient

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    """Configuration or state errors in the update loop."""


@dataclass
class TrainingConfig:
    batch_size: int = 10
    batch_count: int = 6
    budgets: Budgets = field(default_factory=Budgets)
    min_weight: float = 0.5
    seed: int = 42
    workers: int = 20
    node_workers: int = 4
    max_in_flight: int = 20
    disabled_stores: frozenset = frozenset()
    post_solve_exploration: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.batch_count < 0:
            raise TrainingError("batch_size must be >= 1 and batch_count >= 0")
        bad = self.disabled_stores - ALL_STORES
        if bad:
            raise TrainingError(f"unknown stores in disabled_stores: {sorted(bad)}")

    def run_settings(self, batch_index: int = 0) -> RunSettings:
        return RunSettings(
            disabled_stores=frozenset(self.disabled_stores),
            min_rule_weight=self.min_weight,
            node_workers=self.node_workers,
            batch_index=batch_index,
            post_solve_exploration=self.post_solve_exploration,
        )


@dataclass
class RuleEvidence:
    canonical_key: str
    supporting_sample_ids: list[str] = field(default_factory=list)
    contradicting_sample_ids: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "canonical_key": self.canonical_key,
            "supporting_sample_ids": list(self.supporting_sample_ids),
            "contradicting_sample_ids": list(self.contradicting_sample_ids),
        }


@dataclass
class BatchReport:
    batch_index: int
    per_sample: list[dict]
    memory_diffs: dict
    counter_aggregates: dict

    def to_json(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "per_sample": self.per_sample,
            "memory_diffs": self.memory_diffs,
            "counter_aggregates": self.counter_aggregates,
        }


# ---------------------------------------------------------------------------
# Consolidation prompts and schemas
# ---------------------------------------------------------------------------

DISTILL_SYSTEM = (
    "You distill one research session's scratchpad into generalizable "
    "methodology learnings: what kinds of sub-questions paid off, which "
    "sources proved reliable, what to avoid. Never include entity-specific "
    'facts. Reply as fenced json: {"learnings": ["..."]}.'
)

_DISTILL_SCHEMA = ResponseSchema(
    "session-learnings",
    {
        "type": "object",
        "properties": {"learnings": {"type": "array", "items": {"type": "string"}}},
        "required": ["learnings"],
    },
)

REWRITE_SYSTEM = (
    "You maintain the library of research strategy notes. Merge the existing "
    "notes with the new per-session learnings into a rewritten library: "
    "deduplicate, generalize, and drop anything stale. Reply as fenced json: "
    '{"entries": ["..."]} holding the complete new library.'
)

_REWRITE_SCHEMA = ResponseSchema(
    "craft-rewrite",
    {
        "type": "object",
        "properties": {"entries": {"type": "array", "items": {"type": "string"}}},
        "required": ["entries"],
    },
)

WEB_RULES_SYSTEM = (
    "You maintain web-action rules for three tool-use stages: "
    "query_formulation, url_selection, and scraping. Study the search "
    "execution logs below and propose, per category, rules to add or keep. "
    'Reply as fenced json: {"rules": [{"category": "...", "text": "...", '
    '"action": "add" or "keep"}]}.'
)

_WEB_RULES_SCHEMA = ResponseSchema(
    "web-rule-update",
    {
        "type": "object",
        "properties": {
            "rules": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "category": {"enum": list(WEB_RULE_CATEGORIES)},
                        "text": {"type": "string", "minLength": 1},
                        "action": {"enum": ["add", "keep"]},
                    },
                    "required": ["category", "text", "action"],
                },
            }
        },
        "required": ["rules"],
    },
)

FACTS_SYSTEM = (
    "You extract entity-specific factual knowledge from a research session: "
    "stable facts about the named organizations or parties that would help "
    "future research involving them. Reply as fenced json: "
    '{"facts": [{"entity": "...", "text": "..."}]}.'
)

_FACTS_SCHEMA = ResponseSchema(
    "entity-facts",
    {
        "type": "object",
        "properties": {
            "facts": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "entity": {"type": "string", "minLength": 1},
                        "text": {"type": "string"},
                    },
                    "required": ["entity", "text"],
                },
            }
        },
        "required": ["facts"],
    },
)

COVERAGE_SYSTEM = (
    "You check coverage: given one ground-truth point and a research tree's "
    "questions and final output, decide whether a sub-question addressed the "
    "point and the output actually covers it. Reply as fenced json: "
    '{"covered": true or false}.'
)

_COVERAGE_SCHEMA = ResponseSchema(
    "coverage-verdict",
    {
        "type": "object",
        "properties": {"covered": {"type": "boolean"}},
        "required": ["covered"],
    },
)

PROPOSER_SYSTEM = (
    "You maintain conditional decomposition rules of the form 'WHEN <pattern "
    "in the task input>' paired with 'ADD a sub-question that COVERS "
    "<pattern>'. From the coverage outcomes below, propose rule additions, "
    "reinforcements, or removals. Reply as fenced json: {\"proposals\": "
    '[{"op": "add" or "reinforce" or "remove", "condition": "WHEN ...", '
    '"action": "ADD a sub-question that COVERS ..."}]}.'
)

_PROPOSALS_SCHEMA = ResponseSchema(
    "rule-proposals",
    {
        "type": "object",
        "properties": {
            "proposals": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "op": {"enum": ["add", "reinforce", "remove"]},
                        "condition": {"type": "string", "minLength": 1},
                        "action": {"type": "string", "minLength": 1},
                    },
                    "required": ["op", "condition", "action"],
                },
            }
        },
        "required": ["proposals"],
    },
)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def run_forward_pass(
    samples: Sequence[Sample],
    memory: MemoryState,
    budgets: Budgets,
    *,
    backend: Backend,
    web_client: WebClient,
    settings: RunSettings,
    workers: int,
    limiter=None,
) -> list[RunRecord]:
    """Run each sample through the tree pipeline; records sorted by sample id.

    Each sample gets its own gateway over the shared backend and limiter, so
    per-sample call counts are exact under any parallelism.
    """
    limiter = limiter if limiter is not None else make_limiter()
    records: dict[str, RunRecord] = {}
    lock = threading.Lock()

    def run_one(sample: Sample) -> None:
        gateway = Gateway(backend, limiter=limiter)
        web = web_client.session(
            sample.id,
            cutoff_for_sample(sample),
            RECENCY_WINDOW_MONTHS[sample.task_kind],
        )
        outcome = run_sample(
            sample, memory, budgets, gateway=gateway, web=web, settings=settings
        )
        with lock:
            records[sample.id] = outcome.record

    pool_size = min(max(workers, 1), len(samples)) if samples else 1
    if pool_size <= 1:
        for sample in samples:
            run_one(sample)
    else:
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            list(pool.map(run_one, samples))
    return [records[sid] for sid in sorted(records)]


# ---------------------------------------------------------------------------
# Phase A: unsupervised consolidation
# ---------------------------------------------------------------------------


def _search_log_digest(records: Sequence[RunRecord]) -> str:
    blocks = []
    for record in records:
        queries = []
        for steps in record.transcripts.values():
            for step in steps:
                if step["action"] == "search_web":
                    queries.append(step["args"].get("query", ""))
        counters = record.counters
        blocks.append(
            f"sample {record.sample_id}: {len(queries)} web queries "
            f"({counters.get('search_queries', 0)} counted), "
            f"{counters.get('unique_scraped_urls', 0)} unique / "
            f"{counters.get('repeated_scraped_urls', 0)} repeated scrapes\n"
            + "\n".join(f"  - {q}" for q in queries)
        )
    return "\n".join(blocks)


def phase_a_consolidate(
    records: Sequence[RunRecord],
    memory: MemoryState,
    *,
    gateway: Gateway,
    batch_index: int,
    disabled_stores: frozenset = frozenset(),
) -> dict:
    """Unsupervised memory consolidation over one batch's run records.

    Takes no ground truth by construction. Any store whose update call fails
    is simply left unchanged. Returns a diff summary for the batch report.
    """
    diffs: dict = {
        "craft_exploration_added": [],
        "craft_rewritten": False,
        "craft_added": [],
        "craft_removed": [],
        "web_rules_added": [],
        "domain_updated": [],
    }
    successful = [r for r in records if r.ok]
    if not successful:
        return diffs

    craft_on = STORE_CRAFT not in disabled_stores
    if craft_on:
        for record in successful:  # already sorted by sample id
            if record.new_craft_entries:
                memory.add_craft_entries(record.new_craft_entries)
                diffs["craft_exploration_added"].extend(
                    e.text for e in record.new_craft_entries
                )

        learnings: list[str] = []
        for record in successful:
            if not record.scratchpad:
                continue
            try:
                result = gateway.complete(
                    CompletionRequest(
                        role_tag="consolidator",
                        system_text=DISTILL_SYSTEM,
                        user_text=(
                            f"Sample {record.sample_id} scratchpad:\n{record.scratchpad}"
                        ),
                        structured_schema=_DISTILL_SCHEMA,
                    )
                )
                learnings.extend(result.parsed["learnings"])
            except GatewayError as exc:
                logger.warning("distillation failed for %s: %s", record.sample_id, exc)

        current_texts = [e.text for e in memory.craft.entries]
        try:
            listing = "\n".join(f"- {t}" for t in current_texts) or "(empty)"
            new_learnings = "\n".join(f"- {t}" for t in learnings) or "(none)"
            result = gateway.complete(
                CompletionRequest(
                    role_tag="consolidator",
                    system_text=REWRITE_SYSTEM,
                    user_text=(
                        f"Existing notes:\n{listing}\n\nNew session learnings:\n{new_learnings}"
                    ),
                    structured_schema=_REWRITE_SCHEMA,
                )
            )
            new_texts = [t for t in result.parsed["entries"] if t.strip()]
            if new_texts == current_texts:
                logger.info("craft rewrite is a fixed point; store unchanged")
            else:
                task_kind = successful[0].task_kind
                old = memory.replace_craft(
                    [
                        CraftEntry(t, task_kind, batch_index, "consolidation")
                        for t in new_texts
                    ]
                )
                diffs["craft_rewritten"] = True
                diffs["craft_added"] = [t for t in new_texts if t not in current_texts]
                diffs["craft_removed"] = [e.text for e in old if e.text not in new_texts]
        except GatewayError as exc:
            logger.warning("craft rewrite failed; store unchanged: %s", exc)

    if STORE_WEB_RULES not in disabled_stores:
        try:
            result = gateway.complete(
                CompletionRequest(
                    role_tag="consolidator",
                    system_text=WEB_RULES_SYSTEM,
                    user_text=(
                        "Current rules:\n"
                        + ("\n".join(f"- [{r.category}] {r.text}" for r in memory.web_rules) or "(none)")
                        + "\n\nSearch execution logs:\n"
                        + _search_log_digest(successful)
                    ),
                    structured_schema=_WEB_RULES_SCHEMA,
                )
            )
            for item in result.parsed["rules"]:
                if item["action"] == "add":
                    memory.add_web_rule(item["category"], item["text"], batch_index)
                    diffs["web_rules_added"].append(f"[{item['category']}] {item['text']}")
        except GatewayError as exc:
            logger.warning("web-rule update failed; store unchanged: %s", exc)

    if STORE_DOMAIN not in disabled_stores:
        extracted: list[tuple[str, str, str]] = []
        for record in successful:
            try:
                result = gateway.complete(
                    CompletionRequest(
                        role_tag="consolidator",
                        system_text=FACTS_SYSTEM,
                        user_text=(
                            f"Sample {record.sample_id}\n"
                            f"Final answer:\n{record.final_answer or ''}\n\n"
                            f"Scratchpad:\n{record.scratchpad}"
                        ),
                        structured_schema=_FACTS_SCHEMA,
                    )
                )
                for fact in result.parsed["facts"]:
                    extracted.append((record.sample_id, fact["entity"], fact["text"]))
            except GatewayError as exc:
                logger.warning("fact extraction failed for %s: %s", record.sample_id, exc)
        for sample_id, entity, text in extracted:  # sample-sorted by construction
            memory.fold_domain_facts(entity, text, sample_id, batch_index)
            diffs["domain_updated"].append(normalize_entity(entity))
        diffs["domain_updated"] = sorted(set(diffs["domain_updated"]))

    return diffs


# ---------------------------------------------------------------------------
# Phase B: judge scoring
# ---------------------------------------------------------------------------


def phase_b_score(
    records: Sequence[RunRecord],
    truths: dict,
    judge_gateway: Gateway,
    *,
    workers: int = 8,
) -> list[tuple[str, Optional[float]]]:
    """Score each run against its ground truth; None marks a failed sample."""
    results: dict[str, Optional[float]] = {}
    lock = threading.Lock()

    def score_one(record: RunRecord) -> None:
        value: Optional[float] = None
        if record.ok and record.final_answer:
            truth = truths.get(record.sample_id)
            try:
                if isinstance(truth, SalesTruth):
                    judgment = score_sales(
                        record.final_answer,
                        truth.value_propositions,
                        judge_gateway,
                        sample_id=record.sample_id,
                    )
                elif isinstance(truth, LegalTruth):
                    judgment = score_legal(
                        record.final_answer,
                        truth.winning_party,
                        judge_gateway,
                        sample_id=record.sample_id,
                    )
                else:
                    raise JudgeError(f"no ground truth for {record.sample_id}")
                value = judgment.normalized
            except JudgeError as exc:
                logger.warning("scoring failed for %s: %s", record.sample_id, exc)
        with lock:
            results[record.sample_id] = value

    pool_size = min(max(workers, 1), len(records)) if records else 1
    if pool_size <= 1:
        for record in records:
            score_one(record)
    else:
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            list(pool.map(score_one, records))
    return [(r.sample_id, results[r.sample_id]) for r in records]


# ---------------------------------------------------------------------------
# Phase C: supervised rule reflection
# ---------------------------------------------------------------------------


def _ground_truth_points(truth) -> list[str]:
    if isinstance(truth, SalesTruth):
        return list(truth.value_propositions)
    if isinstance(truth, LegalTruth):
        return [f"The winning party is {truth.winning_party}."]
    return []


def _tree_questions(record: RunRecord) -> str:
    nodes = record.tree.get("nodes", {})
    lines = []
    for node_id in sorted(nodes, key=lambda n: int(n[1:])):
        node = nodes[node_id]
        if node.get("parent_id") is None:
            continue
        lines.append(f"- [{node_id}] {node['text']}")
    return "\n".join(lines) or "(no sub-questions)"


def phase_c_rule_update(
    records: Sequence[RunRecord],
    scores: dict,
    truths: dict,
    memory: MemoryState,
    *,
    gateway: Gateway,
    batch_index: int,
    workers: int = 8,
) -> dict:
    """Supervised decomposition-rule update from coverage outcomes.

    Per (ground-truth point, tree) pair one cached coverage call decides
    whether the run covered the point. A run supports its injected rules when
    it covered more points than it missed, contradicts them when the reverse
    holds, and is neutral on a tie. Evidence is applied before proposals, and
    a proposal reply that cannot be parsed skips proposals only.
    """
    diffs: dict = {"rules_evidence": [], "rules_added": [], "rules_removed": [], "rules_reinforced": []}
    scored = [r for r in records if r.ok and scores.get(r.sample_id) is not None]
    if not scored:
        return diffs

    coverage: dict[tuple[str, int], bool] = {}
    pairs: list[tuple[RunRecord, int, str]] = []
    for record in scored:
        for i, point in enumerate(_ground_truth_points(truths.get(record.sample_id))):
            pairs.append((record, i, point))
    cache_lock = threading.Lock()

    def check_one(pair: tuple[RunRecord, int, str]) -> None:
        record, index, point = pair
        key = (record.sample_id, index)
        with cache_lock:
            if key in coverage:
                return
        user = (
            f"Ground-truth point:\n{point}\n\n"
            f"Sub-questions asked:\n{_tree_questions(record)}\n\n"
            f"Final output:\n{record.final_answer or ''}\n\n"
            "Did the tree cover this point?"
        )
        covered = False
        try:
            result = gateway.complete(
                CompletionRequest(
                    role_tag="judge",
                    system_text=COVERAGE_SYSTEM,
                    user_text=user,
                    temperature=JUDGE_TEMPERATURE,
                    structured_schema=_COVERAGE_SCHEMA,
                )
            )
            covered = bool(result.parsed["covered"])
        except GatewayError as exc:
            logger.warning("coverage check failed for %s: %s", key, exc)
        with cache_lock:
            coverage[key] = covered

    pool_size = min(max(workers, 1), len(pairs)) if pairs else 1
    if pool_size <= 1:
        for pair in pairs:
            check_one(pair)
    else:
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            list(pool.map(check_one, pairs))

    evidence: dict[str, RuleEvidence] = {}
    outcome_lines = []
    for record in scored:
        points = _ground_truth_points(truths.get(record.sample_id))
        covered = sum(1 for i in range(len(points)) if coverage.get((record.sample_id, i)))
        missed = len(points) - covered
        outcome_lines.append(
            f"sample {record.sample_id}: covered {covered}/{len(points)} points, "
            f"score {scores[record.sample_id]:.3f}"
        )
        for i, point in enumerate(points):
            flag = "covered" if coverage.get((record.sample_id, i)) else "missed"
            outcome_lines.append(f"  - ({flag}) {point}")
        if covered == missed:
            continue
        for key in record.active_rule_keys:
            entry = evidence.setdefault(key, RuleEvidence(key))
            if covered > missed:
                entry.supporting_sample_ids.append(record.sample_id)
            else:
                entry.contradicting_sample_ids.append(record.sample_id)

    for key in sorted(evidence):
        entry = evidence[key]
        applied = memory.apply_rule_evidence(
            key,
            len(entry.supporting_sample_ids),
            len(entry.contradicting_sample_ids),
            batch_index,
        )
        if applied:
            diffs["rules_evidence"].append(entry.to_json())

    rules_listing = (
        "\n".join(
            f"- {r.condition_pattern} | {r.action_template} "
            f"(support {r.support}, contradiction {r.contradiction})"
            for r in memory.rules
        )
        or "(none)"
    )
    try:
        result = gateway.complete(
            CompletionRequest(
                role_tag="consolidator",
                system_text=PROPOSER_SYSTEM,
                user_text=(
                    f"Current rules:\n{rules_listing}\n\n"
                    f"Coverage outcomes this batch:\n" + "\n".join(outcome_lines)
                ),
                structured_schema=_PROPOSALS_SCHEMA,
            )
        )
        proposals = result.parsed["proposals"]
    except GatewayError as exc:
        logger.warning("rule proposals skipped: %s", exc)
        proposals = []

    for proposal in proposals:
        op = proposal["op"]
        probe = memory.rule_by_key(
            _canonical_for(proposal["condition"], proposal["action"])
        )
        if op == "add":
            rule = memory.upsert_rule(
                proposal["condition"], proposal["action"], batch_index
            )
            diffs["rules_added"].append(rule.canonical_key)
        elif op == "reinforce":
            if probe is None:
                logger.warning("reinforce proposal for unknown rule ignored")
                continue
            memory.apply_rule_evidence(probe.canonical_key, 1, 0, batch_index)
            diffs["rules_reinforced"].append(probe.canonical_key)
        else:
            if probe is None:
                logger.warning("remove proposal for unknown rule ignored")
                continue
            memory.remove_rule(probe.canonical_key)
            diffs["rules_removed"].append(probe.canonical_key)
    return diffs


def _canonical_for(condition: str, action: str) -> str:
    from .memory import canonicalize

    return canonicalize(f"{condition} {action}")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _counter_aggregates(records: Sequence[RunRecord]) -> dict:
    ok = [r for r in records if r.ok]
    totals = {
        "samples_ok": len(ok),
        "samples_failed": len(records) - len(ok),
        "llm_calls": sum(r.llm_calls for r in ok),
        "questions": sum(r.questions_used for r in ok),
        "agent_steps": sum(r.agent_steps_total for r in ok),
        "search_queries": sum(r.counters.get("search_queries", 0) for r in ok),
        "unique_scraped_urls": sum(r.counters.get("unique_scraped_urls", 0) for r in ok),
        "repeated_scraped_urls": sum(r.counters.get("repeated_scraped_urls", 0) for r in ok),
        "scratchpad_chars": sum(r.scratchpad_chars for r in ok),
    }
    return totals


def write_record(record: RunRecord, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{record.sample_id}.json"
    path.write_text(
        json.dumps(record.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return path


def record_from_json(payload: dict) -> RunRecord:
    entries = [
        CraftEntry(e["text"], e["domain_tag"], e["batch_added"], e["source"])
        for e in payload.get("new_craft_entries", [])
    ]
    return RunRecord(
        sample_id=payload["sample_id"],
        task_kind=payload["task_kind"],
        status=payload["status"],
        failure_reason=payload.get("failure_reason"),
        final_answer=payload.get("final_answer"),
        questions_used=payload["questions_used"],
        wave_count=payload["wave_count"],
        agent_steps_total=payload["agent_steps_total"],
        cap_hits=payload["cap_hits"],
        llm_calls=payload["llm_calls"],
        counters=payload.get("counters", {}),
        scratchpad=payload.get("scratchpad", ""),
        active_rule_keys=payload.get("active_rule_keys", []),
        new_craft_entries=entries,
        exploration_cycles=payload.get("exploration_cycles", 0),
        tree=payload.get("tree", {}),
        transcripts=payload.get("transcripts", {}),
        wall_time_seconds=payload.get("wall_time_seconds", 0.0),
    )


def load_records(directory: Union[str, Path]) -> list[RunRecord]:
    directory = Path(directory)
    records = []
    for path in sorted(directory.glob("*.json")):
        records.append(record_from_json(json.loads(path.read_text(encoding="utf-8"))))
    return records


def _write_report(report: BatchReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def run_training(
    train: Dataset,
    cfg: TrainingConfig,
    memory: MemoryState,
    *,
    backend: Backend,
    web_client: WebClient,
    run_dir: Union[str, Path],
    resume_from_batch: int = 0,
) -> tuple[MemoryState, list[BatchReport]]:
    """Run the batched update loop; memory is persisted after every batch.

    With ``resume_from_batch=N`` the loop restarts from batch N using the
    memory snapshot persisted after batch N-1.
    """
    if memory.frozen:
        raise TrainingError("training requires unfrozen memory")
    require_ground_truth(train)
    if cfg.batch_size * cfg.batch_count > len(train):
        raise TrainingError(
            f"{cfg.batch_count} batches of {cfg.batch_size} exceed {len(train)} samples"
        )
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    limiter = make_limiter(cfg.max_in_flight)
    update_gateway = Gateway(backend, limiter=limiter)

    if resume_from_batch > 0:
        from .memory import load as load_memory

        snapshot = run_dir / "batches" / f"batch_{resume_from_batch - 1:02d}" / "memory"
        if not snapshot.is_dir():
            raise TrainingError(f"cannot resume: no snapshot at {snapshot}")
        memory = load_memory(snapshot)
        logger.info("resumed from batch %d", resume_from_batch)

    truths = {s.id: s.ground_truth for s in train.samples}
    reports: list[BatchReport] = []
    for batch_index in range(resume_from_batch, cfg.batch_count):
        batch = train.samples[batch_index * cfg.batch_size : (batch_index + 1) * cfg.batch_size]
        settings = cfg.run_settings(batch_index)
        records = run_forward_pass(
            batch,
            memory,
            cfg.budgets,
            backend=backend,
            web_client=web_client,
            settings=settings,
            workers=cfg.workers,
            limiter=limiter,
        )

        diffs = phase_a_consolidate(
            records,
            memory,
            gateway=update_gateway,
            batch_index=batch_index,
            disabled_stores=settings.disabled_stores,
        )

        score_rows = phase_b_score(records, truths, update_gateway, workers=cfg.workers)
        scores = dict(score_rows)

        if STORE_RULES not in settings.disabled_stores:
            rule_diffs = phase_c_rule_update(
                records,
                scores,
                truths,
                memory,
                gateway=update_gateway,
                batch_index=batch_index,
                workers=cfg.workers,
            )
        else:
            rule_diffs = {"rules_evidence": [], "rules_added": [], "rules_removed": [], "rules_reinforced": []}
        diffs.update(rule_diffs)

        memory.mark_batch_trained(batch_index)
        batch_dir = run_dir / "batches" / f"batch_{batch_index:02d}"
        persist(memory, batch_dir / "memory")
        persist(memory, run_dir / "memory")
        for record in records:
            write_record(record, batch_dir / "records")
        report = BatchReport(
            batch_index=batch_index,
            per_sample=[
                {
                    "sample_id": record.sample_id,
                    "status": record.status,
                    "score": scores.get(record.sample_id),
                }
                for record in records
            ],
            memory_diffs=diffs,
            counter_aggregates=_counter_aggregates(records),
        )
        _write_report(report, batch_dir / "report.json")
        (run_dir / "training_state.json").write_text(
            json.dumps({"last_completed_batch": batch_index}) + "\n", encoding="utf-8"
        )
        reports.append(report)
        logger.info(
            "batch %d complete: %d/%d runs ok",
            batch_index,
            sum(1 for r in records if r.ok),
            len(records),
        )
    return memory, reports


def run_inference(
    test: Dataset,
    memory: MemoryState,
    budgets: Budgets,
    *,
    backend: Backend,
    web_client: WebClient,
    run_dir: Optional[Union[str, Path]] = None,
    workers: int = 20,
    node_workers: int = 4,
    max_in_flight: int = 20,
    disabled_stores: frozenset = frozenset(),
    min_weight: float = 0.5,
    post_solve_exploration: bool = True,
) -> list[RunRecord]:
    """The frozen-memory forward pass: identical pipeline, no store updates."""
    if not memory.frozen:
        raise TrainingError("inference requires frozen memory")
    settings = RunSettings(
        disabled_stores=frozenset(disabled_stores),
        min_rule_weight=min_weight,
        node_workers=node_workers,
        post_solve_exploration=post_solve_exploration,
    )
    records = run_forward_pass(
        test.samples,
        memory,
        budgets,
        backend=backend,
        web_client=web_client,
        settings=settings,
        workers=workers,
        limiter=make_limiter(max_in_flight),
    )
    if run_dir is not None:
        for record in records:
            write_record(record, Path(run_dir) / "records")
    return records
