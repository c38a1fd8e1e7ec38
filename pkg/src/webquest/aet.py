"""The adaptive exploration tree: budgeted within-session research.

A sample run frames the input as a root question, decomposes it in waves
(an initial wave, then reflection checkpoints that spend the remaining
question budget), solves each sub-question with a step-capped tool loop over
four primitive actions, and synthesizes answers bottom-up into the final
output. A local session memory accumulates findings and a running scratchpad;
cold-start exploration cycles can bootstrap craft knowledge before solving
and enrich it afterwards.

Runs never mutate the shared :class:`~webquest.memory.MemoryState`: craft
entries produced by exploration are staged on the run record (and visible to
the producing run's own prompts), and the batch update loop merges them in a
deterministic order. This keeps parallel forward passes reproducible at any
worker count.
"""

from __future__ import annotations

import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .corpus import LEGAL, Sample
from .gateway import (
    CompletionRequest,
    CompletionResult,
    FormatError,
    Gateway,
    GatewayError,
    ResponseSchema,
)
from .memory import (
    CraftEntry,
    DecompositionRule,
    MemoryState,
    applicable_rules,
    filter_craft,
    retrieve_domain,
)
from .webtools import SearchBackendError, WebSession

logger = logging.getLogger(__name__)

STORE_CRAFT = "craft"
STORE_RULES = "rules"
STORE_WEB_RULES = "web_rules"
STORE_DOMAIN = "domain"
ALL_STORES = frozenset((STORE_CRAFT, STORE_RULES, STORE_WEB_RULES, STORE_DOMAIN))

ACTION_SEARCH_MEMORY = "search_memory"
ACTION_SEARCH_WEB = "search_web"
ACTION_SCRAPE_RESULTS = "scrape_results"
ACTION_GENERATE_ANSWER = "generate_answer"

_TOKEN = re.compile(r"[a-z0-9]+")


class AetError(Exception):
    """Base class for tree-run failures."""


class BudgetError(AetError):
    """An operation would exceed the question budget."""


class RunFailure(AetError):
    """The sample run cannot produce a final answer."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Budgets:
    question_budget: int = 25
    initial_wave: int = 5
    reflection_checkpoints: int = 2
    max_agent_steps: int = 10
    exploration_budget: int = 3

    def __post_init__(self) -> None:
        for name in (
            "question_budget",
            "initial_wave",
            "reflection_checkpoints",
            "max_agent_steps",
            "exploration_budget",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.initial_wave > self.question_budget:
            raise ValueError("initial_wave cannot exceed question_budget")


ROOT_WAVE = -1  # sentinel wave index for the root node

STATUS_PENDING = "pending"
STATUS_SOLVING = "solving"
STATUS_ANSWERED = "answered"
STATUS_SYNTHESIZED = "synthesized"


@dataclass
class QuestionNode:
    node_id: str
    text: str
    parent_id: Optional[str]
    wave: int
    child_ids: list[str] = field(default_factory=list)
    status: str = STATUS_PENDING
    answer: Optional[str] = None
    prior_answer: Optional[str] = None
    evidence: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "text": self.text,
            "parent_id": self.parent_id,
            "wave": self.wave,
            "child_ids": list(self.child_ids),
            "status": self.status,
            "answer": self.answer,
            "prior_answer": self.prior_answer,
            "evidence": list(self.evidence),
        }


@dataclass
class WaveEntry:
    wave_index: int
    node_ids: list[str]
    reflection_rationale: str

    def to_json(self) -> dict:
        return {
            "wave_index": self.wave_index,
            "node_ids": list(self.node_ids),
            "reflection_rationale": self.reflection_rationale,
        }


class ExplorationTree:
    """The evolving question tree with budget accounting."""

    def __init__(self, root_question: str, budgets: Budgets) -> None:
        self.budgets = budgets
        self.nodes: dict[str, QuestionNode] = {}
        self.root_id = "q0"
        self.nodes[self.root_id] = QuestionNode(self.root_id, root_question, None, ROOT_WAVE)
        self.questions_used = 0
        self.wave_log: list[WaveEntry] = []
        self.final_answer: Optional[str] = None
        self._next_id = 1

    @property
    def root(self) -> QuestionNode:
        return self.nodes[self.root_id]

    def add_node(self, text: str, parent_id: str, wave: int) -> QuestionNode:
        if self.questions_used >= self.budgets.question_budget:
            raise BudgetError("question budget exhausted")
        parent = self.nodes.get(parent_id)
        if parent is None:
            raise AetError(f"unknown parent node {parent_id!r}")
        node = QuestionNode(f"q{self._next_id}", text, parent_id, wave)
        self._next_id += 1
        self.nodes[node.node_id] = node
        parent.child_ids.append(node.node_id)
        self.questions_used += 1
        if parent.status == STATUS_ANSWERED:
            # Reflection decomposed an answered node further: it will be
            # synthesized instead, keeping its direct answer as extra input.
            parent.prior_answer = parent.answer
            parent.answer = None
            parent.status = STATUS_PENDING
        return node

    def depth(self, node_id: str) -> int:
        depth = 0
        current = self.nodes[node_id]
        while current.parent_id is not None:
            current = self.nodes[current.parent_id]
            depth += 1
        return depth

    def wave_count(self) -> int:
        return sum(1 for entry in self.wave_log if entry.node_ids)

    def to_json(self) -> dict:
        return {
            "root_id": self.root_id,
            "questions_used": self.questions_used,
            "final_answer": self.final_answer,
            "nodes": {nid: node.to_json() for nid, node in sorted(self.nodes.items())},
            "wave_log": [entry.to_json() for entry in self.wave_log],
        }


@dataclass
class Finding:
    question_text: str
    answer: str
    evidence: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "question_text": self.question_text,
            "answer": self.answer,
            "evidence": list(self.evidence),
        }


class SessionMemory:
    """Per-sample working memory: findings, scratchpad, reflection history.

    Grows monotonically within a session and is never shared across samples.
    Appends are serialized; the run orchestrator merges per-node results at
    wave barriers in node order so the content is scheduling-independent.
    """

    def __init__(self) -> None:
        self.findings: list[Finding] = []
        self.scratchpad: str = ""
        self.reflection_history: list[str] = []
        self._lock = threading.Lock()

    def add_finding(self, finding: Finding) -> None:
        with self._lock:
            self.findings.append(finding)

    def extend_scratchpad(self, text: str) -> None:
        with self._lock:
            self.scratchpad = f"{self.scratchpad}\n{text}" if self.scratchpad else text

    def add_reflection(self, rationale: str) -> None:
        with self._lock:
            self.reflection_history.append(rationale)


@dataclass
class TranscriptStep:
    action: str
    args: dict
    observation: str
    forced: bool = False

    def to_json(self) -> dict:
        return {
            "action": self.action,
            "args": self.args,
            "observation": self.observation,
            "forced": self.forced,
        }


@dataclass
class RunRecord:
    """The full per-sample trajectory and its accounting."""

    sample_id: str
    task_kind: str
    status: str
    failure_reason: Optional[str]
    final_answer: Optional[str]
    questions_used: int
    wave_count: int
    agent_steps_total: int
    cap_hits: int
    llm_calls: int
    counters: dict
    scratchpad: str
    active_rule_keys: list[str]
    new_craft_entries: list[CraftEntry]
    exploration_cycles: int
    tree: dict
    transcripts: dict[str, list[dict]]
    wall_time_seconds: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def scratchpad_chars(self) -> int:
        return len(self.scratchpad)

    def to_json(self, include_timing: bool = True) -> dict:
        record = {
            "sample_id": self.sample_id,
            "task_kind": self.task_kind,
            "status": self.status,
            "failure_reason": self.failure_reason,
            "final_answer": self.final_answer,
            "questions_used": self.questions_used,
            "wave_count": self.wave_count,
            "agent_steps_total": self.agent_steps_total,
            "cap_hits": self.cap_hits,
            "llm_calls": self.llm_calls,
            "counters": dict(sorted(self.counters.items())),
            "scratchpad": self.scratchpad,
            "active_rule_keys": list(self.active_rule_keys),
            "new_craft_entries": [
                {
                    "text": e.text,
                    "domain_tag": e.domain_tag,
                    "batch_added": e.batch_added,
                    "source": e.source,
                }
                for e in self.new_craft_entries
            ],
            "exploration_cycles": self.exploration_cycles,
            "tree": self.tree,
            "transcripts": self.transcripts,
        }
        if include_timing:
            record["wall_time_seconds"] = self.wall_time_seconds
        return record


@dataclass
class RunOutcome:
    final_answer: Optional[str]
    tree: ExplorationTree
    record: RunRecord


@dataclass(frozen=True)
class RunSettings:
    """Knobs that are not part of the paper-level budgets."""

    disabled_stores: frozenset = frozenset()
    min_rule_weight: float = 0.5
    node_workers: int = 4
    batch_index: int = 0
    post_solve_exploration: bool = True
    sparse_craft_threshold: int = 2
    exploration_scrape_top: int = 2
    exploration_max_results: int = 5
    solver_max_results: int = 8
    page_digest_chars: int = 1500

    def store_enabled(self, store: str) -> bool:
        return store not in self.disabled_stores


# ---------------------------------------------------------------------------
# Prompts and reply schemas
# ---------------------------------------------------------------------------

QUESTIONS_SCHEMA = ResponseSchema(
    "sub-question-list", {"type": "array", "items": {"type": "string", "minLength": 1}}
)

REFLECTION_SCHEMA = ResponseSchema(
    "reflection-reply",
    {
        "type": "object",
        "properties": {
            "rationale": {"type": "string"},
            "questions": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "question": {"type": "string", "minLength": 1},
                        "parent": {"type": ["string", "null"]},
                    },
                    "required": ["question"],
                },
            },
        },
        "required": ["questions"],
    },
)

ACTION_SCHEMA = ResponseSchema(
    "tool-action",
    {
        "type": "object",
        "properties": {
            "action": {
                "enum": [
                    ACTION_SEARCH_MEMORY,
                    ACTION_SEARCH_WEB,
                    ACTION_SCRAPE_RESULTS,
                    ACTION_GENERATE_ANSWER,
                ]
            },
            "query": {"type": "string", "minLength": 1},
            "urls": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "answer": {"type": "string", "minLength": 1},
            "evidence": {"type": "array", "items": {"type": "string"}},
        },
        "required": ["action"],
        "allOf": [
            {
                "if": {"properties": {"action": {"const": ACTION_SEARCH_MEMORY}}},
                "then": {"required": ["query"]},
            },
            {
                "if": {"properties": {"action": {"const": ACTION_SEARCH_WEB}}},
                "then": {"required": ["query"]},
            },
            {
                "if": {"properties": {"action": {"const": ACTION_SCRAPE_RESULTS}}},
                "then": {"required": ["urls"]},
            },
            {
                "if": {"properties": {"action": {"const": ACTION_GENERATE_ANSWER}}},
                "then": {"required": ["answer"]},
            },
        ],
    },
)

ANSWER_SCHEMA = ResponseSchema(
    "final-answer",
    {
        "type": "object",
        "properties": {
            "answer": {"type": "string", "minLength": 1},
            "evidence": {"type": "array", "items": {"type": "string"}},
        },
        "required": ["answer"],
    },
)

SYNTHESIS_SCHEMA = ResponseSchema(
    "synthesis-reply",
    {
        "type": "object",
        "properties": {"answer": {"type": "string", "minLength": 1}},
        "required": ["answer"],
    },
)

EXPLORATION_SCHEMA = ResponseSchema(
    "exploration-distillation",
    {
        "type": "object",
        "properties": {
            "insights": {"type": "array", "items": {"type": "string", "minLength": 1}},
            "next_query": {"type": ["string", "null"]},
        },
        "required": ["insights"],
    },
)

DECOMPOSER_SYSTEM = (
    "You are a research planner. Break the research task below into focused, "
    "independently answerable sub-questions that together cover what must be "
    "learned. Reply with a fenced json array of question strings."
)

REFLECTOR_SYSTEM = (
    "You review a research effort in progress. Study the answers gathered so "
    "far, identify unresolved gaps, ambiguities, or newly revealed angles, and "
    "propose targeted new sub-questions. You may attach a new question under an "
    "existing question (by its id) to dig deeper, or under the root. Reply as "
    'fenced json: {"rationale": "...", "questions": [{"question": "...", '
    '"parent": "q1" or null}]}.'
)

SOLVER_SYSTEM_HEADER = (
    "You research one focused sub-question. Prefer knowledge already available "
    "in memory before reaching for the web. Reply with exactly one action per "
    "turn as a fenced json object:\n"
    '  {"action": "search_memory", "query": "..."} - search session findings '
    "and stored domain facts\n"
    '  {"action": "search_web", "query": "..."} - run a date-restricted web '
    "search\n"
    '  {"action": "scrape_results", "urls": ["..."]} - fetch the full text of '
    "result pages\n"
    '  {"action": "generate_answer", "answer": "...", "evidence": ["..."]} - '
    "finish with your grounded answer"
)

ANTI_CHEAT_INSTRUCTION = (
    "Important: do not rely on any internal knowledge of this matter or its "
    "outcome. Every factual claim must come from the retrieved web evidence or "
    "the memory context above."
)

SYNTHESIZER_SYSTEM = (
    "You combine the answers to a question's sub-questions into one coherent, "
    "specific answer to the question itself. Keep concrete evidence. Reply as "
    'fenced json: {"answer": "..."}.'
)

EXPLORER_SYSTEM = (
    "You distill raw research traces into short, reusable strategy notes about "
    "how to research tasks of this kind: which sub-questions pay off, which "
    "sources are authoritative, how to phrase queries. Notes must be general "
    "methodology, never entity-specific facts. Reply as fenced json: "
    '{"insights": ["..."], "next_query": "..." or null}.'
)


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


def _craft_section(craft: list[CraftEntry]) -> str:
    if not craft:
        return ""
    notes = "\n".join(f"- {entry.text}" for entry in craft)
    return f"\n\nResearch strategy notes:\n{notes}"


def _rules_section(rules: list[DecompositionRule]) -> str:
    if not rules:
        return ""
    lines = "\n".join(f"- {r.condition_pattern} -> {r.action_template}" for r in rules)
    return f"\n\nDecomposition rules (apply each rule whose condition matches the task):\n{lines}"


def _findings_section(session: SessionMemory) -> str:
    if not session.findings:
        return "(none yet)"
    return "\n".join(
        f"- {f.question_text[:160]}: {f.answer[:240]}" for f in session.findings
    )


def _observation_for_results(results) -> str:
    if not results:
        return "(no results)"
    lines = []
    for r in results:
        published = r.published.isoformat() if r.published else "undated"
        lines.append(f"{r.rank}. {r.title} - {r.url} ({published}) :: {r.snippet}")
    return "\n".join(lines)


def _observation_for_pages(pages, digest_chars: int) -> str:
    blocks = []
    for page in pages:
        if page.ok:
            blocks.append(f"## {page.url}\n{page.text[:digest_chars]}")
        else:
            blocks.append(f"## {page.url}\nFETCH ERROR: {page.error}")
    return "\n\n".join(blocks) if blocks else "(nothing scraped)"


def lookup_session_memory(query: str, domain_text: str, session: SessionMemory) -> str:
    """The search_memory primitive: rank stored knowledge by token overlap."""
    wanted = _tokens(query)
    scored: list[tuple[int, int, str]] = []
    order = 0
    for finding in session.findings:
        overlap = len(wanted & _tokens(f"{finding.question_text} {finding.answer}"))
        if overlap > 0:
            scored.append((-overlap, order, f"- (finding) {finding.question_text}: {finding.answer}"))
        order += 1
    for block in [b for b in domain_text.split("\n\n") if b.strip()]:
        overlap = len(wanted & _tokens(block))
        if overlap > 0:
            scored.append((-overlap, order, f"- (domain) {' '.join(block.split())}"))
        order += 1
    if not scored:
        return "No matching memory entries."
    scored.sort()
    return "\n".join(line for _, _, line in scored[:5])


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def decompose_wave0(
    sample: Sample,
    craft: list[CraftEntry],
    rules: list[DecompositionRule],
    budgets: Budgets,
    *,
    gateway: Gateway,
    tree: ExplorationTree,
) -> list[QuestionNode]:
    """Break the root into the initial wave of sub-questions (at most B0)."""
    cap = min(budgets.initial_wave, budgets.question_budget - tree.questions_used)
    if cap <= 0:
        tree.wave_log.append(WaveEntry(0, [], "initial wave skipped: no budget"))
        return []
    user = (
        f"Research task:\n{sample.input_context}"
        f"{_craft_section(craft)}{_rules_section(rules)}"
        f"\n\nPropose up to {cap} sub-questions."
    )
    result = gateway.complete(
        CompletionRequest(
            role_tag="decomposer",
            system_text=DECOMPOSER_SYSTEM,
            user_text=user,
            structured_schema=QUESTIONS_SCHEMA,
        )
    )
    questions = result.parsed
    if len(questions) > cap:
        logger.info("%s: initial wave truncated from %d to %d", sample.id, len(questions), cap)
        questions = questions[:cap]
    nodes = [tree.add_node(q, tree.root_id, 0) for q in questions]
    tree.wave_log.append(WaveEntry(0, [n.node_id for n in nodes], "initial decomposition"))
    return nodes


def checkpoint_cap(remaining_budget: int, remaining_checkpoints: int) -> int:
    """Question allowance for the current checkpoint.

    The budget left is split evenly over the checkpoints left, with the
    division remainder granted to the last checkpoint.
    """
    if remaining_checkpoints <= 0 or remaining_budget <= 0:
        return 0
    if remaining_checkpoints == 1:
        return remaining_budget
    return remaining_budget // remaining_checkpoints


def reflect(
    sample: Sample,
    tree: ExplorationTree,
    session: SessionMemory,
    craft: list[CraftEntry],
    rules: list[DecompositionRule],
    budgets: Budgets,
    *,
    checkpoint: int,
    gateway: Gateway,
) -> list[QuestionNode]:
    """Run one reflection checkpoint; returns the new nodes (possibly none).

    With no remaining budget this is a no-op without any completion call. A
    reply that cannot be repaired skips the checkpoint rather than failing
    the run.
    """
    remaining = budgets.question_budget - tree.questions_used
    cap = checkpoint_cap(remaining, budgets.reflection_checkpoints - checkpoint)
    if cap <= 0:
        return []
    wave_index = checkpoint + 1
    answered = []
    for node in tree.nodes.values():
        if node.node_id == tree.root_id:
            continue
        answer = node.answer or node.prior_answer
        answered.append(
            f"- [{node.node_id}] (wave {node.wave}) {node.text}: "
            f"{answer if answer else 'unanswered'}"
        )
    history = "\n".join(f"- {r}" for r in session.reflection_history) or "(none)"
    user = (
        f"Research task:\n{sample.input_context}\n\n"
        f"Questions and answers so far:\n" + "\n".join(answered) + "\n\n"
        f"Earlier reflection decisions:\n{history}"
        f"{_craft_section(craft)}{_rules_section(rules)}"
        f"\n\nPropose up to {cap} new sub-questions (checkpoint {checkpoint + 1} of "
        f"{budgets.reflection_checkpoints})."
    )
    try:
        result = gateway.complete(
            CompletionRequest(
                role_tag="reflector",
                system_text=REFLECTOR_SYSTEM,
                user_text=user,
                structured_schema=REFLECTION_SCHEMA,
            )
        )
    except FormatError as exc:
        logger.warning("%s: reflection checkpoint %d skipped: %s", sample.id, checkpoint, exc)
        tree.wave_log.append(WaveEntry(wave_index, [], f"checkpoint skipped: {exc}"))
        return []
    rationale = result.parsed.get("rationale", "")
    proposals = result.parsed["questions"]
    if len(proposals) > cap:
        logger.info("%s: reflection truncated from %d to %d", sample.id, len(proposals), cap)
        proposals = proposals[:cap]
    nodes = []
    for proposal in proposals:
        parent_id = proposal.get("parent") or tree.root_id
        if parent_id not in tree.nodes:
            logger.warning(
                "%s: reflection named unknown parent %r; attaching to root",
                sample.id,
                parent_id,
            )
            parent_id = tree.root_id
        nodes.append(tree.add_node(proposal["question"], parent_id, wave_index))
    session.add_reflection(rationale)
    tree.wave_log.append(WaveEntry(wave_index, [n.node_id for n in nodes], rationale))
    return nodes


def _solver_system(
    sample: Sample, memory: MemoryState, settings: RunSettings, domain_text: str
) -> str:
    parts = [SOLVER_SYSTEM_HEADER]
    if settings.store_enabled(STORE_WEB_RULES) and memory.web_rules:
        lines = "\n".join(f"- [{r.category}] {r.text}" for r in memory.web_rules)
        parts.append(f"Web research rules:\n{lines}")
    if domain_text:
        parts.append(f"Known domain facts:\n{domain_text}")
    if sample.task_kind == LEGAL:
        parts.append(ANTI_CHEAT_INSTRUCTION)
    return "\n\n".join(parts)


def _trail(steps: list[TranscriptStep]) -> str:
    if not steps:
        return "(no actions yet)"
    blocks = []
    for i, step in enumerate(steps, start=1):
        args = ", ".join(f"{k}={v!r}" for k, v in step.args.items())
        blocks.append(f"{i}. {step.action}({args})\n   -> {step.observation}")
    return "\n".join(blocks)


def solve_subquestion(
    node: QuestionNode,
    sample: Sample,
    memory: MemoryState,
    session: SessionMemory,
    budgets: Budgets,
    *,
    gateway: Gateway,
    web: WebSession,
    settings: RunSettings,
) -> tuple[list[TranscriptStep], Finding, bool]:
    """ReAct-solve one pending node; returns (transcript, finding, cap_hit).

    The loop allows at most ``max_agent_steps`` agent-chosen actions; if no
    terminal answer was produced by then, one forced answer-generation call
    is appended so partial evidence is kept.
    """
    node.status = STATUS_SOLVING
    domain_text = (
        retrieve_domain(memory.domain, sample)
        if settings.store_enabled(STORE_DOMAIN)
        else ""
    )
    system = _solver_system(sample, memory, settings, domain_text)
    steps: list[TranscriptStep] = []
    findings_digest = _findings_section(session)

    for step_no in range(1, budgets.max_agent_steps + 1):
        user = (
            f"Sub-question [{node.node_id}]: {node.text}\n\n"
            f"Session findings so far:\n{findings_digest}\n\n"
            f"Actions taken:\n{_trail(steps)}\n\n"
            f"Choose action {step_no} of {budgets.max_agent_steps}."
        )
        result = gateway.complete(
            CompletionRequest(
                role_tag="solver",
                system_text=system,
                user_text=user,
                structured_schema=ACTION_SCHEMA,
            )
        )
        action = result.parsed
        kind = action["action"]
        if kind == ACTION_GENERATE_ANSWER:
            evidence = [str(e) for e in action.get("evidence", [])]
            steps.append(TranscriptStep(kind, {"answer": action["answer"], "evidence": evidence}, ""))
            _finish_node(node, action["answer"], evidence)
            return steps, _finding_for(node), False
        if kind == ACTION_SEARCH_MEMORY:
            observation = lookup_session_memory(action["query"], domain_text, session)
            steps.append(TranscriptStep(kind, {"query": action["query"]}, observation))
        elif kind == ACTION_SEARCH_WEB:
            try:
                results = web.search(action["query"], max_results=settings.solver_max_results)
                observation = _observation_for_results(results)
            except (SearchBackendError, ValueError) as exc:
                observation = f"SEARCH ERROR: {exc}"
            steps.append(TranscriptStep(kind, {"query": action["query"]}, observation))
        else:  # scrape_results
            pages = web.scrape([str(u) for u in action["urls"]])
            observation = _observation_for_pages(pages, settings.page_digest_chars)
            steps.append(TranscriptStep(kind, {"urls": [str(u) for u in action["urls"]]}, observation))

    forced_user = (
        f"Sub-question [{node.node_id}]: {node.text}\n\n"
        f"Actions taken:\n{_trail(steps)}\n\n"
        "The step budget is exhausted. Produce the final answer now from the "
        "evidence gathered above."
    )
    result = gateway.complete(
        CompletionRequest(
            role_tag="solver",
            system_text=system,
            user_text=forced_user,
            structured_schema=ANSWER_SCHEMA,
        )
    )
    evidence = [str(e) for e in result.parsed.get("evidence", [])]
    steps.append(
        TranscriptStep(
            ACTION_GENERATE_ANSWER,
            {"answer": result.parsed["answer"], "evidence": evidence},
            "",
            forced=True,
        )
    )
    _finish_node(node, result.parsed["answer"], evidence)
    logger.info("%s/%s: step cap hit, answer forced", sample.id, node.node_id)
    return steps, _finding_for(node), True


def _finish_node(node: QuestionNode, answer: str, evidence: list[str]) -> None:
    node.answer = answer
    node.evidence = evidence
    node.status = STATUS_ANSWERED


def _finding_for(node: QuestionNode) -> Finding:
    return Finding(node.text, node.answer or "", tuple(node.evidence))


def _scratchpad_block(node: QuestionNode, steps: list[TranscriptStep]) -> str:
    trail = []
    for step in steps:
        if step.action == ACTION_SEARCH_WEB:
            trail.append(f"search_web({step.args.get('query', '')!r})")
        elif step.action == ACTION_SCRAPE_RESULTS:
            trail.append(f"scrape_results({len(step.args.get('urls', []))} urls)")
        elif step.action == ACTION_SEARCH_MEMORY:
            trail.append(f"search_memory({step.args.get('query', '')!r})")
    evidence = "; ".join(node.evidence) if node.evidence else "none"
    return (
        f"[{node.node_id}] {node.text}\n"
        f"Answer: {node.answer}\n"
        f"Evidence: {evidence}\n"
        f"Trail: {', '.join(trail) if trail else 'direct answer'}"
    )


def synthesize(tree: ExplorationTree, *, gateway: Gateway) -> str:
    """Propagate answers bottom-up; returns (and stores) the root's answer.

    Only nodes with children need synthesis; answered leaves pass through
    untouched. Deeper nodes synthesize strictly before their parents.
    """
    candidates = [
        node
        for node in tree.nodes.values()
        if node.child_ids or node.node_id == tree.root_id
    ]
    candidates.sort(key=lambda n: (-tree.depth(n.node_id), int(n.node_id[1:])))
    for node in candidates:
        inputs = []
        for child_id in node.child_ids:
            child = tree.nodes[child_id]
            if child.answer is None:
                raise RunFailure(f"cannot synthesize {node.node_id}: {child_id} unanswered")
            inputs.append(f"- [{child_id}] {child.text}: {child.answer}")
        if node.prior_answer is not None:
            inputs.append(f"- earlier direct answer to this question: {node.prior_answer}")
        question = node.text
        user = (
            f"Parent question: {question}\n\n"
            f"Sub-answers:\n" + ("\n".join(inputs) if inputs else "(no sub-answers)") + "\n\n"
            "Synthesize the answer to the parent question."
        )
        result = gateway.complete(
            CompletionRequest(
                role_tag="synthesizer",
                system_text=SYNTHESIZER_SYSTEM,
                user_text=user,
                structured_schema=SYNTHESIS_SCHEMA,
            )
        )
        node.answer = result.parsed["answer"]
        node.status = STATUS_SYNTHESIZED
    tree.final_answer = tree.root.answer
    return tree.final_answer or ""


def _exploration_query(sample: Sample, phase: str) -> str:
    entities = " ".join(sample.entity_keys[:3])
    if sample.task_kind == LEGAL:
        base = f"legal case outcome research methodology {entities}"
    else:
        base = f"sales value proposition research methodology {entities}"
    if phase == "post":
        base = f"{base} follow-up lessons"
    return base.strip()


def explore_craft(
    sample: Sample,
    memory: MemoryState,
    budgets: Budgets,
    *,
    gateway: Gateway,
    web: WebSession,
    settings: RunSettings,
    phase: str,
    cycles_budget: int,
    session: Optional[SessionMemory] = None,
) -> tuple[list[CraftEntry], int]:
    """Run up to ``cycles_budget`` search-and-scrape-and-distill cycles.

    Returns the candidate craft entries plus the cycles consumed. Failures
    consume their cycle, produce nothing, and never fail the sample. When
    memory is frozen the caller uses the entries in-session only and they are
    never written back.
    """
    entries: list[CraftEntry] = []
    if cycles_budget <= 0:
        return entries, 0
    query = _exploration_query(sample, phase)
    used = 0
    for cycle in range(cycles_budget):
        used += 1
        try:
            results = web.search(query, max_results=settings.exploration_max_results)
            pages = (
                web.scrape([r.url for r in results[: settings.exploration_scrape_top]])
                if results
                else []
            )
            scratch_note = ""
            if phase == "post" and session is not None and session.scratchpad:
                scratch_note = f"\n\nSession scratchpad digest:\n{session.scratchpad[:2000]}"
            user = (
                f"Task context:\n{sample.input_context}\n\n"
                f"Exploration cycle {cycle + 1} ({phase}-solve), query: {query!r}\n\n"
                f"Search results:\n{_observation_for_results(results)}\n\n"
                f"Page excerpts:\n{_observation_for_pages(pages, settings.page_digest_chars)}"
                f"{scratch_note}"
            )
            result = gateway.complete(
                CompletionRequest(
                    role_tag="explorer",
                    system_text=EXPLORER_SYSTEM,
                    user_text=user,
                    structured_schema=EXPLORATION_SCHEMA,
                )
            )
            for text in result.parsed["insights"]:
                entries.append(
                    CraftEntry(
                        text=text,
                        domain_tag=sample.task_kind,
                        batch_added=settings.batch_index,
                        source="exploration",
                    )
                )
            next_query = result.parsed.get("next_query")
            if not next_query:
                break
            query = next_query
        except (GatewayError, SearchBackendError, ValueError) as exc:
            logger.warning("%s: exploration cycle %d failed: %s", sample.id, cycle + 1, exc)
    return entries, used


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _solve_wave(
    nodes: list[QuestionNode],
    sample: Sample,
    memory: MemoryState,
    session: SessionMemory,
    budgets: Budgets,
    *,
    gateway: Gateway,
    web: WebSession,
    settings: RunSettings,
    transcripts: dict[str, list[TranscriptStep]],
) -> int:
    """Solve a wave's nodes (concurrently when configured); returns cap hits.

    Results are merged into the session at the wave barrier in node order,
    so scratchpad and findings are identical for any worker count.
    """
    if not nodes:
        return 0
    outcomes: dict[str, tuple[list[TranscriptStep], Optional[Finding], Optional[Exception], bool]] = {}

    def run(node: QuestionNode) -> None:
        try:
            steps, finding, cap_hit = solve_subquestion(
                node, sample, memory, session, budgets,
                gateway=gateway, web=web, settings=settings,
            )
            outcomes[node.node_id] = (steps, finding, None, cap_hit)
        except GatewayError as exc:
            outcomes[node.node_id] = ([], None, exc, False)

    workers = min(settings.node_workers, len(nodes))
    if workers <= 1:
        for node in nodes:
            run(node)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, nodes))

    cap_hits = 0
    failure: Optional[tuple[str, Exception]] = None
    for node in nodes:
        steps, finding, error, cap_hit = outcomes[node.node_id]
        transcripts[node.node_id] = steps
        if error is not None:
            if failure is None:
                failure = (node.node_id, error)
            continue
        cap_hits += int(cap_hit)
        session.add_finding(finding)
        session.extend_scratchpad(_scratchpad_block(node, steps))
    if failure is not None:
        raise RunFailure(f"solver failed on {failure[0]}: {failure[1]}")
    return cap_hits


def run_sample(
    sample: Sample,
    memory: MemoryState,
    budgets: Budgets,
    *,
    gateway: Gateway,
    web: WebSession,
    settings: Optional[RunSettings] = None,
) -> RunOutcome:
    """Run the full within-session pipeline for one sample.

    Hard completion failures mark the run failed while preserving the partial
    record; reflection and exploration failures degrade gracefully. For
    accurate per-sample call accounting, give each sample its own gateway
    over the shared backend.
    """
    settings = settings or RunSettings()
    start = time.monotonic()
    calls_before = gateway.call_count()
    tree = ExplorationTree(sample.input_context, budgets)
    session = SessionMemory()
    transcripts: dict[str, list[TranscriptStep]] = {}
    staged_craft: list[CraftEntry] = []
    cycles_used = 0
    cap_hits = 0
    failure_reason: Optional[str] = None
    active_rule_keys: list[str] = []

    try:
        craft_context: list[CraftEntry] = []
        if settings.store_enabled(STORE_CRAFT):
            craft_context = filter_craft(memory.craft, sample, gateway)
            if (
                len(craft_context) < settings.sparse_craft_threshold
                and budgets.exploration_budget > 0
            ):
                found, cycles_used = explore_craft(
                    sample, memory, budgets,
                    gateway=gateway, web=web, settings=settings,
                    phase="pre", cycles_budget=budgets.exploration_budget,
                )
                craft_context = craft_context + found
                if not memory.frozen:
                    staged_craft.extend(found)

        rules: list[DecompositionRule] = []
        if settings.store_enabled(STORE_RULES):
            rules = applicable_rules(memory.rules, settings.min_rule_weight)
        active_rule_keys = [r.canonical_key for r in rules]

        wave_nodes = decompose_wave0(
            sample, craft_context, rules, budgets, gateway=gateway, tree=tree
        )
        cap_hits += _solve_wave(
            wave_nodes, sample, memory, session, budgets,
            gateway=gateway, web=web, settings=settings, transcripts=transcripts,
        )

        for checkpoint in range(budgets.reflection_checkpoints):
            new_nodes = reflect(
                sample, tree, session, craft_context, rules, budgets,
                checkpoint=checkpoint, gateway=gateway,
            )
            cap_hits += _solve_wave(
                new_nodes, sample, memory, session, budgets,
                gateway=gateway, web=web, settings=settings, transcripts=transcripts,
            )

        final_answer = synthesize(tree, gateway=gateway)

        if (
            settings.store_enabled(STORE_CRAFT)
            and settings.post_solve_exploration
            and final_answer
            and cycles_used < budgets.exploration_budget
        ):
            found, more = explore_craft(
                sample, memory, budgets,
                gateway=gateway, web=web, settings=settings,
                phase="post", cycles_budget=budgets.exploration_budget - cycles_used,
                session=session,
            )
            cycles_used += more
            if not memory.frozen:
                staged_craft.extend(found)
    except (RunFailure, GatewayError) as exc:
        failure_reason = str(exc)
        logger.warning("%s: run failed: %s", sample.id, failure_reason)

    try:
        counters = web.counters().to_dict()
    except LookupError:
        counters = {}
    agent_steps = sum(
        1 for steps in transcripts.values() for step in steps if not step.forced
    )
    record = RunRecord(
        sample_id=sample.id,
        task_kind=sample.task_kind,
        status="failed" if failure_reason else "ok",
        failure_reason=failure_reason,
        final_answer=tree.final_answer,
        questions_used=tree.questions_used,
        wave_count=tree.wave_count(),
        agent_steps_total=agent_steps,
        cap_hits=cap_hits,
        llm_calls=gateway.call_count() - calls_before,
        counters=counters,
        scratchpad=session.scratchpad,
        active_rule_keys=active_rule_keys,
        new_craft_entries=staged_craft,
        exploration_cycles=cycles_used,
        tree=tree.to_json(),
        transcripts={nid: [s.to_json() for s in steps] for nid, steps in sorted(transcripts.items())},
        wall_time_seconds=time.monotonic() - start,
    )
    return RunOutcome(tree.final_answer, tree, record)
