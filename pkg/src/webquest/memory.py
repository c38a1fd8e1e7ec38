"""The four persistent memory stores and their retrieval filters.

Procedural memory is three stores — free-text craft knowledge, weighted
decomposition rules, and categorized web-action rules — and declarative
memory is one entity-keyed domain store. Rule weight is always derived as
support / (support + contradiction), never cached. Everything persists as
diff-friendly UTF-8 text, one file per store, so the learned state stays
human-readable and hand-editable.

A frozen :class:`MemoryState` rejects every mutation; inference runs load a
frozen state and are guaranteed to leave the memory directory byte-identical.
"""

from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .corpus import Sample, normalize_entity
from .gateway import CompletionRequest, FormatError, Gateway, ResponseSchema

logger = logging.getLogger(__name__)

SOURCE_EXPLORATION = "exploration"
SOURCE_CONSOLIDATION = "consolidation"

WEB_RULE_CATEGORIES = ("query_formulation", "url_selection", "scraping")

DEFAULT_MIN_RULE_WEIGHT = 0.5

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_WS = re.compile(r"\s+")


class MemoryError_(Exception):
    """Base class for memory store failures."""


class FrozenMemoryError(MemoryError_):
    """A mutation was attempted on a frozen memory state."""


class MemoryFormatError(MemoryError_):
    """A persisted store file could not be parsed."""


def canonicalize(text: str) -> str:
    """Lowercase, strip punctuation, and collapse whitespace.

    Two rules whose condition+action canonicalize identically are the same
    rule and merge by summing their counters.
    """
    return _WS.sub(" ", text.translate(_PUNCT_TABLE).lower()).strip()


def _one_line(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass
class CraftEntry:
    text: str
    domain_tag: str
    batch_added: int
    source: str


@dataclass
class CraftStore:
    entries: list[CraftEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class DecompositionRule:
    """A conditional rewrite rule: WHEN <pattern>, ADD a covering sub-question."""

    condition_pattern: str
    action_template: str
    support: int = 0
    contradiction: int = 0
    batch_history: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.condition_pattern = _one_line(self.condition_pattern)
        self.action_template = _one_line(self.action_template)
        if self.support < 0 or self.contradiction < 0:
            raise ValueError("support and contradiction must be non-negative")

    @property
    def canonical_key(self) -> str:
        return canonicalize(f"{self.condition_pattern} {self.action_template}")

    @property
    def weight(self) -> float:
        # Bounded [0, 1] form of the support-to-contradiction ratio; a rule
        # with no evidence at all weighs 0 and is never injected.
        total = self.support + self.contradiction
        if total == 0:
            return 0.0
        return self.support / total


@dataclass
class WebActionRule:
    category: str
    text: str
    support: int = 1
    batch_added: int = 0

    def __post_init__(self) -> None:
        if self.category not in WEB_RULE_CATEGORIES:
            raise ValueError(f"unknown web-action category {self.category!r}")
        self.text = _one_line(self.text)


@dataclass
class DomainFacts:
    facts: str
    last_updated_batch: int = 0
    provenance_sample_ids: list[str] = field(default_factory=list)


@dataclass
class DomainStore:
    entries: dict[str, DomainFacts] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MemoryState:
    """The full cross-session memory: three procedural stores plus one declarative."""

    craft: CraftStore = field(default_factory=CraftStore)
    rules: list[DecompositionRule] = field(default_factory=list)
    web_rules: list[WebActionRule] = field(default_factory=list)
    domain: DomainStore = field(default_factory=DomainStore)
    frozen: bool = False
    batches_trained: int = 0

    def _mutable(self) -> None:
        if self.frozen:
            raise FrozenMemoryError("memory is frozen; no mutation allowed")

    def freeze(self) -> None:
        self.frozen = True

    # -- craft (M1) ---------------------------------------------------------
    def add_craft_entries(self, entries: list[CraftEntry]) -> None:
        self._mutable()
        self.craft.entries.extend(entries)

    def replace_craft(self, entries: list[CraftEntry]) -> list[CraftEntry]:
        """Whole-store rewrite; returns the previous entries for archiving."""
        self._mutable()
        previous = self.craft.entries
        self.craft.entries = list(entries)
        return previous

    # -- decomposition rules (M2) -------------------------------------------
    def rule_by_key(self, key: str) -> Optional[DecompositionRule]:
        for rule in self.rules:
            if rule.canonical_key == key:
                return rule
        return None

    def upsert_rule(
        self, condition: str, action: str, batch: int, support: int = 1, contradiction: int = 0
    ) -> DecompositionRule:
        """Add a rule, merging counters into an existing rule with the same key."""
        self._mutable()
        candidate = DecompositionRule(condition, action, support, contradiction, [batch])
        existing = self.rule_by_key(candidate.canonical_key)
        if existing is not None:
            existing.support += support
            existing.contradiction += contradiction
            if batch not in existing.batch_history:
                existing.batch_history.append(batch)
            return existing
        self.rules.append(candidate)
        self.rules.sort(key=lambda r: r.canonical_key)
        return candidate

    def apply_rule_evidence(self, key: str, support: int, contradiction: int, batch: int) -> bool:
        self._mutable()
        rule = self.rule_by_key(key)
        if rule is None:
            return False
        rule.support += support
        rule.contradiction += contradiction
        if (support or contradiction) and batch not in rule.batch_history:
            rule.batch_history.append(batch)
        return True

    def remove_rule(self, key: str) -> bool:
        self._mutable()
        before = len(self.rules)
        self.rules = [r for r in self.rules if r.canonical_key != key]
        return len(self.rules) < before

    # -- web-action rules (M3) ----------------------------------------------
    def add_web_rule(self, category: str, text: str, batch: int) -> WebActionRule:
        """Add a web-action rule; re-adding identical text reinforces it."""
        self._mutable()
        normalized = canonicalize(text)
        for rule in self.web_rules:
            if rule.category == category and canonicalize(rule.text) == normalized:
                rule.support += 1
                return rule
        rule = WebActionRule(category=category, text=text, support=1, batch_added=batch)
        self.web_rules.append(rule)
        return rule

    # -- domain store (M4) ----------------------------------------------------
    def fold_domain_facts(self, entity: str, facts: str, sample_id: str, batch: int) -> None:
        self._mutable()
        key = normalize_entity(entity)
        if not key:
            return
        entry = self.domain.entries.get(key)
        if entry is None:
            self.domain.entries[key] = DomainFacts(
                facts=facts.strip(),
                last_updated_batch=batch,
                provenance_sample_ids=[sample_id],
            )
            return
        if facts.strip() and facts.strip() not in entry.facts:
            entry.facts = f"{entry.facts}\n{facts.strip()}" if entry.facts else facts.strip()
        entry.last_updated_batch = batch
        if sample_id not in entry.provenance_sample_ids:
            entry.provenance_sample_ids.append(sample_id)

    def mark_batch_trained(self, batch_index: int) -> None:
        self._mutable()
        self.batches_trained = max(self.batches_trained, batch_index + 1)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

_INDICES_SCHEMA = ResponseSchema(
    "relevant-entry-indices",
    {"type": "array", "items": {"type": "integer", "minimum": 0}},
)

_FILTER_SYSTEM = (
    "You curate a library of research strategy notes. Given a new research task "
    "and the numbered notes below, select the notes that would genuinely help "
    "with this task. Reply with a fenced json array of the selected note numbers "
    "(an empty array if none apply)."
)


def filter_craft(store: CraftStore, sample: Sample, gateway: Gateway) -> list[CraftEntry]:
    """Select the craft entries relevant to a sample via one completion call.

    An empty store short-circuits to an empty result with no call. A reply
    that cannot be parsed is treated as "nothing relevant" (which is what
    triggers cold-start exploration) and logged.
    """
    if not store.entries:
        return []
    numbered = "\n".join(f"{i}. {entry.text}" for i, entry in enumerate(store.entries))
    request = CompletionRequest(
        role_tag="consolidator",
        system_text=_FILTER_SYSTEM,
        user_text=(
            f"Research task:\n{sample.input_context}\n\n"
            f"Strategy notes:\n{numbered}\n\n"
            "Select the numbers of the notes relevant to this task."
        ),
        structured_schema=_INDICES_SCHEMA,
    )
    try:
        result = gateway.complete(request)
    except FormatError as exc:
        logger.warning("craft relevance filter unparseable for %s: %s", sample.id, exc)
        return []
    selected = sorted({i for i in result.parsed if 0 <= i < len(store.entries)})
    return [store.entries[i] for i in selected]


def retrieve_domain(store: DomainStore, sample: Sample) -> str:
    """Concatenate stored facts for the sample's entity keys, in key order."""
    blocks = []
    for key in sample.entity_keys:
        entry = store.entries.get(key)
        if entry is not None and entry.facts:
            blocks.append(f"[{key}]\n{entry.facts}")
    return "\n\n".join(blocks)


def applicable_rules(
    rules: list[DecompositionRule], min_weight: float = DEFAULT_MIN_RULE_WEIGHT
) -> list[DecompositionRule]:
    """Rules worth injecting, in a total deterministic order."""
    if not 0.0 <= min_weight <= 1.0:
        raise ValueError("min_weight must lie in [0, 1]")
    kept = [r for r in rules if r.weight >= min_weight]
    kept.sort(key=lambda r: (-r.weight, -r.support, r.canonical_key))
    return kept


# ---------------------------------------------------------------------------
# Persistence (one readable text file per store)
# ---------------------------------------------------------------------------

CRAFT_FILE = "craft.txt"
RULES_FILE = "decomposition_rules.txt"
WEB_RULES_FILE = "web_action_rules.txt"
DOMAIN_FILE = "domain_facts.txt"
META_FILE = "meta.txt"

_CRAFT_HEADER = re.compile(r"^--- entry batch=(\d+) source=(\S+) domain=(\S+)\s*$")
_RULE_HEADER = re.compile(r"^rule support=(\d+) contradiction=(\d+) batches=([\d,]*)\s*$")
_WEB_RULE_HEADER = re.compile(r"^rule category=(\S+) support=(\d+) batch=(\d+)\s*$")
_DOMAIN_HEADER = re.compile(r"^## entity: (.+)$")
_DOMAIN_META = re.compile(r"^# batch=(\d+) samples=(.*)$")


def _indent(text: str) -> str:
    return "\n".join(f"  {line}" if line else "" for line in text.split("\n"))


def _dedent_lines(lines: list[str]) -> str:
    return "\n".join(line[2:] if line.startswith("  ") else line for line in lines)


def persist(state: MemoryState, directory: Union[str, Path]) -> None:
    """Write all stores under ``directory`` as diff-friendly text."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    craft_lines = ["# craft knowledge: free-text research strategy entries", ""]
    for entry in state.craft.entries:
        craft_lines.append(
            f"--- entry batch={entry.batch_added} source={entry.source} domain={entry.domain_tag}"
        )
        craft_lines.append(_indent(entry.text))
    (directory / CRAFT_FILE).write_text("\n".join(craft_lines) + "\n", encoding="utf-8")

    rule_lines = ["# decomposition rules: weight derives from support/(support+contradiction)", ""]
    for rule in sorted(state.rules, key=lambda r: r.canonical_key):
        batches = ",".join(str(b) for b in rule.batch_history)
        rule_lines.append(f"rule support={rule.support} contradiction={rule.contradiction} batches={batches}")
        rule_lines.append(f"  {rule.condition_pattern}")
        rule_lines.append(f"  {rule.action_template}")
    (directory / RULES_FILE).write_text("\n".join(rule_lines) + "\n", encoding="utf-8")

    web_lines = ["# web-action rules by tool-use stage", ""]
    for rule in state.web_rules:
        web_lines.append(f"rule category={rule.category} support={rule.support} batch={rule.batch_added}")
        web_lines.append(f"  {rule.text}")
    (directory / WEB_RULES_FILE).write_text("\n".join(web_lines) + "\n", encoding="utf-8")

    domain_lines = ["# domain facts keyed by normalized entity name", ""]
    for key in sorted(state.domain.entries):
        entry = state.domain.entries[key]
        samples = ",".join(sorted(entry.provenance_sample_ids))
        domain_lines.append(f"## entity: {key}")
        domain_lines.append(f"# batch={entry.last_updated_batch} samples={samples}")
        domain_lines.append(_indent(entry.facts))
    (directory / DOMAIN_FILE).write_text("\n".join(domain_lines) + "\n", encoding="utf-8")

    meta = f"frozen: {'true' if state.frozen else 'false'}\nbatches_trained: {state.batches_trained}\n"
    (directory / META_FILE).write_text(meta, encoding="utf-8")


def _load_craft(path: Path) -> CraftStore:
    store = CraftStore()
    if not path.exists():
        return store
    current: Optional[CraftEntry] = None
    body: list[str] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.startswith("#") and current is None:
            continue
        header = _CRAFT_HEADER.match(line)
        if header:
            if current is not None:
                current.text = _dedent_lines(body).strip("\n")
                store.entries.append(current)
            current = CraftEntry("", header.group(3), int(header.group(1)), header.group(2))
            body = []
        elif current is not None:
            body.append(line)
        elif line.strip():
            raise MemoryFormatError(f"{path}:{lineno}: text outside any craft entry")
    if current is not None:
        current.text = _dedent_lines(body).strip("\n")
        store.entries.append(current)
    return store


def _load_rules(path: Path) -> list[DecompositionRule]:
    rules: list[DecompositionRule] = []
    if not path.exists():
        return rules
    lines = path.read_text(encoding="utf-8").splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip() or line.startswith("#"):
            i += 1
            continue
        header = _RULE_HEADER.match(line)
        if header is None:
            raise MemoryFormatError(f"{path}:{i + 1}: expected rule header, got {line!r}")
        if i + 2 >= len(lines):
            raise MemoryFormatError(f"{path}:{i + 1}: truncated rule record")
        condition = lines[i + 1].strip()
        action = lines[i + 2].strip()
        batches = [int(b) for b in header.group(3).split(",") if b]
        rule = DecompositionRule(
            condition, action, int(header.group(1)), int(header.group(2)), batches
        )
        if any(r.canonical_key == rule.canonical_key for r in rules):
            raise MemoryFormatError(
                f"{path}:{i + 1}: duplicate canonical rule {rule.canonical_key!r}"
            )
        rules.append(rule)
        i += 3
    return rules


def _load_web_rules(path: Path) -> list[WebActionRule]:
    rules: list[WebActionRule] = []
    if not path.exists():
        return rules
    lines = path.read_text(encoding="utf-8").splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip() or line.startswith("#"):
            i += 1
            continue
        header = _WEB_RULE_HEADER.match(line)
        if header is None:
            raise MemoryFormatError(f"{path}:{i + 1}: expected web rule header, got {line!r}")
        if i + 1 >= len(lines):
            raise MemoryFormatError(f"{path}:{i + 1}: truncated web rule record")
        try:
            rules.append(
                WebActionRule(
                    category=header.group(1),
                    text=lines[i + 1].strip(),
                    support=int(header.group(2)),
                    batch_added=int(header.group(3)),
                )
            )
        except ValueError as exc:
            raise MemoryFormatError(f"{path}:{i + 1}: {exc}") from exc
        i += 2
    return rules


def _load_domain(path: Path) -> DomainStore:
    store = DomainStore()
    if not path.exists():
        return store
    key: Optional[str] = None
    meta: Optional[tuple[int, list[str]]] = None
    body: list[str] = []

    def flush() -> None:
        if key is not None:
            batch, samples = meta if meta else (0, [])
            store.entries[key] = DomainFacts(
                facts=_dedent_lines(body).strip("\n"),
                last_updated_batch=batch,
                provenance_sample_ids=samples,
            )

    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        header = _DOMAIN_HEADER.match(line)
        if header:
            flush()
            key = normalize_entity(header.group(1))
            meta = None
            body = []
            continue
        meta_match = _DOMAIN_META.match(line)
        if meta_match and key is not None and meta is None:
            meta = (int(meta_match.group(1)), [s for s in meta_match.group(2).split(",") if s])
            continue
        if key is not None:
            body.append(line)
        elif line.strip() and not line.startswith("#"):
            raise MemoryFormatError(f"{path}:{lineno}: text outside any entity section")
    flush()
    return store


def _load_meta(path: Path) -> tuple[bool, int]:
    if not path.exists():
        return False, 0
    frozen = False
    batches = 0
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        name, _, value = line.partition(":")
        name, value = name.strip(), value.strip()
        if name == "frozen":
            if value not in ("true", "false"):
                raise MemoryFormatError(f"{path}:{lineno}: frozen must be true or false")
            frozen = value == "true"
        elif name == "batches_trained":
            batches = int(value)
    return frozen, batches


def load(directory: Union[str, Path]) -> MemoryState:
    """Load a memory state from a directory; missing files mean empty stores."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MemoryError_(f"memory directory {directory} does not exist")
    frozen, batches = _load_meta(directory / META_FILE)
    return MemoryState(
        craft=_load_craft(directory / CRAFT_FILE),
        rules=_load_rules(directory / RULES_FILE),
        web_rules=_load_web_rules(directory / WEB_RULES_FILE),
        domain=_load_domain(directory / DOMAIN_FILE),
        frozen=frozen,
        batches_trained=batches,
    )
