"""Deterministic offline environment for reproducible end-to-end runs.

Two pieces: a dated synthetic document corpus that stands in for the web
(keyword-overlap ranking, strict date gating, tie-break by URL), and a
rule-driven scripted oracle that stands in for the completion backend
(first matching rule fires, consume-once rules fire at most once, a fallback
always exists). Both are loaded from human-editable YAML files; see the
format notes on :func:`load_sim_corpus` and :func:`load_oracle_script`.

Every oracle interaction is appended to a transcript, which can be saved and
replayed: a :class:`ReplayBackend` built from a transcript reproduces the
exact same run.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional, Union

import yaml

from .corpus import Dataset, load_dataset
from .gateway import CompletionRequest, TransportError
from .webtools import FetchError, SearchQuery, SearchResult, normalize_url

DEFAULT_FALLBACK_RESPONSE = "UNMATCHED ORACLE REQUEST"

_TOKEN = re.compile(r"[a-z0-9]+")


class SimEnvError(Exception):
    """Malformed corpus, script, or transcript."""


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


# ---------------------------------------------------------------------------
# Simulated web
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimDoc:
    url: str
    title: str
    body: str
    published: date
    keywords: tuple[str, ...] = ()


def load_sim_corpus(path: Union[str, Path]) -> list[SimDoc]:
    """Load a YAML corpus: ``docs:`` list of url/title/published/keywords/body."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    docs = []
    seen: set[str] = set()
    for i, item in enumerate(raw.get("docs", [])):
        try:
            url = normalize_url(item["url"])
            published = item["published"]
            if isinstance(published, str):
                published = date.fromisoformat(published)
            doc = SimDoc(
                url=url,
                title=str(item.get("title", "")),
                body=str(item.get("body", "")),
                published=published,
                keywords=tuple(str(k) for k in item.get("keywords", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SimEnvError(f"{path}: doc #{i}: {exc}") from exc
        if doc.url in seen:
            raise SimEnvError(f"{path}: duplicate doc url {doc.url}")
        seen.add(doc.url)
        docs.append(doc)
    return docs


class SimWebBackend:
    """Keyword-overlap search plus exact-URL fetches over a fixed corpus.

    Satisfies the same contract as the live backend; the strict date gate
    (published within [cutoff - window, cutoff], undated impossible by
    construction) is applied here as well as in the client.
    """

    def __init__(self, docs: list[SimDoc]) -> None:
        self._docs = list(docs)
        self._by_url = {doc.url: doc for doc in self._docs}
        self._doc_tokens = {
            doc.url: _tokens(doc.title) | _tokens(doc.body) | _tokens(" ".join(doc.keywords))
            for doc in self._docs
        }
        self.fetch_count = 0
        self._lock = threading.Lock()

    def search(self, query: SearchQuery) -> list[SearchResult]:
        wanted = _tokens(query.text)
        earliest = query.earliest
        scored: list[tuple[int, str, SimDoc]] = []
        for doc in self._docs:
            if doc.published > query.cutoff or doc.published < earliest:
                continue
            overlap = len(wanted & self._doc_tokens[doc.url])
            if overlap > 0:
                scored.append((overlap, doc.url, doc))
        scored.sort(key=lambda item: (-item[0], item[1]))
        results = []
        for rank, (_, _, doc) in enumerate(scored[: query.max_results], start=1):
            snippet = " ".join(doc.body.split())[:160]
            results.append(
                SearchResult(
                    url=doc.url,
                    title=doc.title,
                    snippet=snippet,
                    published=doc.published,
                    rank=rank,
                )
            )
        return results

    def fetch(self, url: str) -> str:
        doc = self._by_url.get(normalize_url(url))
        if doc is None:
            raise FetchError(f"no such document: {url}")
        with self._lock:
            self.fetch_count += 1
        return f"{doc.title}\n\n{doc.body}"


# ---------------------------------------------------------------------------
# Scripted oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleRule:
    """One scripted response: fires when role and all text patterns match."""

    response: str
    role: Optional[str] = None
    contains: tuple[str, ...] = ()
    pattern: Optional[str] = None
    once: bool = False
    name: str = ""

    def matches(self, request: CompletionRequest, haystack: str) -> Optional[re.Match]:
        if self.role is not None and request.role_tag != self.role:
            return None
        for needle in self.contains:
            if needle not in haystack:
                return None
        if self.pattern is not None:
            return re.search(self.pattern, haystack, re.DOTALL)
        return re.match("", "")


@dataclass
class OracleScript:
    """Ordered rules; construction guarantees a final catch-all fallback."""

    rules: list[OracleRule] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not any(self._is_catch_all(rule) for rule in self.rules):
            self.rules.append(
                OracleRule(response=DEFAULT_FALLBACK_RESPONSE, name="builtin-fallback")
            )

    @staticmethod
    def _is_catch_all(rule: OracleRule) -> bool:
        return rule.role is None and not rule.contains and rule.pattern is None and not rule.once


def load_oracle_script(path: Union[str, Path]) -> OracleScript:
    """Load a YAML script: ``rules:`` list of role/contains/pattern/once/response."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    rules = []
    for i, item in enumerate(raw.get("rules", [])):
        try:
            contains = item.get("contains", [])
            if isinstance(contains, str):
                contains = [contains]
            rules.append(
                OracleRule(
                    response=str(item["response"]),
                    role=item.get("role"),
                    contains=tuple(str(c) for c in contains),
                    pattern=item.get("pattern"),
                    once=bool(item.get("once", False)),
                    name=str(item.get("name", f"rule-{i}")),
                )
            )
        except KeyError as exc:
            raise SimEnvError(f"{path}: rule #{i} missing {exc.args[0]!r}") from exc
    return OracleScript(rules)


@dataclass
class TranscriptEntry:
    index: int
    role_tag: str
    system_text: str
    user_text: str
    response: str
    rule_name: str = ""

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "role_tag": self.role_tag,
            "system_text": self.system_text,
            "user_text": self.user_text,
            "response": self.response,
            "rule_name": self.rule_name,
        }


def _render(template: str, match: re.Match) -> str:
    text = template
    for key, value in (match.groupdict() or {}).items():
        if value is not None:
            text = text.replace("{" + key + "}", value)
    return text


class OracleBackend:
    """Completion backend driven by an :class:`OracleScript`.

    Matching and the consume-once bookkeeping are serialized under one lock,
    so concurrent callers see a consistent first-match-wins behavior. All
    traffic lands in ``transcript``.
    """

    backend_id = "scripted-oracle"

    def __init__(self, script: OracleScript) -> None:
        self._script = script
        self._consumed: set[int] = set()
        self.transcript: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def generate(self, request: CompletionRequest) -> str:
        haystack = f"{request.system_text}\n{request.user_text}"
        with self._lock:
            for index, rule in enumerate(self._script.rules):
                if rule.once and index in self._consumed:
                    continue
                match = rule.matches(request, haystack)
                if match is None:
                    continue
                if rule.once:
                    self._consumed.add(index)
                response = _render(rule.response, match)
                self.transcript.append(
                    TranscriptEntry(
                        index=len(self.transcript),
                        role_tag=request.role_tag,
                        system_text=request.system_text,
                        user_text=request.user_text,
                        response=response,
                        rule_name=rule.name,
                    )
                )
                return response
        raise AssertionError("oracle script invariant violated: no fallback rule")


def save_transcript(entries: list[TranscriptEntry], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(json.dumps(entry.to_json(), ensure_ascii=False) + "\n")


def load_transcript(path: Union[str, Path]) -> list[TranscriptEntry]:
    entries = []
    with Path(path).open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                entries.append(TranscriptEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise SimEnvError(f"{path}:{lineno}: bad transcript entry: {exc}") from exc
    return entries


class ReplayBackend:
    """Replays a recorded transcript, keyed by the full request text.

    A request that was never recorded (or is seen more often than recorded)
    raises TransportError, surfacing any divergence from the original run.
    """

    backend_id = "transcript-replay"

    def __init__(self, entries: list[TranscriptEntry]) -> None:
        self._queues: dict[tuple[str, str, str], list[str]] = {}
        for entry in entries:
            key = (entry.role_tag, entry.system_text, entry.user_text)
            self._queues.setdefault(key, []).append(entry.response)
        self._lock = threading.Lock()

    def generate(self, request: CompletionRequest) -> str:
        key = (request.role_tag, request.system_text, request.user_text)
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise TransportError(
                    f"replay has no recorded response for {request.role_tag} request"
                )
            return queue.pop(0)


# ---------------------------------------------------------------------------
# Scenario bundles
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """A self-contained fixture: datasets + corpus + oracle script + settings."""

    directory: Path
    datasets: dict[str, Dataset]
    docs: list[SimDoc]
    script: OracleScript
    settings: dict

    def fresh_backend(self) -> OracleBackend:
        return OracleBackend(self.script)


def load_scenario(directory: Union[str, Path]) -> Scenario:
    """Load a scenario directory.

    ``scenario.yaml`` may name multiple dataset files under ``datasets:``
    (e.g. train/test); otherwise a single ``dataset.jsonl`` is loaded under
    the name ``main``.
    """
    directory = Path(directory)
    settings_path = directory / "scenario.yaml"
    settings = {}
    if settings_path.exists():
        settings = yaml.safe_load(settings_path.read_text(encoding="utf-8")) or {}
    task_kind = settings.get("task", "sales")
    dataset_files = settings.get("datasets") or {"main": "dataset.jsonl"}
    datasets = {
        name: load_dataset(directory / filename, task_kind)
        for name, filename in dataset_files.items()
    }
    return Scenario(
        directory=directory,
        datasets=datasets,
        docs=load_sim_corpus(directory / "corpus.yaml"),
        script=load_oracle_script(directory / "oracle.yaml"),
        settings=settings,
    )
