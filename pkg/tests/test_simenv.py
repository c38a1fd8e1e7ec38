from datetime import date

import pytest

from webquest.aet import Budgets, RunSettings, run_sample
from webquest.gateway import CompletionRequest, Gateway, TransportError, make_limiter
from webquest.memory import MemoryState
from webquest.simenv import (
    DEFAULT_FALLBACK_RESPONSE,
    OracleBackend,
    OracleScript,
    ReplayBackend,
    SimDoc,
    SimWebBackend,
    load_oracle_script,
    load_sim_corpus,
    load_transcript,
    save_transcript,
)
from webquest.webtools import SearchQuery, WebClient

from .conftest import json_block, make_sample, rule, sim_docs_basic

CUTOFF = date(2023, 3, 15)


def _query(text, window=6, max_results=10):
    return SearchQuery(
        text=text, cutoff=CUTOFF, recency_window_months=window, max_results=max_results
    )


def _request(text, role="solver", system="sys"):
    return CompletionRequest(role_tag=role, system_text=system, user_text=text)


# -- sim search ---------------------------------------------------------------


def test_sim_search_date_gate():
    docs = sim_docs_basic() + [
        SimDoc(
            url="https://example.com/late",
            title="welding late",
            body="welding",
            published=date(2023, 4, 1),
        )
    ]
    backend = SimWebBackend(docs)
    urls = [r.url for r in backend.search(_query("welding"))]
    assert "https://example.com/late" not in urls
    assert len(urls) == 3


def test_sim_search_no_overlap_empty():
    backend = SimWebBackend(sim_docs_basic())
    assert backend.search(_query("quantum flowers")) == []


def test_sim_search_tie_break_by_url():
    docs = [
        SimDoc(url="https://b.com/x", title="widget", body="", published=date(2023, 1, 1)),
        SimDoc(url="https://a.com/x", title="widget", body="", published=date(2023, 1, 1)),
    ]
    backend = SimWebBackend(docs)
    results = backend.search(_query("widget"))
    assert [r.url for r in results] == ["https://a.com/x", "https://b.com/x"]
    assert [r.rank for r in results] == [1, 2]


def test_sim_search_ranks_by_overlap():
    docs = [
        SimDoc(
            url="https://one.com/",
            title="welding robots",
            body="welding robots everywhere",
            published=date(2023, 1, 1),
        ),
        SimDoc(url="https://two.com/", title="welding", body="", published=date(2023, 1, 1)),
    ]
    backend = SimWebBackend(docs)
    results = backend.search(_query("welding robots"))
    assert results[0].url == "https://one.com/"


def test_sim_fetch_unknown_url_errors():
    backend = SimWebBackend(sim_docs_basic())
    from webquest.webtools import FetchError

    with pytest.raises(FetchError):
        backend.fetch("https://example.com/nope")


def test_corpus_yaml_roundtrip(tmp_path):
    path = tmp_path / "corpus.yaml"
    path.write_text(
        """
docs:
  - url: https://example.com/a
    title: Alpha
    published: 2023-01-10
    keywords: [alpha, one]
    body: |
      Alpha body text.
""",
        encoding="utf-8",
    )
    docs = load_sim_corpus(path)
    assert docs[0].url == "https://example.com/a"
    assert docs[0].published == date(2023, 1, 10)
    assert docs[0].keywords == ("alpha", "one")


# -- oracle -------------------------------------------------------------------


def test_oracle_first_match_wins():
    backend = OracleBackend(
        OracleScript([rule("first", contains="x"), rule("second", contains="x")])
    )
    assert backend.generate(_request("x")) == "first"


def test_oracle_consume_once_falls_through():
    backend = OracleBackend(
        OracleScript([rule("once", contains="x", once=True), rule("after", contains="x")])
    )
    assert backend.generate(_request("x")) == "once"
    assert backend.generate(_request("x")) == "after"


def test_oracle_fallback_always_matches():
    backend = OracleBackend(OracleScript([rule("specific", contains="nothing-matches-this")]))
    assert backend.generate(_request("zzz")) == DEFAULT_FALLBACK_RESPONSE


def test_oracle_role_filter():
    backend = OracleBackend(
        OracleScript([rule("for-judge", role="judge"), rule("for-anyone")])
    )
    assert backend.generate(_request("x", role="solver")) == "for-anyone"
    assert backend.generate(_request("x", role="judge")) == "for-judge"


def test_oracle_pattern_captures():
    backend = OracleBackend(
        OracleScript([rule("echo: {word}", pattern=r"say (?P<word>\w+)")])
    )
    assert backend.generate(_request("please say hello now")) == "echo: hello"


def test_oracle_script_yaml(tmp_path):
    path = tmp_path / "oracle.yaml"
    path.write_text(
        """
rules:
  - name: decomp
    role: decomposer
    contains: ["Research task"]
    response: |
      ```json
      ["q one", "q two"]
      ```
  - name: fallback
    response: "nope"
""",
        encoding="utf-8",
    )
    script = load_oracle_script(path)
    backend = OracleBackend(script)
    reply = backend.generate(_request("Research task:\nfoo", role="decomposer"))
    assert '"q one"' in reply
    assert backend.generate(_request("anything")) == "nope"


def test_transcript_save_load(tmp_path):
    backend = OracleBackend(OracleScript([rule("pong", contains="ping")]))
    backend.generate(_request("ping"))
    path = tmp_path / "transcript.jsonl"
    save_transcript(backend.transcript, path)
    entries = load_transcript(path)
    assert len(entries) == 1
    assert entries[0].response == "pong"
    assert entries[0].user_text == "ping"


def test_replay_backend_exact_and_exhausted():
    backend = OracleBackend(OracleScript([rule("pong", contains="ping")]))
    gateway = Gateway(backend, limiter=make_limiter())
    gateway.complete(_request("ping"))
    replay = ReplayBackend(backend.transcript)
    assert replay.generate(_request("ping")) == "pong"
    with pytest.raises(TransportError):
        replay.generate(_request("ping"))


# -- record/replay equality over a full run -----------------------------------


def _end_to_end_rules():
    return [
        rule(
            json_block(["What pain did Volt Motors have?"]),
            role="decomposer",
            name="decompose",
        ),
        rule(
            json_block({"action": "search_web", "query": "volt welding"}),
            role="solver",
            contains=("What pain did Volt Motors have?", "Choose action 1 of 4."),
            name="solve-1-search",
        ),
        rule(
            json_block({"action": "scrape_results", "urls": ["https://example.com/a"]}),
            role="solver",
            contains=("What pain did Volt Motors have?", "Choose action 2 of 4."),
            name="solve-1-scrape",
        ),
        rule(
            json_block(
                {
                    "action": "generate_answer",
                    "answer": "Weld defects slowed the line.",
                    "evidence": ["https://example.com/a"],
                }
            ),
            role="solver",
            contains=("What pain did Volt Motors have?", "Choose action 3 of 4."),
            name="solve-1-answer",
        ),
        rule(
            json_block(
                {
                    "rationale": "Check the fix too.",
                    "questions": [{"question": "How does RoboWeld address defects?", "parent": None}],
                }
            ),
            role="reflector",
            name="reflect",
        ),
        rule(
            json_block(
                {
                    "action": "generate_answer",
                    "answer": "Adaptive seam tracking.",
                    "evidence": [],
                }
            ),
            role="solver",
            contains="How does RoboWeld address defects?",
            name="solve-2-answer",
        ),
        rule(
            json_block({"answer": "Pitch RoboWeld on defect reduction."}),
            role="synthesizer",
            name="synth",
        ),
    ]


def _run_once(backend):
    sample = make_sample()
    memory = MemoryState()
    client = WebClient(SimWebBackend(sim_docs_basic()))
    gateway = Gateway(backend, limiter=make_limiter())
    web = client.session(sample.id, CUTOFF, 6)
    budgets = Budgets(
        question_budget=2,
        initial_wave=1,
        reflection_checkpoints=1,
        max_agent_steps=4,
        exploration_budget=0,
    )
    settings = RunSettings(node_workers=1)
    return run_sample(sample, memory, budgets, gateway=gateway, web=web, settings=settings)


def test_record_replay_reproduces_run(tmp_path):
    scripted = OracleBackend(OracleScript(_end_to_end_rules()))
    original = _run_once(scripted)
    assert original.record.ok
    assert original.final_answer == "Pitch RoboWeld on defect reduction."

    path = tmp_path / "transcript.jsonl"
    save_transcript(scripted.transcript, path)
    replay = ReplayBackend(load_transcript(path))
    replayed = _run_once(replay)

    first = original.record.to_json(include_timing=False)
    second = replayed.record.to_json(include_timing=False)
    assert first == second
