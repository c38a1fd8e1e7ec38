from datetime import date
from pathlib import Path

import pytest

from webquest.aet import Budgets, RunRecord, RunSettings
from webquest.corpus import Dataset, SalesTruth
from webquest.gateway import Gateway, make_limiter
from webquest.learning import (
    TrainingConfig,
    TrainingError,
    load_records,
    phase_a_consolidate,
    phase_b_score,
    phase_c_rule_update,
    run_inference,
    run_training,
    write_record,
)
from webquest.memory import CraftEntry, MemoryState, canonicalize, load as load_memory
from webquest.simenv import OracleBackend, OracleScript, SimWebBackend
from webquest.webtools import WebClient

from .conftest import json_block, make_sample, rule, sim_docs_basic

RULE_CONDITION = "WHEN the buyer is industrial"
RULE_ACTION = "ADD a sub-question that COVERS automation pain"
RULE_KEY = canonicalize(f"{RULE_CONDITION} {RULE_ACTION}")

SAMPLE_SPECS = (
    ("t1", "Volt Motors", "Volt cut weld defects 40 percent", 5),
    ("t2", "Gale Retail", "Gale halved checkout queues", 3),
)


def _answer(text, evidence=()):
    return json_block(
        {"action": "generate_answer", "answer": text, "evidence": list(evidence)}
    )


def _sales_sample(sid, entity, prop):
    return make_sample(
        sid,
        input_context=f"Task {sid}: Acme Industrial sells RoboWeld to {entity}.",
        entity_keys=(entity.lower(),),
        ground_truth=SalesTruth((prop,)),
        reference_date=date(2023, 9, 15),
    )


def _training_dataset():
    return Dataset(
        samples=tuple(_sales_sample(sid, entity, prop) for sid, entity, prop, _ in SAMPLE_SPECS),
        task_kind="sales",
    )


def _training_rules():
    rules = []
    for sid, entity, prop, score in SAMPLE_SPECS:
        question = f"What does {entity} need?"
        rules += [
            rule(
                json_block({"insights": [f"note from {sid}"], "next_query": None}),
                role="explorer",
                contains=f"Task {sid}",
            ),
            rule(json_block([question]), role="decomposer", contains=f"Task {sid}"),
            rule(
                json_block({"action": "search_web", "query": f"{entity} operations"}),
                role="solver",
                contains=(question, "Choose action 1 of"),
            ),
            rule(
                _answer(f"{entity} situation summary"),
                role="solver",
                contains=(question, "Choose action 2 of"),
            ),
            rule(
                json_block({"answer": f"Pitch for {sid}"}),
                role="synthesizer",
                contains=question,
            ),
            rule(
                json_block({"learnings": [f"learned from {sid}"]}),
                role="consolidator",
                contains=f"Sample {sid} scratchpad",
            ),
            rule(
                json_block({"facts": [{"entity": entity, "text": f"{entity} fact"}]}),
                role="consolidator",
                contains=("entity-specific factual knowledge", f"Sample {sid}"),
            ),
            rule(
                json_block({"score": score, "matched_excerpt": "m", "rationale": "r"}),
                role="judge",
                contains=("Ground-truth pitch point", prop),
            ),
            rule(
                json_block({"covered": True}),
                role="judge",
                contains=("Did the tree cover this point?", prop),
            ),
        ]
    rules += [
        rule(json_block([0, 1]), role="consolidator", contains="Select the numbers"),
        rule(
            json_block({"entries": ["merged note A", "merged note B"]}),
            role="consolidator",
            contains="rewritten library",
        ),
        rule(
            json_block(
                {
                    "rules": [
                        {
                            "category": "query_formulation",
                            "text": "Use one focused query per sub-question.",
                            "action": "add",
                        }
                    ]
                }
            ),
            role="consolidator",
            contains="web-action rules",
        ),
        rule(
            json_block(
                {
                    "proposals": [
                        {"op": "add", "condition": RULE_CONDITION, "action": RULE_ACTION}
                    ]
                }
            ),
            role="consolidator",
            contains="conditional decomposition rules",
        ),
    ]
    return rules


def _training_budgets(exploration=1):
    return Budgets(
        question_budget=1,
        initial_wave=1,
        reflection_checkpoints=0,
        max_agent_steps=3,
        exploration_budget=exploration,
    )


def _train(tmp_path, *, rules=None, dataset=None, cfg=None, memory=None, run_dir="run"):
    backend = OracleBackend(OracleScript(rules if rules is not None else _training_rules()))
    client = WebClient(SimWebBackend(sim_docs_basic()))
    dataset = dataset or _training_dataset()
    cfg = cfg or TrainingConfig(
        batch_size=2,
        batch_count=1,
        budgets=_training_budgets(),
        workers=2,
        node_workers=1,
    )
    memory = memory if memory is not None else MemoryState()
    final_memory, reports = run_training(
        dataset,
        cfg,
        memory,
        backend=backend,
        web_client=client,
        run_dir=tmp_path / run_dir,
    )
    return final_memory, reports, backend


def _manual_record(sample_id, *, status="ok", active_keys=(), answer="pitch", scratchpad="pad"):
    return RunRecord(
        sample_id=sample_id,
        task_kind="sales",
        status=status,
        failure_reason=None if status == "ok" else "boom",
        final_answer=answer if status == "ok" else None,
        questions_used=1,
        wave_count=1,
        agent_steps_total=1,
        cap_hits=0,
        llm_calls=3,
        counters={"search_queries": 1},
        scratchpad=scratchpad,
        active_rule_keys=list(active_keys),
        new_craft_entries=[],
        exploration_cycles=0,
        tree={
            "nodes": {
                "q0": {"node_id": "q0", "text": "root", "parent_id": None},
                "q1": {"node_id": "q1", "text": f"question for {sample_id}", "parent_id": "q0"},
            }
        },
        transcripts={"q1": [{"action": "generate_answer", "args": {}, "observation": "", "forced": False}]},
        wall_time_seconds=0.1,
    )


# -- run_training end to end ----------------------------------------------------


def test_one_batch_memory_diff_hand_derived(tmp_path):
    memory, reports, _ = _train(tmp_path)

    # M1: exploration entries merged in sample order, then rewritten wholesale.
    assert [e.text for e in memory.craft.entries] == ["merged note A", "merged note B"]
    assert all(e.source == "consolidation" for e in memory.craft.entries)
    assert all(e.batch_added == 0 for e in memory.craft.entries)

    # M2: one proposed rule, no evidence yet (nothing was injected in batch 0).
    assert len(memory.rules) == 1
    learned = memory.rules[0]
    assert learned.canonical_key == RULE_KEY
    assert (learned.support, learned.contradiction) == (1, 0)
    assert learned.weight == 1.0
    assert learned.batch_history == [0]

    # M3: one added rule from the batch's single update call.
    assert len(memory.web_rules) == 1
    assert memory.web_rules[0].category == "query_formulation"
    assert memory.web_rules[0].support == 1

    # M4: one entity per sample, provenance tracked.
    assert sorted(memory.domain.entries) == ["gale retail", "volt motors"]
    assert memory.domain.entries["volt motors"].facts == "Volt Motors fact"
    assert memory.domain.entries["volt motors"].provenance_sample_ids == ["t1"]

    assert memory.batches_trained == 1

    assert len(reports) == 1
    report = reports[0]
    assert report.per_sample == [
        {"sample_id": "t1", "status": "ok", "score": 1.0},
        {"sample_id": "t2", "status": "ok", "score": 0.6},
    ]
    assert report.memory_diffs["craft_exploration_added"] == ["note from t1", "note from t2"]
    assert report.memory_diffs["craft_rewritten"] is True
    assert report.memory_diffs["rules_added"] == [RULE_KEY]
    assert report.memory_diffs["domain_updated"] == ["gale retail", "volt motors"]
    assert report.counter_aggregates["samples_ok"] == 2
    assert report.counter_aggregates["samples_failed"] == 0

    # Artifacts on disk: snapshot, report, records, live memory.
    run_dir = tmp_path / "run"
    assert (run_dir / "batches" / "batch_00" / "memory" / "craft.txt").exists()
    assert (run_dir / "batches" / "batch_00" / "report.json").exists()
    assert (run_dir / "batches" / "batch_00" / "records" / "t1.json").exists()
    assert load_memory(run_dir / "memory") == memory


def test_zero_batches_identity(tmp_path):
    cfg = TrainingConfig(batch_size=2, batch_count=0, budgets=_training_budgets())
    memory, reports, _ = _train(tmp_path, cfg=cfg)
    assert memory == MemoryState()
    assert reports == []


def test_training_requires_unfrozen_memory_and_truths(tmp_path):
    frozen = MemoryState()
    frozen.freeze()
    with pytest.raises(TrainingError, match="unfrozen"):
        _train(tmp_path, memory=frozen)

    truthless = Dataset(
        samples=(make_sample("x1", with_truth=False),), task_kind="sales"
    )
    cfg = TrainingConfig(batch_size=1, batch_count=1, budgets=_training_budgets())
    with pytest.raises(Exception, match="without ground truth"):
        _train(tmp_path, dataset=truthless, cfg=cfg)


def test_training_batch_size_bounds(tmp_path):
    cfg = TrainingConfig(batch_size=2, batch_count=2, budgets=_training_budgets())
    with pytest.raises(TrainingError, match="exceed"):
        _train(tmp_path, cfg=cfg)


def _generic_rules(score=5):
    return [
        rule(json_block(["generic question"]), role="decomposer"),
        rule(_answer("generic answer"), role="solver"),
        rule(json_block({"answer": "generic pitch"}), role="synthesizer"),
        rule(json_block({"learnings": []}), role="consolidator", contains="scratchpad:"),
        rule(json_block({"entries": []}), role="consolidator", contains="rewritten library"),
        rule(json_block({"rules": []}), role="consolidator", contains="web-action rules"),
        rule(
            json_block({"facts": []}),
            role="consolidator",
            contains="entity-specific factual knowledge",
        ),
        rule(
            json_block({"score": score, "matched_excerpt": "", "rationale": ""}),
            role="judge",
            contains="Ground-truth pitch point",
        ),
        rule(json_block({"covered": True}), role="judge"),
        rule(
            json_block({"proposals": []}),
            role="consolidator",
            contains="conditional decomposition rules",
        ),
    ]


def test_six_batches_of_ten_visit_every_sample_once(tmp_path):
    samples = tuple(
        _sales_sample(f"s{i:02d}", f"Entity {i}", f"prop {i}") for i in range(60)
    )
    dataset = Dataset(samples=samples, task_kind="sales")
    cfg = TrainingConfig(
        batch_size=10,
        batch_count=6,
        budgets=_training_budgets(exploration=0),
        workers=4,
        node_workers=1,
    )
    memory, reports, _ = _train(tmp_path, rules=_generic_rules(), dataset=dataset, cfg=cfg)
    assert len(reports) == 6
    seen = [row["sample_id"] for report in reports for row in report.per_sample]
    assert len(seen) == 60
    assert sorted(seen) == sorted(s.id for s in samples)
    assert all(len(report.per_sample) == 10 for report in reports)


def test_whole_batch_failure_skips_updates_but_reports(tmp_path):
    rules = [rule(json_block(["doomed"]), role="decomposer")]  # solver always fails
    cfg = TrainingConfig(
        batch_size=2, batch_count=1, budgets=_training_budgets(exploration=0)
    )
    memory, reports, _ = _train(tmp_path, rules=rules, cfg=cfg)
    assert memory.craft.entries == []
    assert memory.rules == []
    assert memory.web_rules == []
    assert len(memory.domain.entries) == 0
    assert [row["status"] for row in reports[0].per_sample] == ["failed", "failed"]
    assert [row["score"] for row in reports[0].per_sample] == [None, None]


def test_resume_from_batch_reproduces_final_memory(tmp_path):
    def cfg():
        return TrainingConfig(
            batch_size=1,
            batch_count=2,
            budgets=_training_budgets(),
            workers=1,
            node_workers=1,
        )

    run_dir = tmp_path / "run"
    final_a, _, _ = _train(tmp_path, cfg=cfg(), run_dir="run")
    bytes_full = {
        p.name: p.read_bytes() for p in sorted((run_dir / "memory").iterdir())
    }

    backend = OracleBackend(OracleScript(_training_rules()))
    client = WebClient(SimWebBackend(sim_docs_basic()))
    final_b, reports_b, = run_training(
        _training_dataset(),
        cfg(),
        MemoryState(),
        backend=backend,
        web_client=client,
        run_dir=run_dir,
        resume_from_batch=1,
    )[:2]
    bytes_resumed = {
        p.name: p.read_bytes() for p in sorted((run_dir / "memory").iterdir())
    }
    assert bytes_resumed == bytes_full
    assert final_b == final_a
    assert [r.batch_index for r in reports_b] == [1]


def test_resume_without_snapshot_fails(tmp_path):
    cfg = TrainingConfig(batch_size=1, batch_count=2, budgets=_training_budgets())
    backend = OracleBackend(OracleScript(_training_rules()))
    client = WebClient(SimWebBackend(sim_docs_basic()))
    with pytest.raises(TrainingError, match="cannot resume"):
        run_training(
            _training_dataset(),
            cfg,
            MemoryState(),
            backend=backend,
            web_client=client,
            run_dir=tmp_path / "fresh",
            resume_from_batch=1,
        )


# -- phase A ------------------------------------------------------------------


def test_phase_a_zero_successful_runs_leaves_memory_unchanged():
    memory = MemoryState()
    gateway = Gateway(OracleBackend(OracleScript([])), limiter=make_limiter())
    records = [_manual_record("t1", status="failed")]
    diffs = phase_a_consolidate(records, memory, gateway=gateway, batch_index=0)
    assert memory == MemoryState()
    assert diffs["craft_rewritten"] is False
    assert gateway.call_count() == 0


def test_phase_a_folds_entity_facts():
    memory = MemoryState()
    rules = [
        rule(json_block({"learnings": []}), role="consolidator", contains="scratchpad:"),
        rule(json_block({"entries": []}), role="consolidator", contains="rewritten library"),
        rule(json_block({"rules": []}), role="consolidator", contains="web-action rules"),
        rule(
            json_block({"facts": [{"entity": "Volt Motors", "text": "needs automation"}]}),
            role="consolidator",
            contains="entity-specific factual knowledge",
        ),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    phase_a_consolidate([_manual_record("t1")], memory, gateway=gateway, batch_index=2)
    assert memory.domain.entries["volt motors"].facts == "needs automation"
    assert memory.domain.entries["volt motors"].last_updated_batch == 2


def test_phase_a_rewrite_fixed_point_keeps_store():
    memory = MemoryState()
    memory.add_craft_entries([CraftEntry("keep me", "sales", 0, "consolidation")])
    rules = [
        rule(json_block({"learnings": ["x"]}), role="consolidator", contains="scratchpad:"),
        rule(json_block({"entries": ["keep me"]}), role="consolidator", contains="rewritten library"),
        rule(json_block({"rules": []}), role="consolidator", contains="web-action rules"),
        rule(
            json_block({"facts": []}),
            role="consolidator",
            contains="entity-specific factual knowledge",
        ),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    diffs = phase_a_consolidate([_manual_record("t1")], memory, gateway=gateway, batch_index=1)
    assert diffs["craft_rewritten"] is False
    assert [e.batch_added for e in memory.craft.entries] == [0]


def test_phase_a_gateway_failure_leaves_store_unchanged():
    memory = MemoryState()
    memory.add_craft_entries([CraftEntry("original", "sales", 0, "consolidation")])
    # distill + rewrite replies are garbage -> craft unchanged; facts valid -> folded
    rules = [
        rule(
            json_block({"facts": [{"entity": "acme", "text": "fact"}]}),
            role="consolidator",
            contains="entity-specific factual knowledge",
        ),
        rule(json_block({"rules": []}), role="consolidator", contains="web-action rules"),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    phase_a_consolidate([_manual_record("t1")], memory, gateway=gateway, batch_index=1)
    assert [e.text for e in memory.craft.entries] == ["original"]
    assert "acme" in memory.domain.entries


def test_phase_a_never_sees_ground_truth():
    import inspect

    params = inspect.signature(phase_a_consolidate).parameters
    assert "truths" not in params
    assert "scores" not in params


# -- phase B ------------------------------------------------------------------


def test_phase_b_scores_and_excludes_failures():
    truths = {
        "t1": SalesTruth(("prop one",)),
        "t2": SalesTruth(("prop two",)),
    }
    gateway = Gateway(
        OracleBackend(
            OracleScript(
                [
                    rule(
                        json_block({"score": 5, "matched_excerpt": "", "rationale": ""}),
                        role="judge",
                        contains="prop one",
                    )
                ]
            )
        ),
        limiter=make_limiter(),
    )
    rows = phase_b_score(
        [_manual_record("t1"), _manual_record("t2", status="failed")], truths, gateway
    )
    assert rows == [("t1", 1.0), ("t2", None)]


def test_phase_b_all_failed_empty_supervised_set():
    truths = {"t1": SalesTruth(("p",))}
    gateway = Gateway(OracleBackend(OracleScript([])), limiter=make_limiter())
    rows = phase_b_score([_manual_record("t1", status="failed")], truths, gateway)
    assert rows == [("t1", None)]


def test_phase_b_judge_failure_marks_sample_failed():
    truths = {"t1": SalesTruth(("p",))}
    gateway = Gateway(OracleBackend(OracleScript([])), limiter=make_limiter())
    rows = phase_b_score([_manual_record("t1")], truths, gateway)
    assert rows == [("t1", None)]


# -- phase C ------------------------------------------------------------------


def _phase_c_memory():
    memory = MemoryState()
    memory.upsert_rule(RULE_CONDITION, RULE_ACTION, batch=0, support=0, contradiction=0)
    return memory


def test_phase_c_support_contradiction_arithmetic():
    memory = _phase_c_memory()
    truths = {f"r{i}": SalesTruth((f"prop {i}",)) for i in range(4)}
    records = [_manual_record(f"r{i}", active_keys=[RULE_KEY]) for i in range(4)]
    scores = {f"r{i}": 1.0 for i in range(4)}
    rules = [
        rule(json_block({"covered": False}), role="judge", contains="prop 3"),
        rule(json_block({"covered": True}), role="judge", contains="Did the tree cover"),
        rule("garbage proposals", role="consolidator"),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    diffs = phase_c_rule_update(
        records, scores, truths, memory, gateway=gateway, batch_index=1
    )
    learned = memory.rules[0]
    assert (learned.support, learned.contradiction) == (3, 1)
    assert learned.weight == 0.75
    # proposal reply was unparseable: evidence still applied, proposals skipped
    assert diffs["rules_added"] == []
    assert diffs["rules_evidence"] == [
        {
            "canonical_key": RULE_KEY,
            "supporting_sample_ids": ["r0", "r1", "r2"],
            "contradicting_sample_ids": ["r3"],
        }
    ]


def test_phase_c_duplicate_proposals_merge_with_summed_counts():
    memory = MemoryState()
    truths = {"r0": SalesTruth(("prop 0",))}
    records = [_manual_record("r0")]
    proposals = [
        {"op": "add", "condition": "WHEN shipping is slow", "action": "ADD a question that COVERS logistics"},
        {"op": "add", "condition": "WHEN shipping is SLOW!", "action": "ADD a question that COVERS logistics"},
    ]
    rules = [
        rule(json_block({"covered": True}), role="judge"),
        rule(json_block({"proposals": proposals}), role="consolidator"),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    phase_c_rule_update(records, {"r0": 1.0}, truths, memory, gateway=gateway, batch_index=0)
    assert len(memory.rules) == 1
    assert memory.rules[0].support == 2


def test_phase_c_add_plus_remove_nets_zero():
    memory = _phase_c_memory()
    assert len(memory.rules) == 1
    truths = {"r0": SalesTruth(("prop 0",))}
    records = [_manual_record("r0")]
    proposals = [
        {"op": "add", "condition": "WHEN margins shrink", "action": "ADD a question that COVERS pricing"},
        {"op": "remove", "condition": RULE_CONDITION, "action": RULE_ACTION},
    ]
    rules = [
        rule(json_block({"covered": True}), role="judge"),
        rule(json_block({"proposals": proposals}), role="consolidator"),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    diffs = phase_c_rule_update(records, {"r0": 1.0}, truths, memory, gateway=gateway, batch_index=0)
    assert len(memory.rules) == 1
    assert memory.rules[0].condition_pattern == "WHEN margins shrink"
    assert diffs["rules_removed"] == [RULE_KEY]


def test_phase_c_reinforce_and_unknown_ops():
    memory = _phase_c_memory()
    truths = {"r0": SalesTruth(("prop 0",))}
    records = [_manual_record("r0")]
    proposals = [
        {"op": "reinforce", "condition": RULE_CONDITION, "action": RULE_ACTION},
        {"op": "reinforce", "condition": "WHEN never seen", "action": "ADD nothing"},
        {"op": "remove", "condition": "WHEN never seen", "action": "ADD nothing"},
    ]
    rules = [
        rule(json_block({"covered": True}), role="judge"),
        rule(json_block({"proposals": proposals}), role="consolidator"),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    phase_c_rule_update(records, {"r0": 1.0}, truths, memory, gateway=gateway, batch_index=0)
    assert memory.rules[0].support == 1
    assert len(memory.rules) == 1


def test_phase_c_tie_gives_no_evidence():
    memory = _phase_c_memory()
    truths = {"r0": SalesTruth(("prop a", "prop b"))}
    records = [_manual_record("r0", active_keys=[RULE_KEY])]
    rules = [
        rule(json_block({"covered": True}), role="judge", contains="prop a"),
        rule(json_block({"covered": False}), role="judge", contains="prop b"),
        rule(json_block({"proposals": []}), role="consolidator"),
    ]
    gateway = Gateway(OracleBackend(OracleScript(rules)), limiter=make_limiter())
    phase_c_rule_update(records, {"r0": 0.5}, truths, memory, gateway=gateway, batch_index=0)
    assert (memory.rules[0].support, memory.rules[0].contradiction) == (0, 0)


def test_phase_c_empty_supervised_set_no_calls():
    memory = _phase_c_memory()
    gateway = Gateway(OracleBackend(OracleScript([])), limiter=make_limiter())
    diffs = phase_c_rule_update(
        [_manual_record("r0", status="failed")], {"r0": None}, {}, memory,
        gateway=gateway, batch_index=0,
    )
    assert gateway.call_count() == 0
    assert diffs["rules_added"] == []


# -- inference ------------------------------------------------------------------


def _inference_rules():
    return [
        rule(json_block(["generic question"]), role="decomposer"),
        rule(_answer("generic answer"), role="solver"),
        rule(json_block({"answer": "generic output"}), role="synthesizer"),
        rule(json_block([0]), role="consolidator", contains="Select the numbers"),
        rule(
            json_block({"insights": ["tempting new note"], "next_query": None}),
            role="explorer",
        ),
    ]


def test_inference_requires_frozen_memory(tmp_path):
    dataset = _training_dataset()
    with pytest.raises(TrainingError, match="frozen"):
        run_inference(
            dataset,
            MemoryState(),
            _training_budgets(),
            backend=OracleBackend(OracleScript(_inference_rules())),
            web_client=WebClient(SimWebBackend(sim_docs_basic())),
        )


def test_inference_120_samples_yield_120_records():
    samples = tuple(
        _sales_sample(f"e{i:03d}", f"Entity {i}", f"prop {i}") for i in range(120)
    )
    dataset = Dataset(samples=samples, task_kind="sales")
    memory = MemoryState()
    memory.freeze()
    records = run_inference(
        dataset,
        memory,
        _training_budgets(exploration=0),
        backend=OracleBackend(OracleScript(_inference_rules())),
        web_client=WebClient(SimWebBackend(sim_docs_basic())),
        workers=8,
        node_workers=1,
    )
    assert len(records) == 120
    assert all(r.ok for r in records)
    assert [r.sample_id for r in records] == sorted(s.id for s in samples)


def test_inference_discards_exploration_and_keeps_memory_equal(tmp_path):
    memory = MemoryState()
    memory.add_craft_entries([CraftEntry("solo note", "sales", 0, "consolidation")])
    memory.freeze()
    before_craft = [e.text for e in memory.craft.entries]
    records = run_inference(
        _training_dataset(),
        memory,
        _training_budgets(exploration=2),
        backend=OracleBackend(OracleScript(_inference_rules())),
        web_client=WebClient(SimWebBackend(sim_docs_basic())),
        workers=1,
        node_workers=1,
        run_dir=tmp_path / "infer",
    )
    assert all(r.ok for r in records)
    assert all(r.new_craft_entries == [] for r in records)
    assert [e.text for e in memory.craft.entries] == before_craft
    assert (tmp_path / "infer" / "records" / "t1.json").exists()


def test_records_roundtrip(tmp_path):
    record = _manual_record("t9")
    write_record(record, tmp_path)
    loaded = load_records(tmp_path)
    assert len(loaded) == 1
    assert loaded[0] == record
