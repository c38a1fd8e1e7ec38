"""Shared fixtures: sample factories, scripted oracles, tiny sim corpora."""

from __future__ import annotations

import json
from datetime import date
from pathlib import Path

import pytest

from webquest.corpus import Dataset, LegalTruth, Sample, SalesTruth
from webquest.gateway import Gateway, make_limiter
from webquest.simenv import OracleBackend, OracleRule, OracleScript, SimDoc

REPO_ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = REPO_ROOT / "scenarios" / "learning_pays_off"


def json_block(value) -> str:
    return f"```json\n{json.dumps(value)}\n```"


def make_sample(
    sample_id: str = "s1",
    task_kind: str = "sales",
    input_context: str = "Acme Corp sells RoboWeld arms to Volt Motors.",
    reference_date: date = date(2023, 9, 15),
    entity_keys: tuple[str, ...] = ("acme corp", "volt motors"),
    ground_truth=None,
    with_truth: bool = True,
) -> Sample:
    if ground_truth is None and with_truth:
        if task_kind == "sales":
            ground_truth = SalesTruth(("RoboWeld cut weld defects by 40 percent",))
        else:
            ground_truth = LegalTruth("petitioner", "reversed")
    return Sample(
        id=sample_id,
        task_kind=task_kind,
        input_context=input_context,
        reference_date=reference_date,
        entity_keys=entity_keys,
        ground_truth=ground_truth,
    )


def make_dataset(samples, task_kind="sales") -> Dataset:
    return Dataset(samples=tuple(samples), task_kind=task_kind)


def oracle_gateway(rules, **gateway_kwargs):
    """A gateway over a scripted oracle; returns (gateway, backend)."""
    backend = OracleBackend(OracleScript(list(rules)))
    gateway = Gateway(backend, limiter=make_limiter(), **gateway_kwargs)
    return gateway, backend


def rule(response, *, role=None, contains=(), pattern=None, once=False, name=""):
    if isinstance(contains, str):
        contains = (contains,)
    return OracleRule(
        response=response,
        role=role,
        contains=tuple(contains),
        pattern=pattern,
        once=once,
        name=name,
    )


def sim_docs_basic(base: date = date(2023, 1, 10)) -> list[SimDoc]:
    return [
        SimDoc(
            url="https://example.com/a",
            title="Volt Motors welding line report",
            body="Volt Motors struggled with weld defects on its assembly line.",
            published=base,
            keywords=("volt", "welding"),
        ),
        SimDoc(
            url="https://example.com/b",
            title="RoboWeld product overview",
            body="RoboWeld arms automate welding with adaptive seam tracking.",
            published=base,
            keywords=("roboweld", "welding"),
        ),
        SimDoc(
            url="https://example.com/c",
            title="Industry welding methodology guide",
            body="How analysts research welding automation deals and value propositions.",
            published=base,
            keywords=("methodology", "research", "welding"),
        ),
    ]


@pytest.fixture
def sales_sample() -> Sample:
    return make_sample()


@pytest.fixture
def legal_sample() -> Sample:
    return make_sample(
        sample_id="l1",
        task_kind="legal",
        input_context="The employee sued the employer over dismissal terms.",
        reference_date=date(2016, 6, 30),
        entity_keys=("the employee", "the employer"),
    )
