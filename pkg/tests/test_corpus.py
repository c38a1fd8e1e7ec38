import json
import random
from datetime import date

import pytest
from dateutil.relativedelta import relativedelta

from webquest.corpus import (
    DatasetError,
    cutoff_for_sample,
    load_dataset,
    normalize_entity,
    save_dataset,
    split_seeded,
    subtract_months,
)

from .conftest import make_dataset, make_sample


def _write_records(path, records):
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


def _record(i, **overrides):
    record = {
        "id": f"s{i}",
        "task_kind": "sales",
        "input_context": f"Seller {i} sells gadgets to Buyer {i}.",
        "reference_date": "2023-09-15",
        "entity_keys": [f"Seller {i}", f"Buyer {i}"],
        "ground_truth": {"value_propositions": [f"prop {i}"]},
    }
    record.update(overrides)
    return record


def test_load_three_valid_records(tmp_path):
    path = tmp_path / "data.jsonl"
    _write_records(path, [_record(i) for i in range(3)])
    dataset = load_dataset(path, "sales")
    assert len(dataset) == 3
    assert [s.id for s in dataset.samples] == ["s0", "s1", "s2"]
    assert dataset.samples[0].entity_keys == ("seller 0", "buyer 0")


def test_load_missing_reference_date_names_line(tmp_path):
    path = tmp_path / "data.jsonl"
    bad = _record(1)
    del bad["reference_date"]
    _write_records(path, [_record(0), bad])
    with pytest.raises(DatasetError, match=":2:"):
        load_dataset(path, "sales")


def test_load_duplicate_id_rejected(tmp_path):
    path = tmp_path / "data.jsonl"
    _write_records(path, [_record(0), _record(0)])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(path, "sales")


def test_load_invalid_json_names_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text(json.dumps(_record(0)) + "\n{oops\n", encoding="utf-8")
    with pytest.raises(DatasetError, match=":2:"):
        load_dataset(path, "sales")


def test_sales_truth_requires_a_proposition(tmp_path):
    path = tmp_path / "data.jsonl"
    _write_records(path, [_record(0, ground_truth={"value_propositions": []})])
    with pytest.raises(DatasetError):
        load_dataset(path, "sales")


def test_split_180_seed_42_gives_60_120(tmp_path):
    path = tmp_path / "data.jsonl"
    _write_records(path, [_record(i) for i in range(180)])
    dataset = load_dataset(path, "sales")
    train, test = split_seeded(dataset, seed=42, train_count=60)
    assert len(train) == 60
    assert len(test) == 120
    train_ids = {s.id for s in train.samples}
    test_ids = {s.id for s in test.samples}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {s.id for s in dataset.samples}


def test_split_deterministic_and_order_independent():
    samples = [make_sample(f"s{i}") for i in range(5)]
    dataset = make_dataset(samples)
    first = split_seeded(dataset, seed=7, train_count=2)
    second = split_seeded(dataset, seed=7, train_count=2)
    assert [s.id for s in first[0].samples] == [s.id for s in second[0].samples]
    assert [s.id for s in first[1].samples] == [s.id for s in second[1].samples]

    shuffled = make_dataset(list(reversed(samples)))
    third = split_seeded(shuffled, seed=7, train_count=2)
    assert [s.id for s in third[0].samples] == [s.id for s in first[0].samples]


def test_split_zero_train_count():
    dataset = make_dataset([make_sample(f"s{i}") for i in range(4)])
    train, test = split_seeded(dataset, seed=1, train_count=0)
    assert len(train) == 0
    assert len(test) == 4


def test_split_train_count_out_of_bounds():
    dataset = make_dataset([make_sample("s0")])
    with pytest.raises(DatasetError):
        split_seeded(dataset, seed=1, train_count=2)


def test_cutoff_sales_six_months():
    sample = make_sample(reference_date=date(2023, 9, 15))
    assert cutoff_for_sample(sample) == date(2023, 3, 15)


def test_cutoff_legal_twenty_four_months():
    sample = make_sample("l1", task_kind="legal", reference_date=date(2016, 6, 30))
    assert cutoff_for_sample(sample) == date(2014, 6, 30)


def test_cutoff_clamps_day_of_month():
    # Independently checked against dateutil's month arithmetic below.
    sample = make_sample(reference_date=date(2023, 3, 31))
    assert cutoff_for_sample(sample) == date(2022, 9, 30)


def test_month_subtraction_matches_dateutil():
    rng = random.Random(42)
    for _ in range(300):
        day = date(2000, 1, 1) + relativedelta(days=rng.randrange(0, 9000))
        months = rng.randrange(0, 40)
        assert subtract_months(day, months) == day - relativedelta(months=months)


def test_cutoff_always_before_reference():
    rng = random.Random(7)
    for _ in range(200):
        day = date(2005, 1, 1) + relativedelta(days=rng.randrange(0, 7000))
        kind = rng.choice(["sales", "legal"])
        sample = make_sample("x", task_kind=kind, reference_date=day, with_truth=False)
        assert cutoff_for_sample(sample) < sample.reference_date


def test_dataset_roundtrip(tmp_path):
    dataset = make_dataset(
        [make_sample("a"), make_sample("b", with_truth=False)], task_kind="sales"
    )
    path = tmp_path / "out.jsonl"
    save_dataset(dataset, path)
    reloaded = load_dataset(path, "sales")
    assert reloaded == dataset


def test_normalize_entity():
    assert normalize_entity("  Acme   Corp \n") == "acme corp"
