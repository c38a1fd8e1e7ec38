"""Task datasets: loading, seeded splits, and per-sample retrieval cutoffs.

Datasets are line-delimited JSON (one sample per line) so that batch phases
can stream samples independently. Every piece of web retrieval performed for
a sample is gated by :func:`cutoff_for_sample`, which backdates the sample's
reference date by six calendar months for sales tasks and twenty-four for
legal tasks. Pages dated exactly on the cutoff are allowed; the strictness of
the boundary lives in the web layer, which never returns anything *after*
the cutoff.
"""

from __future__ import annotations

import calendar
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Optional, Union

SALES = "sales"
LEGAL = "legal"
TASK_KINDS = (SALES, LEGAL)

# Calendar months subtracted from the reference date to form the retrieval cutoff.
CUTOFF_MONTHS = {SALES: 6, LEGAL: 24}
# Look-back window (months before the cutoff) that searches may reach into.
RECENCY_WINDOW_MONTHS = {SALES: 6, LEGAL: 60}

_WHITESPACE = re.compile(r"\s+")


class DatasetError(ValueError):
    """Malformed dataset file or violated dataset invariant."""


def normalize_entity(name: str) -> str:
    """Lower-case and whitespace-collapse an entity name.

    This is the single normalization used for sample entity keys and for the
    keys of the domain store, so exact-match retrieval between the two is
    well defined.
    """
    return _WHITESPACE.sub(" ", name.strip().lower())


@dataclass(frozen=True)
class SalesTruth:
    """Ground truth for a sales sample: the winning value propositions."""

    value_propositions: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.value_propositions:
            raise DatasetError("sales ground truth needs at least one value proposition")

    def to_json(self) -> dict:
        return {"value_propositions": list(self.value_propositions)}


@dataclass(frozen=True)
class LegalTruth:
    """Ground truth for a legal sample: winner and disposition."""

    winning_party: str
    disposition: str = ""

    def __post_init__(self) -> None:
        if not self.winning_party.strip():
            raise DatasetError("legal ground truth needs a winning party")

    def to_json(self) -> dict:
        return {"winning_party": self.winning_party, "disposition": self.disposition}


GroundTruth = Union[SalesTruth, LegalTruth]


@dataclass(frozen=True)
class Sample:
    """One task instance: input context, optional ground truth, reference date."""

    id: str
    task_kind: str
    input_context: str
    reference_date: date
    entity_keys: tuple[str, ...] = ()
    ground_truth: Optional[GroundTruth] = None

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise DatasetError(f"sample {self.id!r}: unknown task_kind {self.task_kind!r}")
        if not isinstance(self.reference_date, date):
            raise DatasetError(f"sample {self.id!r}: reference_date must be a date")
        if self.ground_truth is not None:
            expected = SalesTruth if self.task_kind == SALES else LegalTruth
            if not isinstance(self.ground_truth, expected):
                raise DatasetError(
                    f"sample {self.id!r}: ground truth type does not match task_kind"
                )

    def to_json(self) -> dict:
        record = {
            "id": self.id,
            "task_kind": self.task_kind,
            "input_context": self.input_context,
            "reference_date": self.reference_date.isoformat(),
            "entity_keys": list(self.entity_keys),
        }
        if self.ground_truth is not None:
            record["ground_truth"] = self.ground_truth.to_json()
        return record


def _parse_truth(task_kind: str, payload: dict) -> GroundTruth:
    if task_kind == SALES:
        props = payload.get("value_propositions")
        if not isinstance(props, list) or not all(isinstance(p, str) for p in props):
            raise DatasetError("ground_truth.value_propositions must be a list of strings")
        return SalesTruth(tuple(props))
    winner = payload.get("winning_party")
    if not isinstance(winner, str):
        raise DatasetError("ground_truth.winning_party must be a string")
    return LegalTruth(winner, str(payload.get("disposition", "")))


def sample_from_json(record: dict, expected_kind: Optional[str] = None) -> Sample:
    """Build a validated :class:`Sample` from one decoded JSON record."""
    try:
        sample_id = record["id"]
        task_kind = record["task_kind"]
        context = record["input_context"]
        raw_date = record["reference_date"]
    except KeyError as exc:
        raise DatasetError(f"missing field {exc.args[0]!r}") from exc
    if expected_kind is not None and task_kind != expected_kind:
        raise DatasetError(f"sample {sample_id!r}: task_kind {task_kind!r} != {expected_kind!r}")
    try:
        ref = date.fromisoformat(raw_date)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"sample {sample_id!r}: bad reference_date {raw_date!r}") from exc
    keys = tuple(normalize_entity(k) for k in record.get("entity_keys", []) if k.strip())
    truth = None
    if record.get("ground_truth") is not None:
        truth = _parse_truth(task_kind, record["ground_truth"])
    return Sample(
        id=str(sample_id),
        task_kind=task_kind,
        input_context=str(context),
        reference_date=ref,
        entity_keys=keys,
        ground_truth=truth,
    )


@dataclass(frozen=True)
class Dataset:
    """An ordered, homogeneous collection of samples."""

    samples: tuple[Sample, ...]
    task_kind: str
    split_seed: int = 0
    train_count: int = 0
    test_count: int = 0

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for sample in self.samples:
            if sample.id in seen:
                raise DatasetError(f"duplicate sample id {sample.id!r}")
            seen.add(sample.id)
            if sample.task_kind != self.task_kind:
                raise DatasetError(
                    f"sample {sample.id!r} has task_kind {sample.task_kind!r}, "
                    f"dataset is {self.task_kind!r}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self, sample_id: str) -> Sample:
        for sample in self.samples:
            if sample.id == sample_id:
                return sample
        raise KeyError(sample_id)


def load_dataset(path: Union[str, Path], task_kind: str) -> Dataset:
    """Load a line-delimited JSON dataset, validating every record.

    Raises :class:`DatasetError` naming the offending line on any malformed
    record, and on duplicate ids once the whole file has been read.
    """
    if task_kind not in TASK_KINDS:
        raise DatasetError(f"unknown task_kind {task_kind!r}")
    path = Path(path)
    samples: list[Sample] = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            try:
                samples.append(sample_from_json(record, expected_kind=task_kind))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return Dataset(samples=tuple(samples), task_kind=task_kind)


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for sample in dataset.samples:
            handle.write(json.dumps(sample.to_json(), ensure_ascii=False) + "\n")


def require_ground_truth(dataset: Dataset) -> None:
    """Assert every sample carries ground truth (a training-set precondition)."""
    missing = [s.id for s in dataset.samples if s.ground_truth is None]
    if missing:
        raise DatasetError(f"samples without ground truth: {', '.join(missing)}")


def _split_rank(seed: int, sample_id: str) -> str:
    # Stable across platforms and Python versions, and a pure function of
    # (seed, id) so partition membership never depends on file order.
    return hashlib.sha256(f"{seed}:{sample_id}".encode("utf-8")).hexdigest()


def split_seeded(dataset: Dataset, seed: int, train_count: int) -> tuple[Dataset, Dataset]:
    """Deterministically partition a dataset into (train, test).

    The shuffle is keyed only by the seed and the sample ids; identical
    inputs always yield identical partitions.
    """
    if train_count < 0 or train_count > len(dataset):
        raise DatasetError(
            f"train_count {train_count} out of range for dataset of {len(dataset)}"
        )
    by_id = {s.id: s for s in dataset.samples}
    order = sorted(by_id, key=lambda sid: (_split_rank(seed, sid), sid))
    train_ids = order[:train_count]
    test_ids = order[train_count:]
    meta = {
        "task_kind": dataset.task_kind,
        "split_seed": seed,
        "train_count": train_count,
        "test_count": len(dataset) - train_count,
    }
    train = Dataset(samples=tuple(by_id[i] for i in train_ids), **meta)
    test = Dataset(samples=tuple(by_id[i] for i in test_ids), **meta)
    return train, test


def subtract_months(day: date, months: int) -> date:
    """Shift a date back by calendar months, clamping to the target month's end."""
    if months < 0:
        raise ValueError("months must be non-negative")
    total = day.year * 12 + (day.month - 1) - months
    year, month = divmod(total, 12)
    month += 1
    last = calendar.monthrange(year, month)[1]
    return date(year, month, min(day.day, last))


def cutoff_for_sample(sample: Sample) -> date:
    """The latest publication date web retrieval may see for this sample."""
    return subtract_months(sample.reference_date, CUTOFF_MONTHS[sample.task_kind])
