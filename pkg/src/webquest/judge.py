"""Evaluation: rubric scoring, binary verdicts, bootstrap CIs, efficiency.

Sales outputs are graded per ground-truth value proposition on a 0-5
effectiveness scale by a persona-prompted judge, one call per proposition;
the per-sample score normalizes the point sum by five times the point count.
Legal outputs get a single binary correct/incorrect verdict. Confidence
intervals come from a seeded non-parametric bootstrap over per-sample scores,
and efficiency reports aggregate the interaction counters recorded on run
records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .aet import RunRecord
from .gateway import (
    CompletionRequest,
    Gateway,
    GatewayError,
    JUDGE_TEMPERATURE,
    ResponseSchema,
)

logger = logging.getLogger(__name__)

RUBRIC_MIN = 0
RUBRIC_MAX = 5


class JudgeError(Exception):
    """A sample could not be scored."""


@dataclass
class RubricScore:
    gt_point_id: str
    matched_candidate_excerpt: str
    score: int
    rationale: str

    def __post_init__(self) -> None:
        if not RUBRIC_MIN <= self.score <= RUBRIC_MAX:
            raise JudgeError(f"score {self.score} outside [{RUBRIC_MIN}, {RUBRIC_MAX}]")


@dataclass
class Judgment:
    sample_id: str
    normalized: float
    per_point: list[RubricScore] = field(default_factory=list)
    verdict: Optional[bool] = None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "normalized": self.normalized,
            "verdict": self.verdict,
            "per_point": [
                {
                    "gt_point_id": p.gt_point_id,
                    "matched_candidate_excerpt": p.matched_candidate_excerpt,
                    "score": p.score,
                    "rationale": p.rationale,
                }
                for p in self.per_point
            ],
        }


SALES_JUDGE_SYSTEM = (
    "You are a Senior Sales Enablement Evaluator. You are grading on Sales "
    "Effectiveness and Factual Precision.\n\n"
    "You will see one ground-truth pitch point and a candidate pitch. Select "
    "the best-matching candidate point and grade how well it recovers the "
    "ground-truth point on this 0-5 scale:\n"
    "  0 (Miss / Irrelevant): the concept is absent entirely.\n"
    "  1 (Marketing Fluff): the topic is gestured at with generic platitudes "
    "and no substance.\n"
    "  2 (Topic Match): right product or pain point, but the specific solution "
    "or outcome is missing.\n"
    "  3 (Implied / Soft Match): the core value proposition is right but the "
    "hero evidence (numbers, names, unique mechanisms) is absent.\n"
    "  4 (Strong Sales Argument): core value plus the key mechanism or outcome; "
    "persuasive and accurate, minor details may be missing.\n"
    "  5 (Strategic Bullseye): product, pain, value, and the specific "
    "metric/evidence are all recovered essentially verbatim.\n\n"
    'Reply as fenced json: {"score": 0-5, "matched_excerpt": "...", '
    '"rationale": "..."}.'
)

_SALES_SCHEMA = ResponseSchema(
    "rubric-score",
    {
        "type": "object",
        "properties": {
            "score": {"type": "integer", "minimum": RUBRIC_MIN, "maximum": RUBRIC_MAX},
            "matched_excerpt": {"type": "string"},
            "rationale": {"type": "string"},
        },
        "required": ["score"],
    },
)

LEGAL_JUDGE_SYSTEM = (
    "You judge outcome predictions for adjudicated disputes. Compare the "
    "candidate's predicted winning party with the actual winner and decide "
    "whether the prediction names the same prevailing side, tolerating "
    "paraphrases such as party roles. Reply as fenced json: "
    '{"verdict": "correct" or "incorrect", "rationale": "..."}.'
)

_LEGAL_SCHEMA = ResponseSchema(
    "binary-verdict",
    {
        "type": "object",
        "properties": {
            "verdict": {"enum": ["correct", "incorrect"]},
            "rationale": {"type": "string"},
        },
        "required": ["verdict"],
    },
)


def normalized_sales_score(scores: Sequence[int]) -> float:
    """Sum of per-point scores over five times the point count."""
    if not scores:
        raise JudgeError("cannot normalize an empty score vector")
    for value in scores:
        if not RUBRIC_MIN <= value <= RUBRIC_MAX:
            raise JudgeError(f"score {value} outside rubric range")
    return sum(scores) / (RUBRIC_MAX * len(scores))


def score_sales(
    candidate: str,
    gt_points: Sequence[str],
    gateway: Gateway,
    *,
    sample_id: str = "",
) -> Judgment:
    """Grade a candidate pitch against each ground-truth point (one call each)."""
    if not gt_points:
        raise JudgeError("sales scoring needs at least one ground-truth point")
    per_point = []
    for i, point in enumerate(gt_points):
        user = (
            f"Ground-truth pitch point #{i + 1}:\n{point}\n\n"
            f"Candidate pitch:\n{candidate}\n\n"
            "Grade the candidate's best match for this point."
        )
        try:
            result = gateway.complete(
                CompletionRequest(
                    role_tag="judge",
                    system_text=SALES_JUDGE_SYSTEM,
                    user_text=user,
                    temperature=JUDGE_TEMPERATURE,
                    structured_schema=_SALES_SCHEMA,
                )
            )
        except GatewayError as exc:
            raise JudgeError(f"{sample_id}: point {i + 1} unscorable: {exc}") from exc
        per_point.append(
            RubricScore(
                gt_point_id=f"{sample_id or 'sample'}#gt{i + 1}",
                matched_candidate_excerpt=str(result.parsed.get("matched_excerpt", "")),
                score=int(result.parsed["score"]),
                rationale=str(result.parsed.get("rationale", "")),
            )
        )
    normalized = normalized_sales_score([p.score for p in per_point])
    return Judgment(sample_id=sample_id, normalized=normalized, per_point=per_point)


def score_legal(
    candidate: str,
    gt_winner: str,
    gateway: Gateway,
    *,
    sample_id: str = "",
) -> Judgment:
    """Binary win-prediction verdict for a legal answer."""
    if not candidate.strip():
        raise JudgeError("candidate answer is empty; it must name a party")
    user = (
        f"Actual winning party:\n{gt_winner}\n\n"
        f"Candidate prediction:\n{candidate}\n\n"
        "Is the predicted winning party correct?"
    )
    try:
        result = gateway.complete(
            CompletionRequest(
                role_tag="judge",
                system_text=LEGAL_JUDGE_SYSTEM,
                user_text=user,
                temperature=JUDGE_TEMPERATURE,
                structured_schema=_LEGAL_SCHEMA,
            )
        )
    except GatewayError as exc:
        raise JudgeError(f"{sample_id}: verdict unobtainable: {exc}") from exc
    correct = result.parsed["verdict"] == "correct"
    return Judgment(sample_id=sample_id, normalized=1.0 if correct else 0.0, verdict=correct)


def bootstrap_ci(
    scores: Sequence[float], iterations: int = 1000, seed: int = 0
) -> tuple[float, float, float]:
    """Non-parametric bootstrap CI for the mean of per-sample scores.

    Resamples with replacement ``iterations`` times; the bounds are the 2.5th
    and 97.5th percentiles of the resampled means, with linear interpolation
    between closest ranks. Deterministic given the seed.
    """
    if len(scores) == 0:
        raise ValueError("scores must be non-empty")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    values = np.asarray(scores, dtype=float)
    rng = np.random.default_rng(seed)
    n = len(values)
    means = np.empty(iterations, dtype=float)
    for i in range(iterations):
        means[i] = values[rng.integers(0, n, size=n)].mean()
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float(values.mean()), float(lo), float(hi)


@dataclass
class EfficiencyReport:
    """Per-sample interaction metrics plus their arithmetic means."""

    task_kind: str
    included_sample_ids: list[str]
    failed_sample_ids: list[str]
    per_sample: dict[str, dict]
    averages: dict[str, float]

    @property
    def sample_count(self) -> int:
        return len(self.included_sample_ids)

    def to_json(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "included_sample_ids": list(self.included_sample_ids),
            "failed_sample_ids": list(self.failed_sample_ids),
            "per_sample": self.per_sample,
            "averages": self.averages,
        }


_METRIC_LABELS = [
    ("questions_per_sample", "Avg. Questions / Sample"),
    ("agent_steps_per_question", "Avg. Agent Steps / Question"),
    ("scratchpad_chars", "Avg. Scratchpad Size (chars)"),
    ("search_queries", "Avg. Search Queries / Sample"),
    ("unique_result_urls", "Avg. Unique Result URLs"),
    ("repeated_result_urls", "Avg. Repeated Result URLs"),
    ("unique_scraped_urls", "Avg. Unique URLs Scraped"),
    ("repeated_scraped_urls", "Avg. Repeated URLs Scraped"),
    ("llm_calls", "Avg. LLM Calls"),
    ("wall_time_seconds", "Avg. Time per Sample (s)"),
]


def _record_metrics(record: RunRecord) -> dict:
    counters = record.counters
    questions = record.questions_used
    return {
        "questions_per_sample": float(questions),
        "agent_steps_per_question": (
            record.agent_steps_total / questions if questions else 0.0
        ),
        "scratchpad_chars": float(record.scratchpad_chars),
        "search_queries": float(counters.get("search_queries", 0)),
        "unique_result_urls": float(counters.get("unique_result_urls", 0)),
        "repeated_result_urls": float(counters.get("repeated_result_urls", 0)),
        "unique_scraped_urls": float(counters.get("unique_scraped_urls", 0)),
        "repeated_scraped_urls": float(counters.get("repeated_scraped_urls", 0)),
        "llm_calls": float(record.llm_calls),
        "wall_time_seconds": float(record.wall_time_seconds),
    }


def aggregate_efficiency(records: Sequence[RunRecord]) -> EfficiencyReport:
    """Average the interaction metrics over successful runs.

    Failed runs are excluded from the means but disclosed in the report; an
    empty record list yields an explicitly empty report with no averages.
    """
    kinds = {record.task_kind for record in records}
    if len(kinds) > 1:
        raise ValueError(f"records span multiple task kinds: {sorted(kinds)}")
    task_kind = kinds.pop() if kinds else ""
    included = [r for r in records if r.ok]
    failed = [r for r in records if not r.ok]
    per_sample = {r.sample_id: _record_metrics(r) for r in included}
    averages: dict[str, float] = {}
    if per_sample:
        for key, _ in _METRIC_LABELS:
            averages[key] = sum(m[key] for m in per_sample.values()) / len(per_sample)
    return EfficiencyReport(
        task_kind=task_kind,
        included_sample_ids=sorted(per_sample),
        failed_sample_ids=sorted(r.sample_id for r in failed),
        per_sample=dict(sorted(per_sample.items())),
        averages=averages,
    )


def render_efficiency_table(report: EfficiencyReport, include_timing: bool = True) -> str:
    """Delimited table over the standard metric set, one metric per row.

    ``include_timing=False`` drops the wall-time row so written reports stay
    byte-identical across reruns.
    """
    lines = [
        f"samples included: {report.sample_count}",
        f"samples failed:   {len(report.failed_sample_ids)}",
    ]
    if not report.averages:
        lines.append("(no successful samples; no averages)")
        return "\n".join(lines)
    rows = [
        (key, label)
        for key, label in _METRIC_LABELS
        if include_timing or key != "wall_time_seconds"
    ]
    width = max(len(label) for _, label in rows)
    for key, label in rows:
        lines.append(f"{label:<{width}} | {report.averages[key]:.2f}")
    return "\n".join(lines)


def render_ci_report(rows: Sequence[tuple[str, float, float, float]]) -> str:
    """Rows of (configuration, mean, lo, hi) as a readable table."""
    lines = ["configuration | mean | ci_lo | ci_hi"]
    for name, mean, lo, hi in rows:
        lines.append(f"{name} | {mean:.4f} | {lo:.4f} | {hi:.4f}")
    return "\n".join(lines)
