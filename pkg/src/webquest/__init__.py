"""Budgeted question-tree web research with cross-session memory.

Within a session, a task is decomposed into waves of sub-questions solved by
step-capped tool agents over date-gated web search; across sessions, a batch
update loop accumulates procedural and declarative memory stores that are
injected back into future runs, with no model weight updates anywhere.
"""

__version__ = "0.1.0"

from .aet import Budgets, RunRecord, run_sample
from .corpus import Dataset, Sample, cutoff_for_sample, load_dataset, split_seeded
from .gateway import CompletionRequest, CompletionResult, Gateway
from .judge import bootstrap_ci, score_legal, score_sales
from .learning import TrainingConfig, run_inference, run_training
from .memory import MemoryState, load, persist
from .webtools import WebClient

__all__ = [
    "Budgets",
    "CompletionRequest",
    "CompletionResult",
    "Dataset",
    "Gateway",
    "MemoryState",
    "RunRecord",
    "Sample",
    "TrainingConfig",
    "WebClient",
    "bootstrap_ci",
    "cutoff_for_sample",
    "load",
    "load_dataset",
    "persist",
    "run_inference",
    "run_sample",
    "run_training",
    "score_legal",
    "score_sales",
    "split_seeded",
]
