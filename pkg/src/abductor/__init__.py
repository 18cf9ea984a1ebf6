"""Obstacle-driven reasoning over long narratives, with trace auditing and evaluation."""

from .backend import HttpProvider, MockProvider, ModelClient, ModelRequest, ModelResponse, ResponseCache, cost_summary
from .dataset import CaseSpec, adapt_qa, load_case, load_corpus
from .embeddings import HashEmbedder
from .evaluation import MatchConfig, greedy_match, normalized_cost, reliability_audit, score_case, score_qa
from .fusion import FusionOutput, fuse
from .qsr import RunResult, TerminationReason, run, should_gate
from .state import ReasoningState, RunConfig, Task, TraceRecord, Variant, enrich, new_state

__version__ = "0.1.0"

__all__ = [
    "CaseSpec",
    "FusionOutput",
    "HashEmbedder",
    "HttpProvider",
    "MatchConfig",
    "MockProvider",
    "ModelClient",
    "ModelRequest",
    "ModelResponse",
    "ReasoningState",
    "ResponseCache",
    "RunConfig",
    "RunResult",
    "Task",
    "TerminationReason",
    "TraceRecord",
    "Variant",
    "adapt_qa",
    "cost_summary",
    "enrich",
    "fuse",
    "greedy_match",
    "load_case",
    "load_corpus",
    "new_state",
    "normalized_cost",
    "reliability_audit",
    "run",
    "score_case",
    "score_qa",
    "should_gate",
]
