"""Scoring: atomic semantic matching, suspect/QA metrics, normalized cost, hypothesis reliability."""

from __future__ import annotations

import logging
import math
import re
import statistics
import string
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .backend import ModelClient, ModelRequest, cost_summary
from .dataset import CaseSpec
from .embeddings import Embedder, similarity_matrix
from .errors import CostError, DatasetValidationError, InputValidationError, ParseError
from .prompts import PromptKind, PromptLibrary
from .qsr import RunResult
from .state import (
    ANSWER,
    MODUS_OPERANDI,
    MOTIVE,
    SUSPECT,
    Conclusion,
    ReasoningState,
    SupportStatus,
    state_from_trace,
)

logger = logging.getLogger(__name__)

DEFAULT_MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class AtomicProposition:
    id: str
    text: str
    source: str  # "Prediction" or "Reference"

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise InputValidationError(f"proposition {self.id} is blank")


@dataclass(frozen=True)
class MatchConfig:
    threshold: float = DEFAULT_MATCH_THRESHOLD

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise InputValidationError(f"threshold {self.threshold} outside [0, 1]")


@dataclass(frozen=True)
class MatchReport:
    pairs: tuple[tuple[str, str, float], ...]
    recall: float
    unmatched_references: tuple[str, ...]


# ---------------------------------------------------------------------------
# Propositions
# ---------------------------------------------------------------------------

_SENTENCE_BREAK = re.compile(r"(?<=[.!?;])\s+")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_BREAK.split(text.strip()) if s.strip()]


def decompose_propositions(
    text: str,
    source: str,
    client: ModelClient | None = None,
    *,
    case_id: str = "",
    prompts: PromptLibrary | None = None,
    prefix: str = "p",
) -> list[AtomicProposition]:
    """Split ``text`` into atomic propositions.

    With a client, one Propositions call does the split and sentence splitting is
    the fallback when its answer cannot be parsed. Without one, sentence splitting is used.
    """
    if not isinstance(text, str) or not text.strip():
        raise InputValidationError("cannot decompose blank text")
    pieces: list[str] | None = None
    if client is not None:
        prompt = (prompts or PromptLibrary()).render(PromptKind.PROPOSITIONS, text=text)
        request = ModelRequest(PromptKind.PROPOSITIONS, prompt, case_id=case_id, discriminator=text)
        try:
            pieces = [p.strip() for p in client.complete(request).parsed["propositions"] if p.strip()]
        except ParseError as exc:
            logger.warning("proposition split fell back to sentences: %s", exc)
    if not pieces:
        pieces = split_sentences(text) or [text.strip()]
    return [AtomicProposition(f"{prefix}{i}", piece, source) for i, piece in enumerate(pieces)]


def as_references(texts: Iterable[str], prefix: str = "r") -> list[AtomicProposition]:
    """Gold references ship pre-decomposed; wrap them without splitting."""
    return [AtomicProposition(f"{prefix}{i}", t, "Reference") for i, t in enumerate(texts)]


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def greedy_match(
    preds: Sequence[AtomicProposition],
    refs: Sequence[AtomicProposition],
    config: MatchConfig = MatchConfig(),
    *,
    similarities: np.ndarray | None = None,
    embedder: Embedder | None = None,
) -> MatchReport:
    """Greedy one-to-one matching.

    Candidate pairs are taken in descending similarity (ties: lower prediction
    index, then lower reference index); a pair is kept when its similarity is
    at least the threshold and neither side is already matched. Not optimal in
    general. Recall is matched references over all references, 1.0 if there are none.
    """
    if similarities is None:
        if embedder is None:
            raise ValueError("greedy_match needs similarities or an embedder")
        similarities = similarity_matrix(embedder, [p.text for p in preds], [r.text for r in refs])
    sims = np.asarray(similarities, dtype=float)
    if sims.shape != (len(preds), len(refs)):
        raise ValueError(f"similarity matrix shape {sims.shape} does not match {len(preds)}x{len(refs)}")

    candidates = sorted(
        ((float(sims[i, j]), i, j) for i in range(len(preds)) for j in range(len(refs)) if sims[i, j] >= config.threshold),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    used_p: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for sim, i, j in candidates:
        if i in used_p or j in used_r:
            continue
        used_p.add(i)
        used_r.add(j)
        pairs.append((preds[i].id, refs[j].id, sim))
    recall = 1.0 if not refs else len(used_r) / len(refs)
    unmatched = tuple(r.id for k, r in enumerate(refs) if k not in used_r)
    return MatchReport(tuple(pairs), recall, unmatched)


# ---------------------------------------------------------------------------
# Case-level metrics
# ---------------------------------------------------------------------------

_HONORIFICS = {"mr", "mrs", "ms", "miss", "mx", "dr", "sir", "madam", "lady", "lord", "prof", "professor", "master"}
_ARTICLES = {"the", "a", "an"}


def normalize_name(name: str) -> str:
    words = re.sub(r"[^\w\s]", " ", name.casefold()).split()
    while words and (words[0] in _HONORIFICS or words[0] in _ARTICLES):
        words = words[1:]
    return " ".join(words)


def score_suspect(prediction: Conclusion, gold: CaseSpec) -> bool:
    if gold.gold_suspect is None:
        raise DatasetValidationError(f"{gold.case_id}: no gold suspect")
    predicted = prediction.per_dimension.get(SUSPECT)
    if not predicted:
        logger.warning("%s: prediction has no Suspect answer; scored incorrect", gold.case_id)
        return False
    names = {normalize_name(n) for n in (gold.gold_suspect.name, *gold.gold_suspect.aliases)}
    names.discard("")
    return normalize_name(predicted) in names


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    suspect_correct: bool
    motive_recall: float
    modus_recall: float
    clue_coverage: float
    cost_tokens: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "suspect_correct": self.suspect_correct,
            "motive_recall": self.motive_recall,
            "modus_recall": self.modus_recall,
            "clue_coverage": self.clue_coverage,
            "cost_tokens": self.cost_tokens,
        }


def explored_texts(state: ReasoningState | None, conclusion: Conclusion) -> list[str]:
    """Everything a run put on record: baseline content, comment notes, hypotheses, and the answer."""
    texts: list[str] = []
    if state is not None:
        for unit, comment in state.baseline.pairs:
            texts.append(unit.event.description)
            texts.extend(a.description for a in unit.attributes)
            if comment.note:
                texts.append(comment.note)
        texts.extend(h.statement for h in state.hypotheses)
    for answer in conclusion.per_dimension.values():
        texts.extend(split_sentences(answer))
    texts.extend(split_sentences(conclusion.rationale))
    seen: set[str] = set()
    return [t for t in texts if t.strip() and not (t in seen or seen.add(t))]


def final_state(result: RunResult) -> ReasoningState | None:
    if result.final_state is not None:
        return result.final_state
    if result.trace and result.trace[0].baseline is not None:
        return state_from_trace(result.trace)
    return None


def _recall(
    answer: str,
    refs: Sequence[str],
    embedder: Embedder,
    config: MatchConfig,
    client: ModelClient | None,
    case_id: str,
) -> float:
    if not answer.strip():
        return 0.0 if refs else 1.0
    preds = decompose_propositions(answer, "Prediction", client, case_id=case_id)
    return greedy_match(preds, as_references(refs), config, embedder=embedder).recall


def score_case(
    result: RunResult,
    gold: CaseSpec,
    config: MatchConfig,
    embedder: Embedder,
    client: ModelClient | None = None,
) -> CaseScore:
    if gold.mode != "DP":
        raise DatasetValidationError(f"{gold.case_id}: score_case needs a DP case")
    for name, value in (
        ("gold.suspect", gold.gold_suspect),
        ("gold.motive", gold.gold_motive_props),
        ("gold.modus", gold.gold_modus_props),
        ("gold.critical_clues", gold.gold_critical_clues),
    ):
        if not value:
            raise DatasetValidationError(f"{gold.case_id}: field {name!r} missing")

    conclusion = result.conclusion
    motive = _recall(conclusion.per_dimension.get(MOTIVE, ""), gold.gold_motive_props, embedder, config, client, gold.case_id)
    modus = _recall(
        conclusion.per_dimension.get(MODUS_OPERANDI, ""), gold.gold_modus_props, embedder, config, client, gold.case_id
    )
    explored = [AtomicProposition(f"x{i}", t, "Prediction") for i, t in enumerate(explored_texts(final_state(result), conclusion))]
    coverage = greedy_match(explored, as_references(gold.gold_critical_clues, "c"), config, embedder=embedder).recall
    return CaseScore(
        case_id=gold.case_id,
        suspect_correct=score_suspect(conclusion, gold),
        motive_recall=motive,
        modus_recall=modus,
        clue_coverage=coverage,
        cost_tokens=cost_summary(result.trace).total_tokens,
    )


_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    text = text.casefold()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = re.sub(r"\b(a|an|the)\b", " ", text)
    return " ".join(text.split())


def support_f1(predicted: Iterable[str], gold: Iterable[str]) -> float:
    predicted, gold = set(predicted), set(gold)
    if not predicted and not gold:
        return 1.0
    overlap = len(predicted & gold)
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def score_qa(
    prediction: str,
    gold_answers: Sequence[str],
    gold_support: Iterable[str] = (),
    predicted_support: Iterable[str] = (),
) -> tuple[bool, float]:
    if not gold_answers:
        raise DatasetValidationError("no gold answers")
    norm = normalize_answer(prediction or "")
    exact = any(norm == normalize_answer(g) for g in gold_answers)
    return exact, support_f1(predicted_support, gold_support)


@dataclass(frozen=True)
class QAScore:
    case_id: str
    exact_match: bool
    support_f1: float
    cost_tokens: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "exact_match": self.exact_match,
            "support_f1": self.support_f1,
            "cost_tokens": self.cost_tokens,
        }


def predicted_support(result: RunResult) -> set[str]:
    """Narrative units behind the evidence the run's hypotheses cite."""
    state = final_state(result)
    if state is None:
        return set()
    sources: dict[str, frozenset[str]] = {}
    for unit, _ in state.baseline.pairs:
        sources[unit.id] = unit.event.source_unit_ids
        for attribute in unit.attributes:
            sources[attribute.id] = attribute.source_unit_ids
    out: set[str] = set()
    for h in state.hypotheses:
        for cited in h.citations:
            out |= sources.get(cited, frozenset())
    return out


def score_qa_case(result: RunResult, gold: CaseSpec) -> QAScore:
    exact, f1 = score_qa(
        result.conclusion.per_dimension.get(ANSWER, ""),
        gold.gold_answers,
        gold.gold_support,
        predicted_support(result) if gold.gold_support else (),
    )
    return QAScore(gold.case_id, exact, f1, cost_summary(result.trace).total_tokens)


# ---------------------------------------------------------------------------
# Cost and aggregation
# ---------------------------------------------------------------------------


def normalized_cost(method_costs: Mapping[str, Sequence[float]], baseline: str = "Direct") -> dict[str, float]:
    """Mean over runs of (method cost / baseline cost); the baseline maps to exactly 1.0.

    Runs are paired by position. A method with a different number of runs than
    the baseline is compared against the baseline's mean cost.
    """
    if baseline not in method_costs:
        raise CostError(f"baseline {baseline!r} has no runs")
    base = [float(c) for c in method_costs[baseline]]
    if not base or any(c == 0 for c in base):
        raise CostError(f"baseline {baseline!r} has zero cost")
    base_mean = statistics.fmean(base)
    out: dict[str, float] = {}
    for method, costs in method_costs.items():
        if method == baseline:
            out[method] = 1.0
            continue
        costs = [float(c) for c in costs]
        if not costs:
            continue
        if len(costs) == len(base):
            ratios = [c / b for c, b in zip(costs, base)]
        else:
            ratios = [c / base_mean for c in costs]
        out[method] = statistics.fmean(ratios)
    return out


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0.0 for a single value)."""
    values = [float(v) for v in values]
    if not values:
        return math.nan, math.nan
    if len(values) == 1:
        return values[0], 0.0
    return statistics.fmean(values), statistics.stdev(values)


# ---------------------------------------------------------------------------
# Reliability audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReliabilityReport:
    unsupported_rate: float | None
    flagged_rate: float | None
    correction_within_flagged_rate: float | None
    hypotheses: int = 0
    unsupported: int = 0
    flagged: int = 0
    corrected: int = 0
    corrected_ids: frozenset[str] = field(default_factory=frozenset, repr=False)
    flagged_ids: frozenset[str] = field(default_factory=frozenset, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "unsupported_rate": self.unsupported_rate,
            "flagged_rate": self.flagged_rate,
            "correction_within_flagged_rate": self.correction_within_flagged_rate,
            "hypotheses": self.hypotheses,
            "unsupported": self.unsupported,
            "flagged": self.flagged,
            "corrected": self.corrected,
        }


def reliability_audit(results: Iterable[RunResult]) -> ReliabilityReport:
    """Unsupported / Flagged / Correction-within-flagged rates, in percent.

    Unsupported counts hypotheses without evidence citations; Flagged counts
    hypotheses marked as conflicting or weakly supported; the two may overlap.
    A flagged hypothesis counts as corrected when a later hypothesis in the same
    run supersedes it. Rates are None when their denominator is zero.
    """
    total = unsupported = 0
    flagged_ids: set[str] = set()
    corrected_ids: set[str] = set()
    for run_index, result in enumerate(results):
        hyps = [h for record in result.trace for h in record.hypotheses_added]
        superseded = {h.supersedes for h in hyps if h.supersedes is not None}
        for h in hyps:
            total += 1
            unsupported += h.unsupported
            if h.support_status is SupportStatus.FLAGGED:
                key = f"{run_index}:{h.id}"
                flagged_ids.add(key)
                if h.id in superseded:
                    corrected_ids.add(key)

    def pct(num: int, den: int) -> float | None:
        return None if den == 0 else 100.0 * num / den

    return ReliabilityReport(
        unsupported_rate=pct(unsupported, total),
        flagged_rate=pct(len(flagged_ids), total),
        correction_within_flagged_rate=pct(len(corrected_ids), len(flagged_ids)),
        hypotheses=total,
        unsupported=unsupported,
        flagged=len(flagged_ids),
        corrected=len(corrected_ids),
        corrected_ids=frozenset(corrected_ids),
        flagged_ids=frozenset(flagged_ids),
    )
