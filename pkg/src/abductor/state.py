"""Domain types shared by every pipeline stage, and the append-only reasoning state."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

from .errors import IdCollisionError, LinkError, StructuralValidationError

SUSPECT = "Suspect"
MOTIVE = "Motive"
MODUS_OPERANDI = "ModusOperandi"
ANSWER = "Answer"
STANDARD_DIMENSIONS = (SUSPECT, MOTIVE, MODUS_OPERANDI, ANSWER)

OBSTACLE_TYPES = ("MissingLink", "Ambiguity", "MotiveGap")
OTHER_PREFIX = "Other:"


def other_label(label: str) -> str:
    """Escape an arbitrary label into the ``Other:<label>`` form."""
    label = label.strip()
    if label.startswith(OTHER_PREFIX):
        return label
    return f"{OTHER_PREFIX}{label}"


def normalize_dimension(label: str) -> str:
    label = label.strip()
    if label in STANDARD_DIMENSIONS or label.startswith(OTHER_PREFIX):
        return label
    return other_label(label)


def normalize_obstacle_type(label: str) -> str:
    label = label.strip()
    if label in OBSTACLE_TYPES or label.startswith(OTHER_PREFIX):
        return label
    return other_label(label or "Unspecified")


class AttributeKind(str, Enum):
    ACTION = "Action"
    OBJECT_STATE = "ObjectState"
    LOCATION = "Location"
    EVIDENTIARY_DESCRIPTOR = "EvidentiaryDescriptor"
    OTHER = "Other"


class Verdict(str, Enum):
    CONSISTENT = "Consistent"
    CONFLICT = "Conflict"
    DOUBT = "Doubt"


class SupportStatus(str, Enum):
    SUPPORTED = "Supported"
    UNSUPPORTED = "Unsupported"
    FLAGGED = "Flagged"


class Variant(str, Enum):
    FULL = "Full"
    NO_IF = "NoIF"
    SELF_ASSESSMENT_ONLY = "SelfAssessmentOnly"
    NO_AWARENESS = "NoAwareness"
    DIRECT = "Direct"
    COT = "CoT"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        aliases = {"woif": cls.NO_IF, "woawareness": cls.NO_AWARENESS, "selfassessment": cls.SELF_ASSESSMENT_ONLY}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown variant {text!r}")


# ---------------------------------------------------------------------------
# Information-fusion products
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NarrativeUnit:
    id: str
    text: str
    ordinal: int

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "text": self.text, "ordinal": self.ordinal}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NarrativeUnit":
        return cls(id=str(data["id"]), text=str(data["text"]), ordinal=int(data["ordinal"]))


@dataclass(frozen=True)
class BackboneEvent:
    id: str
    description: str
    ordinal: int
    # narrative units the event was drawn from; used by the alignment repair rule
    source_unit_ids: frozenset[str] = frozenset()

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "ordinal": self.ordinal,
            "source_unit_ids": sorted(self.source_unit_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackboneEvent":
        return cls(
            id=str(data["id"]),
            description=str(data["description"]),
            ordinal=int(data["ordinal"]),
            source_unit_ids=frozenset(data.get("source_unit_ids", ())),
        )


@dataclass(frozen=True)
class Attribute:
    id: str
    description: str
    kind: AttributeKind
    source_unit_ids: frozenset[str]

    def __post_init__(self) -> None:
        if not isinstance(self.kind, AttributeKind):
            object.__setattr__(self, "kind", AttributeKind(self.kind))
        if not self.source_unit_ids:
            raise StructuralValidationError(f"attribute {self.id} cites no source unit")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "kind": self.kind.value,
            "source_unit_ids": sorted(self.source_unit_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Attribute":
        return cls(
            id=str(data["id"]),
            description=str(data["description"]),
            kind=AttributeKind(data["kind"]),
            source_unit_ids=frozenset(data["source_unit_ids"]),
        )


@dataclass(frozen=True)
class AlignmentMap:
    """Attribute id -> non-empty set of event ids. Multi-assignment is allowed."""

    entries: dict[str, frozenset[str]]

    def validate(self, attributes: Iterable[Attribute], events: Iterable[BackboneEvent]) -> None:
        attr_ids = [a.id for a in attributes]
        event_ids = {e.id for e in events}
        if set(attr_ids) != set(self.entries) or len(attr_ids) != len(set(attr_ids)):
            raise StructuralValidationError("alignment must cover every attribute exactly once")
        for attr_id, targets in self.entries.items():
            if not targets:
                raise StructuralValidationError(f"attribute {attr_id} aligned to no event")
            unknown = targets - event_ids
            if unknown:
                raise StructuralValidationError(f"attribute {attr_id} aligned to unknown events {sorted(unknown)}")

    def attributes_for(self, event_id: str) -> list[str]:
        return [a for a, targets in self.entries.items() if event_id in targets]

    def to_dict(self) -> dict[str, list[str]]:
        return {k: sorted(v) for k, v in self.entries.items()}

    @classmethod
    def from_dict(cls, data: dict[str, Iterable[str]]) -> "AlignmentMap":
        return cls({k: frozenset(v) for k, v in data.items()})


@dataclass(frozen=True)
class AlignedUnit:
    event: BackboneEvent
    attributes: tuple[Attribute, ...] = ()

    @property
    def id(self) -> str:
        return self.event.id

    def to_dict(self) -> dict[str, Any]:
        return {"event": self.event.to_dict(), "attributes": [a.to_dict() for a in self.attributes]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AlignedUnit":
        return cls(
            event=BackboneEvent.from_dict(data["event"]),
            attributes=tuple(Attribute.from_dict(a) for a in data["attributes"]),
        )


def build_aligned_units(
    events: list[BackboneEvent], attributes: list[Attribute], alignment: AlignmentMap
) -> list[AlignedUnit]:
    by_id = {a.id: a for a in attributes}
    units = []
    for event in sorted(events, key=lambda e: e.ordinal):
        attached = tuple(by_id[a] for a in alignment.attributes_for(event.id))
        units.append(AlignedUnit(event=event, attributes=attached))
    return units


@dataclass(frozen=True)
class ConsistencyComment:
    unit_id: str
    verdict: Verdict
    note: str = ""
    referenced_unit_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not isinstance(self.verdict, Verdict):
            object.__setattr__(self, "verdict", Verdict(self.verdict))
        if self.verdict is not Verdict.CONSISTENT and not self.note.strip():
            raise StructuralValidationError(f"{self.verdict.value} comment on {self.unit_id} needs a note")

    def to_dict(self) -> dict[str, Any]:
        return {
            "unit_id": self.unit_id,
            "verdict": self.verdict.value,
            "note": self.note,
            "referenced_unit_ids": sorted(self.referenced_unit_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConsistencyComment":
        return cls(
            unit_id=str(data["unit_id"]),
            verdict=Verdict(data["verdict"]),
            note=str(data.get("note", "")),
            referenced_unit_ids=frozenset(data.get("referenced_unit_ids", ())),
        )


@dataclass(frozen=True)
class BaselineState:
    pairs: tuple[tuple[AlignedUnit, ConsistencyComment], ...]

    def validate(self) -> None:
        if not self.pairs:
            raise StructuralValidationError("baseline is empty")
        seen: set[str] = set()
        last_ordinal = None
        for unit, comment in self.pairs:
            if comment.unit_id != unit.id:
                raise StructuralValidationError(f"comment for {comment.unit_id} paired with unit {unit.id}")
            if unit.id in seen:
                raise StructuralValidationError(f"unit {unit.id} carries more than one comment")
            seen.add(unit.id)
            if last_ordinal is not None and unit.event.ordinal <= last_ordinal:
                raise StructuralValidationError("baseline order does not follow event ordinals")
            last_ordinal = unit.event.ordinal

    def item_ids(self) -> set[str]:
        ids: set[str] = set()
        for unit, _ in self.pairs:
            ids.add(unit.id)
            ids.update(a.id for a in unit.attributes)
        return ids

    def counts(self) -> dict[str, int]:
        return {
            "events": len(self.pairs),
            "attributes": sum(len(u.attributes) for u, _ in self.pairs),
            "comments": len(self.pairs),
        }

    def to_dict(self) -> list[dict[str, Any]]:
        return [{"unit": u.to_dict(), "comment": c.to_dict()} for u, c in self.pairs]

    @classmethod
    def from_dict(cls, data: list[dict[str, Any]]) -> "BaselineState":
        return cls(
            tuple(
                (AlignedUnit.from_dict(p["unit"]), ConsistencyComment.from_dict(p["comment"])) for p in data
            )
        )


# ---------------------------------------------------------------------------
# QSR items
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Obstacle:
    id: str
    obstacle_type: str
    blocked_dimension: str
    requirement: str
    round: int

    def __post_init__(self) -> None:
        if not self.requirement.strip():
            raise StructuralValidationError(f"obstacle {self.id} has an empty requirement")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "obstacle_type": self.obstacle_type,
            "blocked_dimension": self.blocked_dimension,
            "requirement": self.requirement,
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Obstacle":
        return cls(**{k: data[k] for k in ("id", "obstacle_type", "blocked_dimension", "requirement", "round")})


@dataclass(frozen=True)
class QueryItem:
    id: str
    obstacle_id: str
    question: str
    round: int

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise StructuralValidationError(f"query {self.id} has an empty question")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "obstacle_id": self.obstacle_id, "question": self.question, "round": self.round}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QueryItem":
        return cls(**{k: data[k] for k in ("id", "obstacle_id", "question", "round")})


@dataclass(frozen=True)
class HypothesisItem:
    id: str
    query_id: str
    statement: str
    support_status: SupportStatus
    round: int
    supersedes: str | None = None
    citations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.support_status, SupportStatus):
            object.__setattr__(self, "support_status", SupportStatus(self.support_status))
        if not self.statement.strip():
            raise StructuralValidationError(f"hypothesis {self.id} has an empty statement")

    @property
    def unsupported(self) -> bool:
        # "not directly supported by evidence" is independent of the flag, so the two may overlap
        return not self.citations

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "query_id": self.query_id,
            "statement": self.statement,
            "support_status": self.support_status.value,
            "supersedes": self.supersedes,
            "citations": list(self.citations),
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HypothesisItem":
        return cls(
            id=data["id"],
            query_id=data["query_id"],
            statement=data["statement"],
            support_status=SupportStatus(data["support_status"]),
            round=int(data["round"]),
            supersedes=data.get("supersedes"),
            citations=tuple(data.get("citations", ())),
        )


@dataclass(frozen=True)
class ReasoningState:
    """The baseline plus every query and hypothesis added so far.

    Values are immutable; :func:`enrich` returns a new state.
    """

    baseline: BaselineState
    queries: tuple[QueryItem, ...] = ()
    hypotheses: tuple[HypothesisItem, ...] = ()
    round: int = 0

    def item_ids(self) -> set[str]:
        ids = self.baseline.item_ids()
        ids.update(q.id for q in self.queries)
        ids.update(h.id for h in self.hypotheses)
        return ids

    def size(self) -> dict[str, int]:
        counts = self.baseline.counts()
        counts["queries"] = len(self.queries)
        counts["hypotheses"] = len(self.hypotheses)
        return counts

    def hypothesis(self, hyp_id: str) -> HypothesisItem | None:
        for h in self.hypotheses:
            if h.id == hyp_id:
                return h
        return None


def new_state(baseline: BaselineState) -> ReasoningState:
    baseline.validate()
    return ReasoningState(baseline=baseline)


def enrich(
    state: ReasoningState,
    queries: Iterable[QueryItem],
    hypotheses: Iterable[HypothesisItem],
    obstacle_ids: Iterable[str] | None = None,
) -> ReasoningState:
    """Return the next state: ``state`` with ``queries`` and ``hypotheses`` appended.

    ``obstacle_ids`` are the ids of the obstacles identified this round; when
    given, every new query must point at one of them.
    """
    queries = tuple(queries)
    hypotheses = tuple(hypotheses)
    next_round = state.round + 1

    known = state.item_ids()
    for item in (*queries, *hypotheses):
        if item.round != next_round:
            raise StructuralValidationError(f"item {item.id} has round {item.round}, expected {next_round}")
        if item.id in known:
            raise IdCollisionError(f"duplicate item id {item.id}")
        known.add(item.id)

    if obstacle_ids is not None:
        allowed = set(obstacle_ids)
        for q in queries:
            if q.obstacle_id not in allowed:
                raise LinkError(f"query {q.id} points at unknown obstacle {q.obstacle_id}")

    query_ids = {q.id for q in state.queries} | {q.id for q in queries}
    earlier_hyps = {h.id for h in state.hypotheses}
    for h in hypotheses:
        if h.query_id not in query_ids:
            raise LinkError(f"hypothesis {h.id} points at unknown query {h.query_id}")
        if h.supersedes is not None and h.supersedes not in earlier_hyps:
            raise LinkError(f"hypothesis {h.id} supersedes {h.supersedes}, which is not an earlier hypothesis")

    return replace(
        state,
        queries=state.queries + queries,
        hypotheses=state.hypotheses + hypotheses,
        round=next_round,
    )


# ---------------------------------------------------------------------------
# Task, conclusion, trace, config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    dimensions: tuple[str, ...]
    instruction: str = ""

    def __post_init__(self) -> None:
        dims = tuple(normalize_dimension(d) for d in self.dimensions)
        if not dims:
            raise StructuralValidationError("task declares no dimensions")
        if len(set(dims)) != len(dims):
            raise StructuralValidationError(f"task dimensions repeat: {dims}")
        object.__setattr__(self, "dimensions", dims)

    def to_dict(self) -> dict[str, Any]:
        return {"dimensions": list(self.dimensions), "instruction": self.instruction}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Task":
        return cls(dimensions=tuple(data["dimensions"]), instruction=data.get("instruction", ""))


@dataclass(frozen=True)
class Conclusion:
    per_dimension: dict[str, str]
    rationale: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"per_dimension": dict(self.per_dimension), "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Conclusion":
        return cls(per_dimension=dict(data["per_dimension"]), rationale=data.get("rationale", ""))


@dataclass(frozen=True)
class ModelCall:
    prompt_kind: str
    prompt_tokens: int
    completion_tokens: int
    cache_hit: bool = False
    token_source: str = "provider"
    latency_ms: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_kind": self.prompt_kind,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "cache_hit": self.cache_hit,
            "token_source": self.token_source,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelCall":
        return cls(
            prompt_kind=data["prompt_kind"],
            prompt_tokens=int(data["prompt_tokens"]),
            completion_tokens=int(data["completion_tokens"]),
            cache_hit=bool(data.get("cache_hit", False)),
            token_source=data.get("token_source", "provider"),
            latency_ms=float(data.get("latency_ms", 0.0)),
        )


@dataclass(frozen=True)
class TraceRecord:
    """Log entry for one round. Round 0 carries the fused baseline and the gate outcome."""

    round: int
    obstacles: tuple[Obstacle, ...] = ()
    queries_added: tuple[QueryItem, ...] = ()
    hypotheses_added: tuple[HypothesisItem, ...] = ()
    state_size_after: dict[str, int] = field(default_factory=dict)
    model_calls: tuple[ModelCall, ...] = ()
    baseline: BaselineState | None = None
    gate: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "round": self.round,
            "obstacles": [o.to_dict() for o in self.obstacles],
            "queries_added": [q.to_dict() for q in self.queries_added],
            "hypotheses_added": [h.to_dict() for h in self.hypotheses_added],
            "state_size_after": dict(self.state_size_after),
            "model_calls": [c.to_dict() for c in self.model_calls],
        }
        if self.baseline is not None:
            data["baseline"] = self.baseline.to_dict()
        if self.gate is not None:
            data["gate"] = dict(self.gate)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TraceRecord":
        baseline = data.get("baseline")
        return cls(
            round=int(data["round"]),
            obstacles=tuple(Obstacle.from_dict(o) for o in data.get("obstacles", ())),
            queries_added=tuple(QueryItem.from_dict(q) for q in data.get("queries_added", ())),
            hypotheses_added=tuple(HypothesisItem.from_dict(h) for h in data.get("hypotheses_added", ())),
            state_size_after=dict(data.get("state_size_after", {})),
            model_calls=tuple(ModelCall.from_dict(c) for c in data.get("model_calls", ())),
            baseline=BaselineState.from_dict(baseline) if baseline is not None else None,
            gate=data.get("gate"),
        )


DEFAULT_T_MAX = 3
DEFAULT_TEMPERATURE = 0.0


@dataclass(frozen=True)
class RunConfig:
    t_max: int = DEFAULT_T_MAX
    gate_conflict_threshold: int = 0
    gate_doubt_threshold: int = 0
    variant: Variant = Variant.FULL
    temperature: float = DEFAULT_TEMPERATURE
    beam_width: int = 1
    retry_budget: int = 3

    def __post_init__(self) -> None:
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", Variant.parse(str(self.variant)))
        if self.t_max < 1:
            raise StructuralValidationError("t_max must be at least 1")
        if self.gate_conflict_threshold < 0 or self.gate_doubt_threshold < 0:
            raise StructuralValidationError("gate thresholds must be non-negative")
        if self.beam_width < 1:
            raise StructuralValidationError("beam_width must be at least 1")
        if self.retry_budget < 1:
            raise StructuralValidationError("retry_budget must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_max": self.t_max,
            "gate_conflict_threshold": self.gate_conflict_threshold,
            "gate_doubt_threshold": self.gate_doubt_threshold,
            "variant": self.variant.value,
            "temperature": self.temperature,
            "beam_width": self.beam_width,
            "retry_budget": self.retry_budget,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return cls(**data)


def state_from_trace(records: Iterable[TraceRecord]) -> ReasoningState:
    """Replay a trace into the reasoning state it describes."""
    records = list(records)
    if not records or records[0].baseline is None:
        raise StructuralValidationError("trace has no round-0 baseline record")
    state = new_state(records[0].baseline)
    for record in records[1:]:
        if not record.obstacles:
            # closure round: obstacles came back empty and the state was not enriched
            continue
        state = enrich(
            state,
            record.queries_added,
            record.hypotheses_added,
            obstacle_ids=[o.id for o in record.obstacles],
        )
    return state
