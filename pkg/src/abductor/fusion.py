"""Information fusion: narrative -> backbone + attributes -> aligned units -> verified baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

from .backend import SchemaViolation
from .errors import FusionParseError, InputValidationError
from .prompts import PromptKind
from .session import Session, render_attributes, render_events, render_narrative, render_unit
from .state import (
    AlignedUnit,
    AlignmentMap,
    Attribute,
    AttributeKind,
    BackboneEvent,
    BaselineState,
    ConsistencyComment,
    NarrativeUnit,
    Variant,
    Verdict,
    build_aligned_units,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionOutput:
    backbone: tuple[BackboneEvent, ...]
    attributes: tuple[Attribute, ...]
    alignment: AlignmentMap
    baseline: BaselineState
    conflicts: int
    doubts: int

    @property
    def consistent(self) -> int:
        return len(self.baseline.pairs) - self.conflicts - self.doubts


def decompose(narrative: Sequence[NarrativeUnit], session: Session) -> tuple[list[BackboneEvent], list[Attribute]]:
    if not narrative:
        raise InputValidationError("narrative is empty")
    unit_ids = {u.id for u in narrative}

    def check(payload: dict[str, Any]) -> None:
        for group in ("events", "attributes"):
            for item in payload[group]:
                unknown = set(item.get("source_unit_ids", ())) - unit_ids
                if unknown:
                    raise SchemaViolation(f"{group} cite unknown narrative units {sorted(unknown)}")

    response = session.ask(
        PromptKind.EXTRACT_STRUCTURE,
        {"narrative": render_narrative(narrative)},
        check=check,
        error_cls=FusionParseError,
    )
    events = [
        BackboneEvent(
            id=f"ev{i}",
            description=item["description"].strip(),
            ordinal=i,
            source_unit_ids=frozenset(item.get("source_unit_ids", ())),
        )
        for i, item in enumerate(response.parsed["events"])
    ]
    attributes = [
        Attribute(
            id=f"at{i}",
            description=item["description"].strip(),
            kind=AttributeKind(item["kind"]),
            source_unit_ids=frozenset(item["source_unit_ids"]),
        )
        for i, item in enumerate(response.parsed["attributes"])
    ]
    return events, attributes


def repair_target(attribute: Attribute, events: Sequence[BackboneEvent]) -> str:
    """Event whose source units overlap most with the attribute's; ties go to the earliest ordinal."""
    best = min(events, key=lambda e: (-len(e.source_unit_ids & attribute.source_unit_ids), e.ordinal))
    return best.id


def align(events: Sequence[BackboneEvent], attributes: Sequence[Attribute], session: Session) -> AlignmentMap:
    if not events:
        raise InputValidationError("backbone is empty")
    if not attributes:
        return AlignmentMap({})
    if len(events) == 1:
        return AlignmentMap({a.id: frozenset({events[0].id}) for a in attributes})

    event_ids = {e.id for e in events}
    attr_ids = {a.id for a in attributes}

    def check(payload: dict[str, Any]) -> None:
        mapping = payload["alignment"]
        unknown_attrs = set(mapping) - attr_ids
        if unknown_attrs:
            raise SchemaViolation(f"alignment names unknown attributes {sorted(unknown_attrs)}")
        for attr_id, targets in mapping.items():
            unknown = set(targets) - event_ids
            if unknown:
                raise SchemaViolation(f"{attr_id} aligned to unknown events {sorted(unknown)}")

    response = session.ask(
        PromptKind.ALIGN,
        {"events": render_events(events), "attributes": render_attributes(attributes)},
        check=check,
        error_cls=FusionParseError,
    )
    mapping = response.parsed["alignment"]
    entries: dict[str, frozenset[str]] = {}
    for attribute in attributes:
        targets = frozenset(mapping.get(attribute.id, ()))
        if not targets:
            target = repair_target(attribute, events)
            logger.warning("attribute %s aligned to no event; assigning to %s", attribute.id, target)
            targets = frozenset({target})
        entries[attribute.id] = targets
    return AlignmentMap(entries)


def verify_unit(unit: AlignedUnit, context: Sequence[AlignedUnit], session: Session) -> ConsistencyComment:
    def check(payload: dict[str, Any]) -> None:
        if payload["verdict"] != Verdict.CONSISTENT.value and not payload.get("note", "").strip():
            raise SchemaViolation(f"{payload['verdict']} verdict without a note")

    response = session.ask(
        PromptKind.VERIFY,
        {
            "unit_id": unit.id,
            "unit": render_unit(unit),
            "context": "\n".join(render_unit(u) for u in context) or "(none)",
        },
        discriminator=unit.id,
        check=check,
        error_cls=FusionParseError,
    )
    payload = response.parsed
    known = {u.id for u in context}
    referenced = set(payload.get("referenced_unit_ids", ()))
    if referenced - known:
        logger.warning("verify(%s) referenced unknown units %s; dropped", unit.id, sorted(referenced - known))
    return ConsistencyComment(
        unit_id=unit.id,
        verdict=Verdict(payload["verdict"]),
        note=payload.get("note", "").strip(),
        referenced_unit_ids=frozenset(referenced & known),
    )


def passthrough(narrative: Sequence[NarrativeUnit]) -> FusionOutput:
    """Baseline that wraps each narrative unit as an attribute-free event with a Consistent comment."""
    if not narrative:
        raise InputValidationError("narrative is empty")
    events = [
        BackboneEvent(id=f"ev{i}", description=u.text, ordinal=i, source_unit_ids=frozenset({u.id}))
        for i, u in enumerate(sorted(narrative, key=lambda u: u.ordinal))
    ]
    pairs = tuple((AlignedUnit(e), ConsistencyComment(e.id, Verdict.CONSISTENT)) for e in events)
    return FusionOutput(tuple(events), (), AlignmentMap({}), BaselineState(pairs), 0, 0)


def fuse(narrative: Sequence[NarrativeUnit], session: Session) -> FusionOutput:
    if not narrative:
        raise InputValidationError("narrative is empty")
    if session.config.variant is Variant.NO_IF:
        return passthrough(narrative)

    events, attributes = decompose(narrative, session)
    alignment = align(events, attributes, session)
    alignment.validate(attributes, events)
    units = build_aligned_units(events, attributes, alignment)

    def check_one(child: Session, index: int) -> ConsistencyComment:
        others = units[:index] + units[index + 1 :]
        return verify_unit(units[index], others, child)

    comments = session.map(check_one, list(range(len(units))))
    baseline = BaselineState(tuple(zip(units, comments)))
    baseline.validate()
    conflicts = sum(c.verdict is Verdict.CONFLICT for c in comments)
    doubts = sum(c.verdict is Verdict.DOUBT for c in comments)
    return FusionOutput(tuple(events), tuple(attributes), alignment, baseline, conflicts, doubts)
