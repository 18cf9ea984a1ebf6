"""Query-driven structured reasoning: gating, the obstacle -> query -> hypothesis loop, synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol

from .backend import ModelClient, SchemaViolation
from .dataset import CaseSpec
from .errors import QSRParseError
from .fusion import FusionOutput, fuse, passthrough
from .prompts import COT_TEMPLATE, PromptKind, PromptLibrary
from .session import Session, render_narrative, render_state
from .state import (
    OTHER_PREFIX,
    Conclusion,
    HypothesisItem,
    ModelCall,
    Obstacle,
    QueryItem,
    ReasoningState,
    RunConfig,
    SupportStatus,
    Task,
    TraceRecord,
    Variant,
    enrich,
    new_state,
    normalize_dimension,
    normalize_obstacle_type,
    other_label,
)

logger = logging.getLogger(__name__)

QSR_KINDS = frozenset({PromptKind.AWARE.value, PromptKind.DECOMPOSE.value, PromptKind.HYPOTHESIZE.value})


class TerminationReason(str, Enum):
    GATED_BYPASS = "GatedBypass"
    LOGICAL_CLOSURE = "LogicalClosure"
    MAX_DEPTH = "MaxDepth"
    # Direct, CoT and NoAwareness never enter the loop by construction
    NOT_ENTERED = "NotEntered"


@dataclass(frozen=True)
class RunResult:
    conclusion: Conclusion
    trace: tuple[TraceRecord, ...]
    termination_reason: TerminationReason
    rounds_executed: int
    final_state: ReasoningState | None = field(default=None, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "conclusion": self.conclusion.to_dict(),
            "termination_reason": self.termination_reason.value,
            "rounds_executed": self.rounds_executed,
        }


def should_gate(conflicts: int, doubts: int, config: RunConfig) -> bool:
    """True when the baseline is clean enough to skip the loop and synthesize directly."""
    if conflicts < 0 or doubts < 0:
        raise ValueError("counts must be non-negative")
    return conflicts <= config.gate_conflict_threshold and doubts <= config.gate_doubt_threshold


def identify_obstacles(state: ReasoningState, task: Task, session: Session, iteration: int) -> list[Obstacle]:
    response = session.ask(
        PromptKind.AWARE,
        {
            "instruction": task.instruction,
            "dimensions": ", ".join(task.dimensions),
            "iteration": iteration,
            "state": render_state(state),
        },
        round=iteration,
        error_cls=QSRParseError,
    )
    obstacles = []
    for i, item in enumerate(response.parsed["obstacles"]):
        dimension = normalize_dimension(item["dimension"])
        if dimension not in task.dimensions and not item["dimension"].strip().startswith(OTHER_PREFIX):
            logger.warning("obstacle cites undeclared dimension %r; recorded as Other", item["dimension"])
            dimension = other_label(item["dimension"])
        obstacles.append(
            Obstacle(
                id=f"o{iteration}.{i}",
                obstacle_type=normalize_obstacle_type(item["type"]),
                blocked_dimension=dimension,
                requirement=item["requirement"].strip(),
                round=iteration,
            )
        )
    return obstacles


def decompose_obstacle(obstacle: Obstacle, state: ReasoningState, session: Session, iteration: int) -> list[QueryItem]:
    response = session.ask(
        PromptKind.DECOMPOSE,
        {
            "obstacle_id": obstacle.id,
            "obstacle_type": obstacle.obstacle_type,
            "dimension": obstacle.blocked_dimension,
            "requirement": obstacle.requirement,
            "state": render_state(state),
        },
        round=iteration,
        discriminator=obstacle.id,
        error_cls=QSRParseError,
    )
    questions = [q.strip() for q in response.parsed["queries"] if q.strip()]
    if not questions:
        questions = [obstacle.requirement]
    suffix = obstacle.id[1:]
    return [
        QueryItem(id=f"q{suffix}.{j}", obstacle_id=obstacle.id, question=q, round=state.round + 1)
        for j, q in enumerate(questions)
    ]


def generate_hypothesis(
    query: QueryItem, state: ReasoningState, session: Session, iteration: int, beam_index: int = 0
) -> HypothesisItem:
    earlier = {h.id for h in state.hypotheses}

    def check(payload: dict[str, Any]) -> None:
        target = payload.get("supersedes")
        if target is not None and target not in earlier:
            raise SchemaViolation(f"supersedes names {target!r}, which is not an earlier hypothesis")

    discriminator = query.id if beam_index == 0 else f"{query.id}#{beam_index}"
    response = session.ask(
        PromptKind.HYPOTHESIZE,
        {"query_id": query.id, "question": query.question, "state": render_state(state)},
        round=iteration,
        discriminator=discriminator,
        check=check,
        error_cls=QSRParseError,
    )
    payload = response.parsed
    known = state.item_ids()
    cited = [c for c in payload.get("citations", ()) if c in known]
    if len(cited) != len(payload.get("citations", ())):
        logger.warning("hypothesis for %s cites unknown ids; dropped", query.id)
    if payload.get("flagged"):
        status = SupportStatus.FLAGGED
    elif cited:
        status = SupportStatus.SUPPORTED
    else:
        status = SupportStatus.UNSUPPORTED
    hyp_id = "h" + query.id[1:] + (f"#{beam_index}" if beam_index else "")
    return HypothesisItem(
        id=hyp_id,
        query_id=query.id,
        statement=payload["statement"].strip(),
        support_status=status,
        round=state.round + 1,
        supersedes=payload.get("supersedes"),
        citations=tuple(cited),
    )


def _answers_check(task: Task):
    def check(payload: dict[str, Any]) -> None:
        answers = payload["answers"]
        missing = [d for d in task.dimensions if not str(answers.get(d, "")).strip()]
        if missing:
            raise SchemaViolation(f"conclusion leaves {missing} unanswered")

    return check


def _conclusion(payload: dict[str, Any], task: Task) -> Conclusion:
    return Conclusion(
        per_dimension={d: payload["answers"][d].strip() for d in task.dimensions},
        rationale=str(payload.get("rationale", "")),
    )


def synthesize(state: ReasoningState, task: Task, session: Session) -> Conclusion:
    response = session.ask(
        PromptKind.SYNTHESIZE,
        {"instruction": task.instruction, "dimensions": ", ".join(task.dimensions), "state": render_state(state)},
        round=state.round,
        check=_answers_check(task),
        error_cls=QSRParseError,
    )
    return _conclusion(response.parsed, task)


def answer_directly(case: CaseSpec, session: Session) -> Conclusion:
    task = case.task
    chain_of_thought = session.config.variant is Variant.COT
    response = session.ask(
        PromptKind.DIRECT_ANSWER,
        {
            "instruction": task.instruction,
            "dimensions": ", ".join(task.dimensions),
            "narrative": render_narrative(case.narrative),
        },
        discriminator=session.config.variant.value,
        template=COT_TEMPLATE if chain_of_thought else None,
        check=_answers_check(task),
        error_cls=QSRParseError,
    )
    return _conclusion(response.parsed, task)


class TraceSink(Protocol):
    def append(self, record: TraceRecord) -> None: ...


class _Recorder:
    """Holds the current round's record until the next round starts, then writes it.

    Synthesis calls land in whichever record is pending when synthesis runs.
    """

    def __init__(self, sink: TraceSink | None):
        self.sink = sink
        self.records: list[TraceRecord] = []
        self.pending: TraceRecord | None = None

    def stage(self, record: TraceRecord) -> None:
        self.flush()
        self.pending = record

    def add_calls(self, calls: tuple[ModelCall, ...]) -> None:
        if self.pending is None or not calls:
            return
        p = self.pending
        self.pending = TraceRecord(
            round=p.round,
            obstacles=p.obstacles,
            queries_added=p.queries_added,
            hypotheses_added=p.hypotheses_added,
            state_size_after=p.state_size_after,
            model_calls=p.model_calls + calls,
            baseline=p.baseline,
            gate=p.gate,
        )

    def flush(self) -> None:
        if self.pending is None:
            return
        record, self.pending = self.pending, None
        self.records.append(record)
        if self.sink is not None:
            self.sink.append(record)


def run(
    case: CaseSpec,
    config: RunConfig,
    client: ModelClient,
    *,
    prompts: PromptLibrary | None = None,
    sink: TraceSink | None = None,
    max_workers: int = 1,
) -> RunResult:
    """Run one case end to end.

    Every completed record reaches ``sink`` before the next round begins; if a
    stage raises, the records produced so far are flushed before the error propagates.
    """
    session = Session(client, case.case_id, config, prompts, max_workers)
    recorder = _Recorder(sink)
    try:
        result = _run(case, config, session, recorder)
    except BaseException:
        recorder.add_calls(session.calls.drain())
        recorder.flush()
        raise
    recorder.flush()
    return RunResult(
        conclusion=result[0],
        trace=tuple(recorder.records),
        termination_reason=result[1],
        rounds_executed=result[2],
        final_state=result[3],
    )


def _run(
    case: CaseSpec, config: RunConfig, session: Session, recorder: _Recorder
) -> tuple[Conclusion, TerminationReason, int, ReasoningState | None]:
    task = case.task
    variant = config.variant

    if variant in (Variant.DIRECT, Variant.COT):
        recorder.stage(TraceRecord(round=0, gate={"variant": variant.value, "bypass": True}))
        conclusion = answer_directly(case, session)
        recorder.add_calls(session.calls.drain())
        return conclusion, TerminationReason.NOT_ENTERED, 0, None

    if variant is Variant.NO_IF:
        fusion: FusionOutput = passthrough(case.narrative)
    else:
        fusion = fuse(case.narrative, session)
    state = new_state(fusion.baseline)

    gated = variant is not Variant.NO_IF and should_gate(fusion.conflicts, fusion.doubts, config)
    gate = {
        "variant": variant.value,
        "conflicts": fusion.conflicts,
        "doubts": fusion.doubts,
        "x": config.gate_conflict_threshold,
        "y": config.gate_doubt_threshold,
        "bypass": gated,
    }
    recorder.stage(
        TraceRecord(
            round=0,
            state_size_after=state.size(),
            model_calls=session.calls.drain(),
            baseline=fusion.baseline,
            gate=gate,
        )
    )

    if gated or variant is Variant.NO_AWARENESS:
        conclusion = synthesize(state, task, session)
        recorder.add_calls(session.calls.drain())
        reason = TerminationReason.GATED_BYPASS if gated else TerminationReason.NOT_ENTERED
        return conclusion, reason, 0, state

    reason = TerminationReason.MAX_DEPTH
    t = 0
    while t < config.t_max:
        obstacles = identify_obstacles(state, task, session, t)
        if not obstacles:
            recorder.stage(
                TraceRecord(round=t + 1, state_size_after=state.size(), model_calls=session.calls.drain())
            )
            reason = TerminationReason.LOGICAL_CLOSURE
            t += 1
            break

        queries: list[QueryItem] = []
        hypotheses: list[HypothesisItem] = []
        if variant is not Variant.SELF_ASSESSMENT_ONLY:
            current = state

            def resolve(child: Session, obstacle: Obstacle) -> tuple[list[QueryItem], list[HypothesisItem]]:
                subqueries = decompose_obstacle(obstacle, current, child, t)
                hyps = [
                    generate_hypothesis(q, current, child, t, k)
                    for q in subqueries
                    for k in range(config.beam_width)
                ]
                return subqueries, hyps

            for subqueries, hyps in session.map(resolve, obstacles):
                queries.extend(subqueries)
                hypotheses.extend(hyps)

        state = enrich(state, queries, hypotheses, obstacle_ids=[o.id for o in obstacles])
        recorder.stage(
            TraceRecord(
                round=t + 1,
                obstacles=tuple(obstacles),
                queries_added=tuple(queries),
                hypotheses_added=tuple(hypotheses),
                state_size_after=state.size(),
                model_calls=session.calls.drain(),
            )
        )
        t += 1

    conclusion = synthesize(state, task, session)
    recorder.add_calls(session.calls.drain())
    return conclusion, reason, t, state
