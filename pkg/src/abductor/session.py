"""Per-run plumbing shared by the fusion and QSR stages."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .backend import CallLog, ModelClient, ModelRequest, ModelResponse
from .errors import ParseError
from .prompts import PromptKind, PromptLibrary
from .state import AlignedUnit, BackboneEvent, Attribute, NarrativeUnit, ReasoningState, RunConfig

T = TypeVar("T")
R = TypeVar("R")


class Session:
    """Renders prompts, calls the model, and keeps the calls made since the last drain."""

    def __init__(
        self,
        client: ModelClient,
        case_id: str,
        config: RunConfig,
        prompts: PromptLibrary | None = None,
        max_workers: int = 1,
    ):
        self.client = client
        self.case_id = case_id
        self.config = config
        self.prompts = prompts or PromptLibrary()
        self.max_workers = max(1, max_workers)
        self.calls = CallLog()

    def fork(self) -> "Session":
        return Session(self.client, self.case_id, self.config, self.prompts, self.max_workers)

    def ask(
        self,
        kind: PromptKind,
        values: dict[str, Any],
        *,
        round: int = 0,
        discriminator: str = "",
        check: Callable[[Any], None] | None = None,
        error_cls: type[ParseError] = ParseError,
        template: str | None = None,
    ) -> ModelResponse:
        prompt = self.prompts.render(kind, template=template, **values)
        request = ModelRequest(
            kind=kind,
            rendered_prompt=prompt,
            temperature=self.config.temperature,
            case_id=self.case_id,
            round=round,
            discriminator=discriminator,
        )
        try:
            response = self.client.complete(request, check)
        except ParseError as exc:
            if type(exc) is ParseError and error_cls is not ParseError:
                raise error_cls(str(exc), exc.raw_attempts) from exc
            raise
        self.calls.extend(response.calls)
        return response

    def map(self, fn: Callable[["Session", T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` to each item, possibly concurrently; results and call logs keep item order."""
        children = [self.fork() for _ in items]
        if self.max_workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(fn, children, items))
        else:
            results = [fn(child, item) for child, item in zip(children, items)]
        for child in children:
            self.calls.extend(child.calls.drain())
        return results


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------


def render_narrative(units: Iterable[NarrativeUnit]) -> str:
    return "\n".join(f"[{u.id}] {u.text}" for u in units)


def render_events(events: Iterable[BackboneEvent]) -> str:
    return "\n".join(f"[{e.id}] {e.description}" for e in events)


def render_attributes(attributes: Iterable[Attribute]) -> str:
    return "\n".join(
        f"[{a.id}] ({a.kind.value}) {a.description} (from {', '.join(sorted(a.source_unit_ids))})" for a in attributes
    ) or "(none)"


def render_unit(unit: AlignedUnit) -> str:
    lines = [f"[{unit.event.id}] {unit.event.description}"]
    lines += [f"  - [{a.id}] {a.description}" for a in unit.attributes]
    return "\n".join(lines)


def render_state(state: ReasoningState) -> str:
    lines = [f"Round {state.round}.", "Baseline:"]
    for unit, comment in state.baseline.pairs:
        lines.append(render_unit(unit))
        if comment.note:
            lines.append(f"  ! {comment.verdict.value}: {comment.note}")
    if state.queries:
        lines.append("Queries:")
        lines += [f"[{q.id}] (for {q.obstacle_id}) {q.question}" for q in state.queries]
    if state.hypotheses:
        lines.append("Hypotheses:")
        for h in state.hypotheses:
            extra = f", supersedes {h.supersedes}" if h.supersedes else ""
            lines.append(f"[{h.id}] (answers {h.query_id}; {h.support_status.value}{extra}) {h.statement}")
    return "\n".join(lines)
