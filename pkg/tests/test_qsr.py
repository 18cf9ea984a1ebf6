from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abductor.errors import MissingFixtureError, QSRParseError
from abductor.qsr import QSR_KINDS, TerminationReason, run, should_gate
from abductor.state import RunConfig, SupportStatus, Variant, Verdict, state_from_trace

from scripting import (
    BYPASS_CASE,
    CLOSURE_CASE,
    OPEN_CASE,
    answers,
    corpus_client,
    load,
    make_case,
    random_script,
    scripted_client,
)


class ListSink:
    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)


def _kinds(result) -> list[str]:
    return [c.prompt_kind for r in result.trace for c in r.model_calls]


def _run(case_id: str, **config):
    return run(load(case_id), RunConfig(**config), corpus_client(case_id))


# ---------------------------------------------------------------------------
# termination paths
# ---------------------------------------------------------------------------


def test_clean_baseline_bypasses_the_loop():
    result = _run(BYPASS_CASE)
    assert result.termination_reason is TerminationReason.GATED_BYPASS
    assert result.rounds_executed == 0
    assert len(result.trace) == 1
    assert not QSR_KINDS & set(_kinds(result))
    assert result.trace[0].gate["bypass"] is True
    assert _kinds(result)[-1] == "Synthesize"


def test_two_round_closure():
    result = _run(CLOSURE_CASE)
    assert result.termination_reason is TerminationReason.LOGICAL_CLOSURE
    assert result.rounds_executed == 2
    assert [r.round for r in result.trace] == [0, 1, 2]
    first = result.trace[1]
    assert [o.id for o in first.obstacles] == ["o0.0"]
    assert first.obstacles[0].obstacle_type == "MissingLink"
    assert first.obstacles[0].blocked_dimension == "ModusOperandi"
    assert first.obstacles[0].requirement == "no access path to poison"
    assert [q.id for q in first.queries_added] == ["q0.0.0", "q0.0.1"]
    assert [h.id for h in first.hypotheses_added] == ["h0.0.0", "h0.0.1"]
    butler = first.hypotheses_added[0]
    assert "protect Lin Xiaowan" in butler.statement
    assert butler.citations == ("ev1", "at0")
    assert butler.support_status is SupportStatus.SUPPORTED
    # closure round: Aware only, then synthesis lands in the same record
    last = result.trace[2]
    assert not last.obstacles
    assert [c.prompt_kind for c in last.model_calls] == ["Aware", "Synthesize"]
    assert result.final_state.round == 1
    assert result.final_state.size()["hypotheses"] == 2


def test_never_closing_stops_at_depth_limit():
    for t_max in (1, 3, 5):
        result = _run(OPEN_CASE, t_max=t_max)
        assert result.termination_reason is TerminationReason.MAX_DEPTH
        assert result.rounds_executed == t_max
        assert len(result.trace) == t_max + 1
        assert _kinds(result).count("Aware") == t_max


def test_gate_thresholds_are_inclusive():
    config = RunConfig(gate_conflict_threshold=1, gate_doubt_threshold=1)
    assert should_gate(1, 1, config)
    assert not should_gate(2, 1, config)
    assert not should_gate(1, 2, config)
    assert should_gate(0, 0, RunConfig())
    assert not should_gate(0, 1, RunConfig())
    with pytest.raises(ValueError):
        should_gate(-1, 0, RunConfig())


def test_raised_thresholds_let_the_mystery_bypass():
    result = _run(CLOSURE_CASE, gate_conflict_threshold=1, gate_doubt_threshold=1)
    assert result.termination_reason is TerminationReason.GATED_BYPASS
    assert result.trace[0].gate == {
        "variant": "Full",
        "conflicts": 1,
        "doubts": 1,
        "x": 1,
        "y": 1,
        "bypass": True,
    }


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


def test_direct_and_cot_make_one_call():
    for variant in (Variant.DIRECT, Variant.COT):
        result = _run(CLOSURE_CASE, variant=variant)
        assert result.termination_reason is TerminationReason.NOT_ENTERED
        assert _kinds(result) == ["DirectAnswer"]
        assert result.trace[0].baseline is None
        assert result.conclusion.per_dimension["Suspect"] == "Lin Xiaowan"


def test_no_awareness_skips_the_loop():
    result = _run(CLOSURE_CASE, variant=Variant.NO_AWARENESS)
    assert result.termination_reason is TerminationReason.NOT_ENTERED
    assert "Aware" not in _kinds(result)
    assert _kinds(result)[-1] == "Synthesize"


def test_self_assessment_only_never_enriches():
    result = _run(CLOSURE_CASE, variant=Variant.SELF_ASSESSMENT_ONLY)
    assert result.termination_reason is TerminationReason.LOGICAL_CLOSURE
    assert set(_kinds(result)) & QSR_KINDS == {"Aware"}
    sizes = [r.state_size_after for r in result.trace]
    assert all(s == sizes[0] for s in sizes)
    assert result.final_state.round == 1


def test_no_if_uses_passthrough_and_always_enters():
    result = _run(BYPASS_CASE, variant=Variant.NO_IF)
    head = result.trace[0]
    assert head.gate["bypass"] is False
    assert {"ExtractStructure", "Align", "Verify"}.isdisjoint(_kinds(result))
    case = load(BYPASS_CASE)
    assert [u.event.description for u, _ in head.baseline.pairs] == [u.text for u in case.narrative]
    assert all(c.verdict is Verdict.CONSISTENT for _, c in head.baseline.pairs)
    assert result.termination_reason is TerminationReason.LOGICAL_CLOSURE


# ---------------------------------------------------------------------------
# stage behaviour
# ---------------------------------------------------------------------------


def _loop_case(*responses, verify="Doubt"):
    base = [
        {
            "kind": "ExtractStructure",
            "response": {"events": [{"description": "a death", "source_unit_ids": ["u0"]}], "attributes": []},
        },
        {"kind": "Verify", "key": "*", "response": {"verdict": verify, "note": "missing causal link"}},
        {"kind": "Synthesize", "round": "*", "response": answers()},
    ]
    return make_case("c1", ["Someone died."]), {"case_id": "c1", "responses": base + list(responses)}


def _aware(rnd, *obstacles):
    return {"kind": "Aware", "round": rnd, "response": {"obstacles": list(obstacles)}}


OBSTACLE = {"type": "Ambiguity", "dimension": "Suspect", "requirement": "two people had keys"}


def test_ambiguity_yields_one_query_per_reading():
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        _aware(1),
        {"kind": "Decompose", "key": "o0.0", "response": {"queries": ["did the maid use her key?", "did the cook use hers?"]}},
        {"kind": "Hypothesize", "key": "*", "round": 0, "response": {"statement": "perhaps", "citations": ["ev0"]}},
    )
    result = run(case, RunConfig(), scripted_client(doc))
    queries = result.trace[1].queries_added
    assert [q.question for q in queries] == ["did the maid use her key?", "did the cook use hers?"]
    assert all(q.obstacle_id == "o0.0" for q in queries)


def test_empty_decomposition_wraps_the_requirement():
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        _aware(1),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": []}},
        {"kind": "Hypothesize", "key": "*", "round": "*", "response": {"statement": "x"}},
    )
    result = run(case, RunConfig(), scripted_client(doc))
    assert [q.question for q in result.trace[1].queries_added] == ["two people had keys"]


def test_undeclared_dimension_is_recorded_as_other():
    odd = {"type": "Timeline", "dimension": "Weapon", "requirement": "what weapon?"}
    case, doc = _loop_case(
        _aware(0, odd),
        _aware(1),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": ["which weapon?"]}},
        {"kind": "Hypothesize", "key": "*", "round": "*", "response": {"statement": "a knife"}},
    )
    obstacle = run(case, RunConfig(), scripted_client(doc)).trace[1].obstacles[0]
    assert obstacle.blocked_dimension == "Other:Weapon"
    assert obstacle.obstacle_type == "Other:Timeline"


def test_unknown_citations_are_dropped(caplog):
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        _aware(1),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": ["who?"]}},
        {"kind": "Hypothesize", "key": "*", "round": "*", "response": {"statement": "x", "citations": ["ev0", "zz"]}},
    )
    hyp = run(case, RunConfig(), scripted_client(doc)).trace[1].hypotheses_added[0]
    assert hyp.citations == ("ev0",)
    assert "unknown ids" in caplog.text


def test_hypothesis_status_rules():
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        _aware(1),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": ["a?", "b?", "c?"]}},
        {"kind": "Hypothesize", "key": "q0.0.0", "round": 0, "response": {"statement": "cited", "citations": ["ev0"]}},
        {"kind": "Hypothesize", "key": "q0.0.1", "round": 0, "response": {"statement": "bare"}},
        {
            "kind": "Hypothesize",
            "key": "q0.0.2",
            "round": 0,
            "response": {"statement": "doubtful", "citations": ["ev0"], "flagged": True},
        },
    )
    hyps = run(case, RunConfig(), scripted_client(doc)).trace[1].hypotheses_added
    assert [h.support_status for h in hyps] == [SupportStatus.SUPPORTED, SupportStatus.UNSUPPORTED, SupportStatus.FLAGGED]


def test_flagged_hypothesis_is_superseded_in_a_later_round():
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        _aware(1, OBSTACLE),
        _aware(2),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": ["who?"]}},
        {"kind": "Hypothesize", "key": "q0.0.0", "round": 0, "response": {"statement": "the maid", "flagged": True}},
        {
            "kind": "Hypothesize",
            "key": "q1.0.0",
            "round": 1,
            "response": {"statement": "the cook", "citations": ["ev0"], "supersedes": "h0.0.0"},
        },
    )
    result = run(case, RunConfig(), scripted_client(doc))
    assert result.termination_reason is TerminationReason.LOGICAL_CLOSURE
    assert result.final_state.hypothesis("h1.0.0").supersedes == "h0.0.0"
    assert result.final_state.hypothesis("h1.0.0").round == 2


def test_unknown_supersedes_is_retried_then_fails():
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": ["who?"]}},
        {"kind": "Hypothesize", "key": "*", "round": "*", "response": {"statement": "x", "supersedes": "h7.7.7"}},
    )
    sink = ListSink()
    with pytest.raises(QSRParseError):
        run(case, RunConfig(), scripted_client(doc), sink=sink)
    # the round-0 record was written before the failure surfaced
    assert [r.round for r in sink.records] == [0]


def test_missing_fixture_names_the_key():
    case, doc = _loop_case()
    with pytest.raises(MissingFixtureError) as info:
        run(case, RunConfig(), scripted_client(doc))
    assert "c1/Aware/round=0" in str(info.value)


def test_beam_width_adds_suffixed_hypotheses():
    case, doc = _loop_case(
        _aware(0, OBSTACLE),
        _aware(1),
        {"kind": "Decompose", "key": "*", "round": "*", "response": {"queries": ["who?"]}},
        {"kind": "Hypothesize", "key": "*", "round": "*", "response": {"statement": "x"}},
    )
    hyps = run(case, RunConfig(beam_width=3), scripted_client(doc)).trace[1].hypotheses_added
    assert [h.id for h in hyps] == ["h0.0.0", "h0.0.0#1", "h0.0.0#2"]


def test_sink_receives_every_record_in_order():
    sink = ListSink()
    result = run(load(CLOSURE_CASE), RunConfig(), corpus_client(CLOSURE_CASE), sink=sink)
    assert sink.records == list(result.trace)


def test_parallel_workers_do_not_change_the_trace():
    serial = run(load(CLOSURE_CASE), RunConfig(), corpus_client(CLOSURE_CASE))
    parallel = run(load(CLOSURE_CASE), RunConfig(), corpus_client(CLOSURE_CASE), max_workers=4)
    strip = lambda r: [  # noqa: E731
        {**rec.to_dict(), "model_calls": [{**c.to_dict(), "latency_ms": 0} for c in rec.model_calls]} for rec in r.trace
    ]
    assert strip(serial) == strip(parallel)
    assert serial.conclusion == parallel.conclusion


# ---------------------------------------------------------------------------
# randomized scripts
# ---------------------------------------------------------------------------


@settings(max_examples=75, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_random_scripts_keep_state_monotone(seed):
    case, doc, t_max = random_script(random.Random(seed), "rand")
    result = run(case, RunConfig(t_max=t_max), scripted_client(doc))
    assert [r.round for r in result.trace] == list(range(len(result.trace)))
    assert result.rounds_executed <= t_max
    previous = None
    for k in range(1, len(result.trace) + 1):
        state = state_from_trace(result.trace[:k])
        ids = state.item_ids()
        if previous is not None:
            assert previous <= ids
        previous = ids
    assert state_from_trace(result.trace) == result.final_state
    enriched_rounds = sum(1 for r in result.trace[1:] if r.obstacles)
    assert result.final_state.round == enriched_rounds
    if result.termination_reason is TerminationReason.MAX_DEPTH:
        assert result.rounds_executed == t_max
