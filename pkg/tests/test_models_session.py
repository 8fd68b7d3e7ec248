from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from dar.errors import BudgetExhausted, CheckpointError, InvalidBrief, PreconditionFailed
from dar.models import (
    ColumnInfo,
    DatasetInfo,
    QualityAssessment,
    QueryAttempt,
    QueryCandidate,
    QueryError,
    QueryOutcome,
    ReportDraft,
    ResearchPlan,
    SchemaCatalog,
    Subtask,
    TableInfo,
    ValidationVerdict,
)
from dar.session import (
    decode_stage_value,
    encode_stage_value,
    get_stage,
    load_checkpoint,
    new_session,
    save_checkpoint,
    set_stage,
)

ASSIGNMENT = "Identify significant patterns, trends, and anomalies in the incident data."


def _plan(*ids: str) -> ResearchPlan:
    return ResearchPlan(subtasks=[Subtask(id=i, objective=f"objective {i}", referenced_tables=["incidents"]) for i in ids])


def _attempt(subtask_id: str = "s1", revision: int = 0, rows: int = 1) -> QueryAttempt:
    outcome = QueryOutcome(rows=[{"n": i} for i in range(rows)], columns=["n"])
    verdict = ValidationVerdict(status="PASS", reason="ok") if rows else ValidationVerdict(status="FAIL", reason="empty_result")
    return QueryAttempt(
        candidate=QueryCandidate(subtask_id=subtask_id, sql_text="SELECT 1 AS n", revision_index=revision),
        outcome=outcome,
        verdict=verdict,
    )


# ---------------------------------------------------------------------------
# new_session


def test_new_session_starts_with_zero_counters() -> None:
    session = new_session({"objective": "explore", "constraints": {"max_llm_calls": 100}})
    assert session.counters.model_dump() == {
        "query_review_iterations": 0,
        "revision_iterations": 0,
        "llm_calls": 0,
        "sql_executions": 0,
    }
    assert session.max_llm_calls == 100
    assert session.query_history == []


def test_new_session_rejects_empty_objective() -> None:
    with pytest.raises(InvalidBrief):
        new_session({"objective": "   ", "constraints": {"max_llm_calls": 100}})


def test_new_session_logs_the_brief_once() -> None:
    session = new_session({"objective": ASSIGNMENT})
    assert len(session.conversation_log) == 1
    entry = session.conversation_log[0]
    assert entry.role == "user"
    assert "patterns, trends, and anomalies" in entry.content


def test_new_session_rejects_bad_constraints() -> None:
    with pytest.raises(InvalidBrief):
        new_session({"objective": "x", "constraints": {"max_llm_calls": 0}})
    with pytest.raises(InvalidBrief):
        new_session({"objective": "x", "constraints": {"max_query_cost": -1}})


# ---------------------------------------------------------------------------
# stage variables


def test_stage_read_your_write_and_last_write_wins() -> None:
    session = new_session({"objective": "explore"})
    p1, p2 = _plan("s1"), _plan("s1", "s2")
    set_stage(session, "plan", p1)
    assert get_stage(session, "plan") == p1
    set_stage(session, "plan", p2)
    assert get_stage(session, "plan") == p2
    assert get_stage(session, "missing") is None


def test_stage_key_must_be_non_empty() -> None:
    with pytest.raises(PreconditionFailed):
        set_stage(new_session({"objective": "x"}), "", 1)


def test_stage_envelope_is_versioned_json() -> None:
    doc = json.loads(encode_stage_value(_plan("s1")))
    assert doc["dar_stage"] == 1
    assert doc["type"] == "ResearchPlan"
    with pytest.raises(ValueError):
        decode_stage_value(json.dumps({"dar_stage": 99, "type": "json", "data": 1}))


@given(st.recursive(st.none() | st.booleans() | st.integers() | st.text(), lambda c: st.lists(c, max_size=3), max_leaves=8))
def test_plain_json_stage_values_round_trip(value: object) -> None:
    assert decode_stage_value(encode_stage_value(value)) == value


# ---------------------------------------------------------------------------
# counters and budget


def test_reserve_llm_call_stops_at_the_budget() -> None:
    session = new_session({"objective": "x", "constraints": {"max_llm_calls": 2}})
    session.reserve_llm_call()
    session.reserve_llm_call()
    with pytest.raises(BudgetExhausted):
        session.reserve_llm_call()
    assert session.counters.llm_calls == 2
    assert session.remaining_llm_calls() == 0


@settings(max_examples=50)
@given(st.lists(st.sampled_from(["llm", "attempt", "review", "revision", "log"]), max_size=40), st.integers(1, 10))
def test_counters_and_history_only_grow(ops: list[str], budget: int) -> None:
    session = new_session({"objective": "x", "constraints": {"max_llm_calls": budget}})
    previous = session.counters.model_dump()
    history, log = 0, len(session.conversation_log)
    for op in ops:
        if op == "llm":
            try:
                session.reserve_llm_call()
            except BudgetExhausted:
                pass
        elif op == "attempt":
            session.record_attempt(_attempt())
        elif op == "review":
            session.bump_query_review()
        elif op == "revision":
            session.bump_revision()
        else:
            session.log_message("assistant", "ok")
        current = session.counters.model_dump()
        assert all(current[k] >= previous[k] for k in current)
        assert len(session.query_history) >= history
        assert len(session.conversation_log) >= log
        assert session.counters.llm_calls <= budget
        assert session.counters.sql_executions == len(session.query_history)
        previous, history, log = current, len(session.query_history), len(session.conversation_log)


def test_attempt_lookup_by_subtask_and_query_id() -> None:
    session = new_session({"objective": "x"})
    session.record_attempt(_attempt("s1", 0, rows=0))
    session.record_attempt(_attempt("s1", 1))
    session.record_attempt(_attempt("s2", 0))
    assert [a.candidate.query_id for a in session.attempts_for("s1")] == ["s1#0", "s1#1"]
    found = session.find_attempt("s1#1")
    assert found is not None and found.verdict.passed
    assert session.find_attempt("s9#0") is None


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    session = new_session({"objective": ASSIGNMENT, "constraints": {"max_llm_calls": 7}})
    session.reserve_llm_call()
    session.record_attempt(_attempt())
    set_stage(session, "plan", _plan("s1", "s2"))
    path = tmp_path / "out" / "checkpoint.json"
    save_checkpoint(session, path)

    restored = load_checkpoint(path)
    assert restored.model_dump() == session.model_dump()
    assert get_stage(restored, "plan") == _plan("s1", "s2")


def test_checkpoint_rejects_garbage(tmp_path: Path) -> None:
    path = tmp_path / "checkpoint.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "something-else"}), encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "dar-checkpoint", "version": 1, "session": {}}), encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# model invariants


def test_query_id_is_subtask_and_revision() -> None:
    assert QueryCandidate(subtask_id="s3", sql_text="SELECT 1", revision_index=2).query_id == "s3#2"
    with pytest.raises(ValidationError):
        QueryCandidate(subtask_id="s3", sql_text="  ")


def test_outcome_with_error_cannot_carry_rows() -> None:
    with pytest.raises(ValidationError):
        QueryOutcome(rows=[{"x": 1}], columns=["x"], error=QueryError(code="boom", message="boom"))
    failure = QueryOutcome.failure("syntax_error", "near SELEC")
    assert failure.rows == [] and failure.error is not None


def test_verdict_status_and_reason_agree() -> None:
    with pytest.raises(ValidationError):
        ValidationVerdict(status="PASS", reason="empty_result")
    with pytest.raises(ValidationError):
        ValidationVerdict(status="FAIL", reason="ok")


def test_plan_invariants() -> None:
    with pytest.raises(ValidationError):
        ResearchPlan(subtasks=[])
    with pytest.raises(ValidationError):
        _plan("s1", "s1")
    with pytest.raises(ValidationError):
        ResearchPlan(subtasks=_plan("s1").subtasks, budget_allocation={"s9": 0.5})
    with pytest.raises(ValidationError):
        ResearchPlan(subtasks=_plan("s1", "s2").subtasks, budget_allocation={"s1": 0.7, "s2": 0.7})


def test_report_draft_markers_must_resolve() -> None:
    ReportDraft(markdown="Counts rose [Q1].", evidence_index={"Q1": "s1#0"})
    with pytest.raises(ValidationError):
        ReportDraft(markdown="Counts rose [Q2].", evidence_index={"Q1": "s1#0"})


def test_quality_score_is_mean_of_sub_scores() -> None:
    assessment = QualityAssessment.from_sub_scores(
        {"grounding": 0.8, "coverage": 0.8, "coherence": 0.6, "actionability": 0.8}
    )
    assert assessment.score == pytest.approx(0.75)
    with pytest.raises(ValidationError):
        QualityAssessment(
            score=0.9,
            sub_scores={"grounding": 0.5, "coverage": 0.5, "coherence": 0.5, "actionability": 0.5},
        )


def test_catalog_entity_resolution() -> None:
    catalog = SchemaCatalog(
        datasets=[
            DatasetInfo(
                id="research_poc",
                tables=[
                    TableInfo(
                        id="incidents",
                        row_count=3,
                        columns=[ColumnInfo(name="SeverityLevel", logical_type="integer", nullable=False)],
                    )
                ],
            )
        ]
    )
    assert catalog.has_entity("incidents")
    assert catalog.has_entity("research_poc.incidents")
    assert catalog.has_entity("incidents.severitylevel")
    assert catalog.has_entity("SeverityLevel")
    assert not catalog.has_entity("users")
    assert not catalog.has_entity("incidents.Nope")
    assert catalog.datasets[0].table_count == 1
    with pytest.raises(ValidationError):
        TableInfo(
            id="t",
            row_count=0,
            columns=[
                ColumnInfo(name="a", logical_type="string", nullable=True),
                ColumnInfo(name="a", logical_type="string", nullable=True),
            ],
        )
