"""Query understanding -> generation -> execution -> review, per subtask.

The validation node is the strict predicate: a result passes iff it has rows
and no error. A failing result goes back to the reviewer until the iteration
bound is reached; every execution is recorded in the session history.
"""

from __future__ import annotations

import json
import logging
import re
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from .backends import QueryLimits, SqlBackend
from .config import PipelineConfig, ShimConfig
from .errors import BudgetExhausted, DarError, IterationsExhausted, PreconditionFailed, SpecUngrounded
from .llm import Gateway
from .llm.schemas import QuerySpecReply, SqlReply
from .meta import describe_catalog
from .models import (
    QueryAttempt,
    QueryCandidate,
    QueryOutcome,
    SchemaCatalog,
    Subtask,
    ValidationVerdict,
)
from .session import SessionState, register_stage_type
from .shim import execute_with_ai, has_ai_calls

logger = logging.getLogger(__name__)

EMPTY_RESULT_MARKER = "EMPTY RESULT"

_QUALIFIED_RE = re.compile(r"\b([A-Za-z_][\w]*(?:\.[A-Za-z_][\w]*)+)\b")
_FENCE_RE = re.compile(r"^```(?:sql)?\s*|\s*```$", re.IGNORECASE)


@register_stage_type
class SubtaskResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    subtask_id: str
    status: Literal["passed", "failed", "skipped"]
    final_query_id: Optional[str] = None
    attempts: list[str] = Field(default_factory=list)
    last_error: str = ""
    spec: Optional[QuerySpecReply] = None

    @property
    def passed(self) -> bool:
        return self.status == "passed"


# ---------------------------------------------------------------------------
# Understanding


def spec_problems(spec: QuerySpecReply, catalog: SchemaCatalog) -> list[str]:
    problems: list[str] = []
    tables = []
    for ref in spec.tables:
        table = catalog.find_table(ref)
        if table is None:
            problems.append(f"unknown table {ref!r}")
        else:
            tables.append(table)
    for ref in spec.columns:
        if "." in ref:
            ok = catalog.has_entity(ref)
        else:
            ok = any(t.column(ref) is not None for t in tables)
        if not ok:
            problems.append(f"unknown column {ref!r}")
    for join in spec.joins:
        for ref in _QUALIFIED_RE.findall(join):
            if not catalog.has_entity(ref):
                problems.append(f"join condition {join!r} names unknown column {ref!r}")
    return problems


def understand(
    gateway: Gateway, session: SessionState, subtask: Subtask, catalog: SchemaCatalog
) -> QuerySpecReply:
    variables = {
        "subtask_id": subtask.id,
        "objective": subtask.objective,
        "referenced_tables": ", ".join(subtask.referenced_tables) or "(any)",
        "catalog": describe_catalog(catalog),
        "repair_note": "",
    }
    spec = gateway.generate_structured(session, "query_understanding", variables)
    assert isinstance(spec, QuerySpecReply)
    problems = spec_problems(spec, catalog)
    if not problems:
        return spec

    logger.warning("Spec for %s is ungrounded (%s); asking for a repair", subtask.id, "; ".join(problems))
    variables["repair_note"] = (
        "Your previous spec used names that are not in the schema: " + "; ".join(problems) + "\n"
    )
    spec = gateway.generate_structured(session, "query_understanding", variables)
    assert isinstance(spec, QuerySpecReply)
    problems = spec_problems(spec, catalog)
    if problems:
        raise SpecUngrounded(f"subtask {subtask.id}: " + "; ".join(problems))
    return spec


# ---------------------------------------------------------------------------
# Generation, validation, review


def _spec_text(spec: QuerySpecReply) -> str:
    return json.dumps(spec.model_dump(), indent=2, sort_keys=True)


def _clean_sql(text: str) -> str:
    return _FENCE_RE.sub("", text.strip()).strip()


def generate_sql(
    gateway: Gateway,
    session: SessionState,
    subtask: Subtask,
    spec: QuerySpecReply,
    catalog: SchemaCatalog,
    dialect: str,
) -> QueryCandidate:
    if not spec.tables:
        raise PreconditionFailed(f"subtask {subtask.id}: cannot generate SQL from an empty spec")
    reply = gateway.generate_structured(
        session,
        "query_generation",
        {
            "subtask_id": subtask.id,
            "objective": subtask.objective,
            "dialect": dialect,
            "spec": _spec_text(spec),
            "catalog": describe_catalog(catalog),
        },
    )
    assert isinstance(reply, SqlReply)
    sql = _clean_sql(reply.sql)
    return QueryCandidate(
        subtask_id=subtask.id,
        sql_text=sql,
        uses_ai_functions=has_ai_calls(sql, dialect),
        rationale=reply.rationale,
        revision_index=0,
    )


def validate(outcome: QueryOutcome) -> ValidationVerdict:
    if outcome.error is not None:
        return ValidationVerdict(status="FAIL", reason="execution_error")
    if not outcome.rows:
        return ValidationVerdict(status="FAIL", reason="empty_result")
    return ValidationVerdict(status="PASS", reason="ok")


def failure_text(outcome: QueryOutcome, verdict: ValidationVerdict) -> str:
    if verdict.reason == "execution_error" and outcome.error is not None:
        return f"ERROR {outcome.error.code}: {outcome.error.message}"
    return f"{EMPTY_RESULT_MARKER}: the query ran without error but returned no rows."


def review_and_revise(
    gateway: Gateway,
    session: SessionState,
    subtask: Subtask,
    spec: QuerySpecReply,
    candidate: QueryCandidate,
    outcome: QueryOutcome,
    verdict: ValidationVerdict,
    catalog: SchemaCatalog,
    dialect: str,
    *,
    max_review_iterations: int = PipelineConfig.max_review_iterations,
) -> QueryCandidate:
    if verdict.passed:
        raise PreconditionFailed("only failing queries are reviewed")
    if candidate.revision_index >= max_review_iterations:
        raise IterationsExhausted(
            f"subtask {candidate.subtask_id}: {candidate.revision_index} revisions already used "
            f"(bound {max_review_iterations})"
        )
    revision = candidate.revision_index + 1
    reply = gateway.generate_structured(
        session,
        "query_review",
        {
            "subtask_id": subtask.id,
            "revision": str(revision),
            "dialect": dialect,
            "spec": _spec_text(spec),
            "sql": candidate.sql_text,
            "failure": failure_text(outcome, verdict),
            "catalog": describe_catalog(catalog),
        },
    )
    assert isinstance(reply, SqlReply)
    session.bump_query_review()
    sql = _clean_sql(reply.sql)
    return QueryCandidate(
        subtask_id=candidate.subtask_id,
        sql_text=sql,
        uses_ai_functions=has_ai_calls(sql, dialect),
        rationale=reply.rationale,
        revision_index=revision,
    )


def run_subtask(
    gateway: Gateway,
    conn: SqlBackend,
    session: SessionState,
    subtask: Subtask,
    catalog: SchemaCatalog,
    config: PipelineConfig = PipelineConfig(),
    *,
    shim: ShimConfig = ShimConfig(),
) -> SubtaskResult:
    """Drive one subtask to a PASS or to a failure record.

    Budget exhaustion propagates; every other failure is returned as data.
    """
    limits = QueryLimits(max_rows=config.max_rows, timeout_s=config.timeout_s)
    attempts: list[str] = []
    spec: Optional[QuerySpecReply] = None
    try:
        spec = understand(gateway, session, subtask, catalog)
        candidate = generate_sql(gateway, session, subtask, spec, catalog, conn.dialect)
        while True:
            outcome = execute_with_ai(
                conn, gateway, session, candidate.sql_text, limits, fanout_width=shim.fanout_width
            )
            verdict = validate(outcome)
            session.record_attempt(QueryAttempt(candidate=candidate, outcome=outcome, verdict=verdict))
            attempts.append(candidate.query_id)
            if verdict.passed:
                logger.info("Subtask %s passed on %s (%d row(s))", subtask.id, candidate.query_id, len(outcome.rows))
                return SubtaskResult(
                    subtask_id=subtask.id,
                    status="passed",
                    final_query_id=candidate.query_id,
                    attempts=attempts,
                    spec=spec,
                )
            last_error = failure_text(outcome, verdict)
            if candidate.revision_index >= config.max_review_iterations:
                break
            candidate = review_and_revise(
                gateway,
                session,
                subtask,
                spec,
                candidate,
                outcome,
                verdict,
                catalog,
                conn.dialect,
                max_review_iterations=config.max_review_iterations,
            )
    except BudgetExhausted:
        raise
    except DarError as exc:
        logger.warning("Subtask %s failed: %s", subtask.id, exc)
        return SubtaskResult(
            subtask_id=subtask.id, status="failed", attempts=attempts, last_error=f"{exc.code}: {exc}", spec=spec
        )

    logger.warning("Subtask %s failed after %d execution(s): %s", subtask.id, len(attempts), last_error)
    return SubtaskResult(subtask_id=subtask.id, status="failed", attempts=attempts, last_error=last_error, spec=spec)


# ---------------------------------------------------------------------------
# Summaries for downstream prompts


def _sortable(values: list[Any]) -> list[Any]:
    try:
        return sorted(values)
    except TypeError:
        return sorted(values, key=str)


def result_digest(outcome: QueryOutcome) -> dict[str, dict[str, Any]]:
    """Per-column min / max / distinct count / null count."""
    digest: dict[str, dict[str, Any]] = {}
    for column in outcome.columns:
        values = [row.get(column) for row in outcome.rows]
        present = [v for v in values if v is not None]
        ordered = _sortable(present)
        digest[column] = {
            "min": ordered[0] if ordered else None,
            "max": ordered[-1] if ordered else None,
            "distinct": len({json.dumps(v, sort_keys=True, default=str) for v in present}),
            "nulls": len(values) - len(present),
        }
    return digest


def summarize_result(label: str, subtask: Subtask, attempt: QueryAttempt, row_cap: int) -> str:
    outcome = attempt.outcome
    shown = outcome.rows[:row_cap]
    lines = [
        f"[{label}] subtask {subtask.id}: {subtask.objective}",
        f"SQL: {attempt.candidate.sql_text}",
        f"rows: {len(outcome.rows)}" + (" (truncated)" if outcome.truncated else "")
        + (f", first {len(shown)} shown" if len(shown) < len(outcome.rows) else ""),
        f"columns: {', '.join(outcome.columns)}",
    ]
    lines.extend(json.dumps(row, sort_keys=False, default=str) for row in shown)
    lines.append("digest: " + json.dumps(result_digest(outcome), sort_keys=True, default=str))
    return "\n".join(lines)
