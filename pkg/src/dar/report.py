"""Report pipeline: outline, draft, quality gate, revision, composition.

The drafter only ever sees the outline, the validated result summaries and
the catalog. Every sentence carrying a number must cite a validated result
with an evidence marker such as ``[Q2]``; the composer turns those markers
into footnotes backed by a query appendix.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Literal, Optional

from .config import EscalationConfig
from .errors import BoundaryViolation, OutlineInvalid, PreconditionFailed, UnevidencedClaim
from .llm import Gateway
from .llm.schemas import JudgeReply, OutlineReply
from .meta import describe_catalog
from .models import (
    EVIDENCE_MARKER_RE,
    OutlineSection,
    QualityAssessment,
    QueryAttempt,
    ReportDraft,
    ReportOutline,
    ResearchPlan,
    SchemaCatalog,
    Subtask,
)
from .session import SessionState
from .sql_pipeline import SubtaskResult, result_digest, summarize_result

logger = logging.getLogger(__name__)

DEFAULT_SKELETON = (
    ("Executive Summary", "The headline findings in a few sentences."),
    ("Data Overview", "What data was examined and how complete it is."),
    ("Patterns & Trends", "Recurring structure over time, place and category."),
    ("Anomalies", "Spikes, outliers and unexpected concentrations."),
    ("Recommendations", "Concrete actions that follow from the findings."),
)

# The drafting template may see these and nothing else.
DRAFT_INPUTS = frozenset({"outline", "results", "catalog", "lint_feedback"})

Decision = Literal["proceed", "revise", "forced_proceed"]

_SPELLED_FRACTIONS = (
    "half",
    "halves",
    "third",
    "thirds",
    "quarter",
    "quarters",
    "fifth",
    "fifths",
    "tenth",
    "tenths",
    "percent",
    "twice",
    "double",
    "triple",
)
_NUMERAL_RE = re.compile(r"(?<![A-Za-z_#^])\d|\b(?:" + "|".join(_SPELLED_FRACTIONS) + r")\b", re.IGNORECASE)
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")
_HEADING_RE = re.compile(r"^(#{1,6})\s+(.*?)\s*$")


@dataclass(frozen=True)
class Evidence:
    label: str
    subtask: Subtask
    attempt: QueryAttempt

    @property
    def query_id(self) -> str:
        return self.attempt.candidate.query_id


def collect_evidence(
    session: SessionState, plan: ResearchPlan, results: Sequence[SubtaskResult]
) -> list[Evidence]:
    """Validated results in plan order, labelled Q1, Q2, ..."""
    by_subtask = {r.subtask_id: r for r in results}
    evidence: list[Evidence] = []
    for subtask in plan.subtasks:
        result = by_subtask.get(subtask.id)
        if result is None or not result.passed or result.final_query_id is None:
            continue
        attempt = session.find_attempt(result.final_query_id)
        if attempt is None or not attempt.verdict.passed:
            continue
        evidence.append(Evidence(label=f"Q{len(evidence) + 1}", subtask=subtask, attempt=attempt))
    return evidence


def evidence_index(evidence: Sequence[Evidence]) -> dict[str, str]:
    return {e.label: e.query_id for e in evidence}


def results_text(evidence: Sequence[Evidence], row_cap: int) -> str:
    return "\n\n".join(summarize_result(e.label, e.subtask, e.attempt, row_cap) for e in evidence)


# ---------------------------------------------------------------------------
# Structure


def _outline_problems(outline: OutlineReply, plan: ResearchPlan) -> list[str]:
    problems: list[str] = []
    if len(outline.sections) < 3:
        problems.append(f"outline has {len(outline.sections)} sections; at least 3 are required")
    for section in outline.sections:
        for sid in section.evidence_subtasks:
            if plan.subtask(sid) is None:
                problems.append(f"section {section.title!r} cites unknown subtask {sid!r}")
    return problems


def plan_structure(
    gateway: Gateway, session: SessionState, plan: ResearchPlan, evidence: Sequence[Evidence]
) -> ReportOutline:
    if not evidence:
        raise PreconditionFailed("an outline needs at least one validated result")
    variables = {
        "objective": session.brief.objective,
        "results": "\n".join(f"{e.subtask.id}: {e.subtask.objective}" for e in evidence),
        "skeleton": "\n".join(f"- {title}: {intent}" for title, intent in DEFAULT_SKELETON),
        "repair_note": "",
    }
    reply = gateway.generate_structured(session, "structure_planner", variables)
    assert isinstance(reply, OutlineReply)
    problems = _outline_problems(reply, plan)
    if problems:
        logger.warning("Outline rejected (%s); asking for a repair", "; ".join(problems))
        variables["repair_note"] = "Your previous outline was rejected: " + "; ".join(problems) + "\n"
        reply = gateway.generate_structured(session, "structure_planner", variables)
        assert isinstance(reply, OutlineReply)
        problems = _outline_problems(reply, plan)
        if problems:
            raise OutlineInvalid("; ".join(problems))
    return ReportOutline(
        sections=[
            OutlineSection(title=s.title.strip(), intent=s.intent, evidence_subtasks=list(s.evidence_subtasks))
            for s in reply.sections
        ]
    )


def outline_text(outline: ReportOutline, evidence: Sequence[Evidence]) -> str:
    labels = {e.subtask.id: e.label for e in evidence}
    lines = []
    for n, section in enumerate(outline.sections, start=1):
        cited = [f"{labels[s]} ({s})" for s in section.evidence_subtasks if s in labels]
        line = f"{n}. {section.title}: {section.intent}"
        if cited:
            line += f" [evidence: {', '.join(cited)}]"
        lines.append(line)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Evidence lint


def _body_sentences(markdown: str) -> list[str]:
    sentences: list[str] = []
    in_fence = False
    for line in markdown.splitlines():
        stripped = line.strip()
        if stripped.startswith("```"):
            in_fence = not in_fence
            continue
        if in_fence or not stripped or _HEADING_RE.match(stripped):
            continue
        sentences.extend(s for s in _SENTENCE_SPLIT_RE.split(stripped) if s)
    return sentences


def lint_evidence(markdown: str, index: dict[str, str]) -> list[str]:
    """Sentences that carry a numeral without a resolvable marker, or cite an unknown one."""
    offending: list[str] = []
    for sentence in _body_sentences(markdown):
        markers = EVIDENCE_MARKER_RE.findall(sentence)
        unresolved = [m for m in markers if m not in index]
        has_numeral = _NUMERAL_RE.search(EVIDENCE_MARKER_RE.sub(" ", sentence)) is not None
        if unresolved or (has_numeral and not markers):
            offending.append(sentence)
    return offending


def _lint_feedback(offending: Sequence[str], index: dict[str, str]) -> str:
    labels = ", ".join(f"[{k}]" for k in index)
    lines = [
        "LINT FEEDBACK: the sentences below contain numbers without a valid citation.",
        f"Cite one of {labels} in each, or remove the number.",
    ]
    lines.extend(f"- {s}" for s in offending)
    return "\n".join(lines) + "\n"


def _linted_markdown(
    gateway: Gateway, session: SessionState, template_id: str, variables: dict[str, str], index: dict[str, str]
) -> str:
    text = gateway.generate_text(session, template_id, variables).strip()
    offending = lint_evidence(text, index)
    if not offending:
        return text
    logger.warning("%d sentence(s) lack evidence; asking for a repaired draft", len(offending))
    variables = dict(variables, lint_feedback=_lint_feedback(offending, index))
    text = gateway.generate_text(session, template_id, variables).strip()
    offending = lint_evidence(text, index)
    if offending:
        raise UnevidencedClaim(f"{len(offending)} sentence(s) still lack evidence", offending)
    return text


# ---------------------------------------------------------------------------
# Draft, judge, gate, revise


def draft_variables(
    outline: ReportOutline, evidence: Sequence[Evidence], catalog: SchemaCatalog, row_cap: int
) -> dict[str, str]:
    return {
        "outline": outline_text(outline, evidence),
        "results": results_text(evidence, row_cap),
        "catalog": describe_catalog(catalog),
        "lint_feedback": "",
    }


def draft(
    gateway: Gateway,
    session: SessionState,
    outline: ReportOutline,
    evidence: Sequence[Evidence],
    catalog: SchemaCatalog,
    *,
    row_cap: int = 50,
) -> ReportDraft:
    if not evidence:
        raise PreconditionFailed("drafting needs at least one validated result")
    extra = gateway.library.variables("scratch_research") - DRAFT_INPUTS
    if extra:
        raise BoundaryViolation(f"drafting template reads inputs outside its boundary: {sorted(extra)}")
    index = evidence_index(evidence)
    variables = draft_variables(outline, evidence, catalog, row_cap)
    markdown = _linted_markdown(gateway, session, "scratch_research", variables, index)
    return ReportDraft(markdown=markdown, evidence_index=index, revision_index=0)


def assess_quality(gateway: Gateway, session: SessionState, report: ReportDraft) -> QualityAssessment:
    if not report.markdown.strip():
        raise PreconditionFailed("cannot assess an empty draft")
    reply = gateway.generate_structured(
        session, "quality_judge", {"revision": str(report.revision_index), "draft": report.markdown}
    )
    assert isinstance(reply, JudgeReply)
    assessment = QualityAssessment.from_sub_scores(reply.model_dump(exclude={"feedback"}), reply.feedback)
    logger.info("Quality of revision %d: %.3f", report.revision_index, assessment.score)
    return assessment


def escalation_route(assessment: QualityAssessment, config: EscalationConfig, revision_index: int) -> Decision:
    if assessment.score >= config.theta:
        return "proceed"
    if revision_index < config.max_revisions:
        return "revise"
    return "forced_proceed"


def revise(
    gateway: Gateway,
    session: SessionState,
    report: ReportDraft,
    assessment: QualityAssessment,
    evidence: Sequence[Evidence],
    config: EscalationConfig = EscalationConfig(),
    *,
    row_cap: int = 50,
) -> ReportDraft:
    if report.revision_index >= config.max_revisions:
        raise PreconditionFailed(
            f"revision bound reached ({report.revision_index}/{config.max_revisions}); the gate must not revise"
        )
    revision = report.revision_index + 1
    variables = {
        "revision": str(revision),
        "feedback": assessment.feedback,
        "results": results_text(evidence, row_cap),
        "draft": report.markdown,
        "lint_feedback": "",
    }
    session.bump_revision()
    markdown = _linted_markdown(gateway, session, "revision", variables, report.evidence_index)
    return ReportDraft(markdown=markdown, evidence_index=dict(report.evidence_index), revision_index=revision)


# ---------------------------------------------------------------------------
# Composition


def metadata_header(fields: dict[str, Any]) -> str:
    lines = ["```dar-report"]
    for key, value in fields.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = f"{value:.3f}"
        elif value is None:
            text = "none"
        else:
            text = str(value)
        lines.append(f"{key}: {text}")
    lines.append("```")
    return "\n".join(lines)


def _split_sections(markdown: str) -> tuple[list[str], list[tuple[str, list[str]]]]:
    preamble: list[str] = []
    sections: list[tuple[str, list[str]]] = []
    for line in markdown.splitlines():
        match = _HEADING_RE.match(line)
        if match and len(match.group(1)) == 2:
            sections.append((match.group(2), []))
        elif match and len(match.group(1)) == 1 and not sections:
            continue  # the composer writes its own title
        elif sections:
            sections[-1][1].append(line)
        else:
            preamble.append(line)
    return preamble, sections


def _trimmed(lines: list[str]) -> list[str]:
    while lines and not lines[0].strip():
        lines = lines[1:]
    while lines and not lines[-1].strip():
        lines = lines[:-1]
    return lines


def _footnote_order(markdown: str) -> list[str]:
    order: list[str] = []
    for marker in EVIDENCE_MARKER_RE.findall(markdown):
        if marker not in order:
            order.append(marker)
    return order


def _appendix_entry(number: int, label: str, evidence: Evidence) -> list[str]:
    outcome = evidence.attempt.outcome
    lines = [
        f"### [{number}] {label}: query {evidence.query_id}",
        "",
        f"Subtask {evidence.subtask.id}: {evidence.subtask.objective}",
        "",
        f"Rows: {len(outcome.rows)}{' (truncated)' if outcome.truncated else ''}. "
        f"Verdict: {evidence.attempt.verdict.status}. Cost: {outcome.cost:.6f}.",
        "",
        "```sql",
        evidence.attempt.candidate.sql_text,
        "```",
        "",
        "| column | min | max | distinct | nulls |",
        "| --- | --- | --- | --- | --- |",
    ]
    for column, stats in result_digest(outcome).items():
        cells = [column] + [str(stats[k]).replace("|", "\\|") for k in ("min", "max", "distinct", "nulls")]
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def compose(
    session: SessionState,
    report: ReportDraft,
    outline: ReportOutline,
    header: dict[str, Any],
    evidence: Sequence[Evidence],
    *,
    skipped: Sequence[SubtaskResult] = (),
) -> str:
    """Render the final Markdown document."""
    by_label = {e.label: e for e in evidence}
    preamble, drafted = _split_sections(report.markdown)
    remaining = list(drafted)

    ordered: list[tuple[str, list[str]]] = []
    for section in outline.sections:
        match = next((s for s in remaining if s[0].strip().lower() == section.title.lower()), None)
        if match is not None:
            remaining.remove(match)
            ordered.append((section.title, list(match[1])))
        else:
            ordered.append((section.title, ["_No findings were drafted for this section._"]))
    ordered.extend(remaining)

    if skipped:
        note = ["", "Subtasks skipped because no query passed validation:", ""]
        # No counts here: body sentences with numerals must carry evidence.
        for result in skipped:
            note.append(f"- `{result.subtask_id}`: {result.status}; attempts are listed in the checkpoint")
        target = next((s for s in ordered if s[0].strip().lower() == "data overview"), None)
        if target is None:
            target = ("Data Overview", [])
            ordered.insert(min(1, len(ordered)), target)
        target[1].extend(note)

    body_parts: list[str] = []
    if _trimmed(preamble):
        body_parts.append("\n".join(_trimmed(preamble)))
    for title, lines in ordered:
        body_parts.append(f"## {title}\n\n" + "\n".join(_trimmed(lines)))
    body = "\n\n".join(body_parts)

    order = _footnote_order(body)
    numbers = {label: n for n, label in enumerate(order, start=1)}
    body = EVIDENCE_MARKER_RE.sub(lambda m: f"[^{numbers[m.group(1)]}]", body)

    title = session.brief.objective.strip().splitlines()[0]
    parts = [f"# Research Report: {title}", metadata_header(header), body]
    if order:
        appendix = ["## Query Appendix", ""]
        for label in order:
            appendix.extend(_appendix_entry(numbers[label], label, by_label[label]))
            appendix.append("")
        parts.append("\n".join(appendix).rstrip())
        footnotes = [
            f"[^{numbers[label]}]: {label}, query {by_label[label].query_id}, "
            f"{len(by_label[label].attempt.outcome.rows)} rows; see Query Appendix entry [{numbers[label]}]."
            for label in order
        ]
        parts.append("\n".join(footnotes))
    return "\n\n".join(parts) + "\n"


def compose_failure(
    session: SessionState,
    plan: Optional[ResearchPlan],
    results: Sequence[SubtaskResult],
    header: dict[str, Any],
    reason: str,
) -> str:
    """Structured report for runs that produced no usable evidence."""
    title = session.brief.objective.strip().splitlines()[0]
    lines = [
        f"# Research Report: {title}",
        "",
        metadata_header(header),
        "",
        "## Outcome",
        "",
        reason,
        "",
        "## Subtasks",
        "",
    ]
    by_id = {r.subtask_id: r for r in results}
    subtasks = plan.subtasks if plan is not None else []
    if not subtasks:
        lines.append("_No plan was produced._")
    for subtask in subtasks:
        result = by_id.get(subtask.id)
        attempts = session.attempts_for(subtask.id)
        lines.append(f"### {subtask.id}: {subtask.objective}")
        lines.append("")
        lines.append(f"- status: {result.status if result else 'not run'}")
        lines.append(f"- attempts: {len(attempts)}")
        for attempt in attempts:
            verdict = attempt.verdict
            error = attempt.outcome.error
            detail = f"{error.code}: {error.message}" if error else verdict.reason
            lines.append(f"  - {attempt.candidate.query_id} {verdict.status} ({detail})")
        lines.append(f"- last error: {result.last_error if result and result.last_error else 'none'}")
        lines.append("")
    counters = session.counters
    lines.extend(
        [
            "## Budget",
            "",
            f"- llm calls: {counters.llm_calls} of {session.max_llm_calls}",
            f"- sql executions: {counters.sql_executions}",
        ]
    )
    return "\n".join(lines).rstrip() + "\n"
