"""Top-level run: Initialization -> Execution -> Synthesis.

Each phase ends with a checkpoint. A resumed run skips the phases its
checkpoint already completed and continues with the same session, so a
scripted replay produces the same report whether or not it was interrupted.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict

from .backends import SqlBackend, open_backend
from .config import Config
from .errors import BudgetExhausted, DarError, InvalidBrief, UnevidencedClaim
from .initiator import generate_plan, infer_intent
from .llm import Gateway, open_gateway
from .meta import build_catalog
from .models import (
    Constraints,
    QualityAssessment,
    ReportDraft,
    ReportOutline,
    ResearchBrief,
    ResearchPlan,
    SchemaCatalog,
)
from .report import (
    Evidence,
    assess_quality,
    collect_evidence,
    compose,
    compose_failure,
    draft,
    escalation_route,
    plan_structure,
    revise,
)
from .session import SessionState, get_stage, load_checkpoint, new_session, parse_brief, save_checkpoint, set_stage
from .sql_pipeline import SubtaskResult, run_subtask

logger = logging.getLogger(__name__)

Phase = Literal["initialization", "execution", "synthesis"]
PHASES: tuple[Phase, ...] = ("initialization", "execution", "synthesis")

RunStatus = Literal["ok", "below_threshold", "failed", "budget_exhausted", "dry_run", "stopped"]

REPORT_FILE = "report.md"
METRICS_FILE = "metrics.json"
CHECKPOINT_FILE = "checkpoint.json"

# Stage variable keys.
K_PHASE = "run.phase_completed"
K_CATALOG = "catalog"
K_INTENT = "intent"
K_PLAN = "plan"
K_RESULT = "result:{}"
K_ANALYSIS_S = "timing.analysis_s"
K_REPORT_S = "timing.report_s"
K_STATUS = "run.status"
K_FAILURE = "run.failure"
K_QUALITY = "report.quality_score"
K_BELOW = "report.below_threshold"
K_REPORT_REVISIONS = "report.revisions"


class RunMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    analysis_time_s: float = 0.0
    report_time_s: float = 0.0
    total_time_s: float = 0.0
    llm_calls: int = 0
    sql_executions: int = 0
    revisions: int = 0
    query_revisions: int = 0
    report_revisions: int = 0
    quality_score: Optional[float] = None
    below_threshold: bool = False
    total_cost: float = 0.0
    status: str = "ok"


@dataclass
class RunResult:
    report: str
    metrics: RunMetrics
    session: SessionState
    plan: Optional[ResearchPlan] = None

    @property
    def status(self) -> str:
        return self.metrics.status


def brief_from_text(text: str, config: Config) -> ResearchBrief:
    """A brief file is either a JSON brief document or plain objective text."""
    constraints = {
        "max_llm_calls": config.budget.max_llm_calls,
        "max_query_cost": config.budget.max_query_cost,
        "max_wall_time": config.budget.max_wall_time,
    }
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise InvalidBrief(f"brief looks like JSON but does not parse: {exc}") from exc
        doc.setdefault("target_scope", list(config.scope))
        doc["constraints"] = {**constraints, **(doc.get("constraints") or {})}
        return parse_brief(doc)
    return parse_brief({"objective": stripped, "target_scope": list(config.scope), "constraints": constraints})


def _stage_float(session: SessionState, key: str) -> float:
    value = get_stage(session, key)
    return float(value) if value is not None else 0.0


def total_cost(session: SessionState) -> float:
    return session.counters.llm_calls + sum(a.outcome.cost for a in session.query_history)


def metrics(session: SessionState) -> RunMetrics:
    analysis = _stage_float(session, K_ANALYSIS_S)
    report = _stage_float(session, K_REPORT_S)
    report_revisions = int(get_stage(session, K_REPORT_REVISIONS) or 0)
    query_revisions = session.counters.query_review_iterations
    quality = get_stage(session, K_QUALITY)
    return RunMetrics(
        analysis_time_s=analysis,
        report_time_s=report,
        total_time_s=analysis + report,
        llm_calls=session.counters.llm_calls,
        sql_executions=session.counters.sql_executions,
        revisions=query_revisions + report_revisions,
        query_revisions=query_revisions,
        report_revisions=report_revisions,
        quality_score=float(quality) if quality is not None else None,
        below_threshold=bool(get_stage(session, K_BELOW) or False),
        total_cost=round(total_cost(session), 9),
        status=str(get_stage(session, K_STATUS) or "ok"),
    )


def _completed(session: SessionState) -> int:
    phase = get_stage(session, K_PHASE)
    return PHASES.index(phase) + 1 if phase in PHASES else 0


class _Run:
    """State of one invocation; the session carries everything that must survive a restart."""

    def __init__(
        self,
        session: SessionState,
        config: Config,
        gateway: Gateway,
        backend: SqlBackend,
        out_dir: Path,
        clock: Callable[[], float],
    ) -> None:
        self.session = session
        self.config = config
        self.gateway = gateway
        self.backend = backend
        self.out_dir = out_dir
        self.clock = clock
        self.started = clock()
        self._lock = threading.Lock()
        self._exhausted: Optional[str] = None

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_FILE

    def finish_phase(self, phase: Phase) -> None:
        set_stage(self.session, K_PHASE, phase)
        save_checkpoint(self.session, self.checkpoint_path)
        logger.info("Phase %s complete", phase)

    def fail(self, status: RunStatus, reason: str) -> None:
        set_stage(self.session, K_STATUS, status)
        set_stage(self.session, K_FAILURE, reason)
        logger.warning("Run degraded to a failure report (%s): %s", status, reason)

    # -- Initialization ---------------------------------------------------

    def initialize(self) -> None:
        session = self.session
        scope = list(session.brief.target_scope) or None
        catalog = build_catalog(self.backend, scope)
        set_stage(session, K_CATALOG, catalog)
        try:
            intent = infer_intent(self.gateway, session, session.brief, catalog)
            set_stage(session, K_INTENT, intent)
            plan = generate_plan(
                self.gateway, session, intent, catalog, session.brief.constraints, bounds=self.config.plan
            )
            set_stage(session, K_PLAN, plan)
        except BudgetExhausted as exc:
            self.fail("budget_exhausted", str(exc))
        except DarError as exc:
            self.fail("failed", f"planning failed: {exc}")

    # -- Execution --------------------------------------------------------

    def _limit_note(self) -> Optional[str]:
        constraints: Constraints = self.session.brief.constraints
        if constraints.max_query_cost > 0 and total_cost(self.session) >= constraints.max_query_cost:
            return "cost_budget_exhausted"
        if constraints.max_wall_time > 0 and self.clock() - self.started >= constraints.max_wall_time:
            return "wall_time_exhausted"
        return None

    def _run_one(self, plan_catalog: tuple[ResearchPlan, SchemaCatalog], subtask_id: str) -> SubtaskResult:
        plan, catalog = plan_catalog
        subtask = plan.subtask(subtask_id)
        assert subtask is not None
        return run_subtask(
            self.gateway, self.backend, self.session, subtask, catalog, self.config.pipeline, shim=self.config.shim
        )

    def _attempt(self, plan_catalog: tuple[ResearchPlan, SchemaCatalog], subtask_id: str) -> SubtaskResult:
        note = self._exhausted or self._limit_note()
        if note is not None:
            logger.warning("Skipping subtask %s: %s", subtask_id, note)
            return SubtaskResult(subtask_id=subtask_id, status="skipped", last_error=note)
        try:
            return self._run_one(plan_catalog, subtask_id)
        except BudgetExhausted as exc:
            reason = f"llm_budget_exhausted: {exc}"
            with self._lock:
                if self._exhausted is None:
                    self._exhausted = reason
            return SubtaskResult(
                subtask_id=subtask_id,
                status="skipped",
                attempts=[a.candidate.query_id for a in self.session.attempts_for(subtask_id)],
                last_error=reason,
            )

    def execute(self) -> None:
        session = self.session
        plan = get_stage(session, K_PLAN)
        catalog = get_stage(session, K_CATALOG)
        if plan is None or catalog is None:
            return
        pending = [s.id for s in plan.subtasks if get_stage(session, K_RESULT.format(s.id)) is None]

        if self.config.pipeline.concurrent_subtasks and len(pending) > 1:
            # Limits are checked when a worker picks a subtask up; results are
            # recorded in plan order.
            with ThreadPoolExecutor(max_workers=min(4, len(pending))) as pool:
                futures = {sid: pool.submit(self._attempt, (plan, catalog), sid) for sid in pending}
                for sid in pending:
                    set_stage(session, K_RESULT.format(sid), futures[sid].result())
        else:
            for sid in pending:
                set_stage(session, K_RESULT.format(sid), self._attempt((plan, catalog), sid))

        if self._exhausted is not None:
            set_stage(session, K_STATUS, "budget_exhausted")

    def results(self, plan: ResearchPlan) -> list[SubtaskResult]:
        out: list[SubtaskResult] = []
        for subtask in plan.subtasks:
            value = get_stage(self.session, K_RESULT.format(subtask.id))
            if value is not None:
                out.append(value)
        return out

    # -- Synthesis --------------------------------------------------------

    def synthesize(self, plan: ResearchPlan, evidence: Sequence[Evidence]) -> tuple[Optional[ReportOutline], Optional[ReportDraft]]:
        session = self.session
        catalog = get_stage(session, K_CATALOG)
        escalation = self.config.report
        row_cap = self.config.pipeline.result_summary_row_cap
        outline: Optional[ReportOutline] = None
        current: Optional[ReportDraft] = None
        below = False
        try:
            outline = plan_structure(self.gateway, session, plan, evidence)
            current = draft(self.gateway, session, outline, evidence, catalog, row_cap=row_cap)
            while True:
                assessment: QualityAssessment = assess_quality(self.gateway, session, current)
                set_stage(session, K_QUALITY, assessment.score)
                decision = escalation_route(assessment, escalation, current.revision_index)
                logger.info("Escalation decision at revision %d: %s", current.revision_index, decision)
                if decision == "proceed":
                    break
                if decision == "forced_proceed":
                    below = True
                    break
                try:
                    current = revise(self.gateway, session, current, assessment, evidence, escalation, row_cap=row_cap)
                except UnevidencedClaim as exc:
                    logger.warning("Revision rejected by the evidence lint (%s); keeping the previous draft", exc)
                    below = True
                    break
        except BudgetExhausted as exc:
            set_stage(session, K_STATUS, "budget_exhausted")
            set_stage(session, K_FAILURE, str(exc))
            below = True
        except DarError as exc:
            logger.warning("Synthesis stopped early: %s", exc)
            set_stage(session, K_FAILURE, f"synthesis stopped early: {exc}")
            below = True

        set_stage(session, K_BELOW, below)
        set_stage(session, K_REPORT_REVISIONS, current.revision_index if current is not None else 0)
        if current is not None and get_stage(session, K_STATUS) is None:
            set_stage(session, K_STATUS, "below_threshold" if below else "ok")
        return outline, current


def _header(session: SessionState, result_metrics: RunMetrics, generated_at: str) -> dict[str, object]:
    return {
        "generated_at": generated_at,
        "status": result_metrics.status,
        "below_threshold": result_metrics.below_threshold,
        "quality_score": result_metrics.quality_score,
        "report_revisions": result_metrics.report_revisions,
        "query_revisions": result_metrics.query_revisions,
        "analysis_time_s": result_metrics.analysis_time_s,
        "report_time_s": result_metrics.report_time_s,
        "total_time_s": result_metrics.total_time_s,
        "llm_calls": result_metrics.llm_calls,
        "sql_executions": result_metrics.sql_executions,
        "total_cost": result_metrics.total_cost,
    }


def write_outputs(out_dir: Path, report: str, run_metrics: RunMetrics) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / REPORT_FILE).write_text(report, encoding="utf-8")
    (out_dir / METRICS_FILE).write_text(
        json.dumps(run_metrics.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def run_research(
    brief: ResearchBrief,
    config: Config,
    *,
    out_dir: Path,
    gateway: Optional[Gateway] = None,
    backend: Optional[SqlBackend] = None,
    clock: Callable[[], float] = time.time,
    resume: bool = False,
    dry_run: bool = False,
    stop_after: Optional[Phase] = None,
) -> RunResult:
    """Run one autonomous research session and write its artifacts to ``out_dir``.

    Connection and configuration failures raise; everything after that ends
    in a report, possibly a structured failure report.
    """
    checkpoint = out_dir / CHECKPOINT_FILE
    if resume and checkpoint.exists():
        session = load_checkpoint(checkpoint)
        logger.info("Resuming from %s (completed: %s)", checkpoint, get_stage(session, K_PHASE))
    else:
        session = new_session(brief)

    owns_gateway = gateway is None
    gateway = gateway if gateway is not None else open_gateway(config.provider)
    owns_backend = backend is None
    try:
        backend = backend if backend is not None else open_backend(config.connection)
    except DarError:
        if owns_gateway:
            gateway.close()
        raise
    if dry_run:
        stop_after = "initialization"

    run = _Run(session, config, gateway, backend, out_dir, clock)
    try:
        done = _completed(session)
        if done >= len(PHASES):
            report_path = out_dir / REPORT_FILE
            logger.info("Checkpoint %s is already complete; nothing to resume", checkpoint)
            report = report_path.read_text(encoding="utf-8") if report_path.exists() else ""
            return RunResult(report=report, metrics=metrics(session), session=session, plan=get_stage(session, K_PLAN))
        if done < 1:
            t0 = clock()
            run.initialize()
            set_stage(session, K_ANALYSIS_S, clock() - t0)
            run.finish_phase("initialization")
        plan: Optional[ResearchPlan] = get_stage(session, K_PLAN)
        if stop_after == "initialization":
            if get_stage(session, K_STATUS) is None:
                set_stage(session, K_STATUS, "dry_run" if dry_run else "stopped")
            return RunResult(report="", metrics=metrics(session), session=session, plan=plan)

        if done < 2:
            t0 = clock()
            run.execute()
            set_stage(session, K_ANALYSIS_S, _stage_float(session, K_ANALYSIS_S) + (clock() - t0))
            run.finish_phase("execution")
        if stop_after == "execution":
            return RunResult(report="", metrics=metrics(session), session=session, plan=plan)

        t0 = clock()
        results = run.results(plan) if plan is not None else []
        evidence = collect_evidence(session, plan, results) if plan is not None else []
        outline: Optional[ReportOutline] = None
        final_draft: Optional[ReportDraft] = None
        if plan is not None and evidence:
            outline, final_draft = run.synthesize(plan, evidence)
        elif get_stage(session, K_STATUS) is None:
            run.fail("failed", "No subtask produced a validated result.")
        elif get_stage(session, K_FAILURE) is None:
            set_stage(session, K_FAILURE, "The LLM call budget ran out before any query passed validation.")
        set_stage(session, K_REPORT_S, clock() - t0)

        run_metrics = metrics(session)
        generated_at = datetime.fromtimestamp(clock(), timezone.utc).isoformat(timespec="seconds")
        header = _header(session, run_metrics, generated_at)
        if outline is not None and final_draft is not None:
            skipped = [r for r in results if not r.passed]
            report = compose(session, final_draft, outline, header, evidence, skipped=skipped)
        else:
            report = compose_failure(session, plan, results, header, str(get_stage(session, K_FAILURE) or ""))
        run.finish_phase("synthesis")
        write_outputs(out_dir, report, run_metrics)
        logger.info("Run finished with status %s", run_metrics.status)
        return RunResult(report=report, metrics=run_metrics, session=session, plan=plan)
    finally:
        if owns_backend:
            backend.close()
        if owns_gateway:
            gateway.close()
