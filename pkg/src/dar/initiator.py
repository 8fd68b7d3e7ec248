"""Research initiator: brief -> grounded intent -> research plan."""

from __future__ import annotations

import json
import logging

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .config import PlanConfig
from .errors import PlanInvalid, PreconditionFailed
from .llm import Gateway
from .llm.schemas import IntentGoal, IntentReply, PlanReply
from .meta import describe_catalog
from .models import Constraints, ResearchBrief, ResearchPlan, SchemaCatalog, Subtask
from .session import SessionState, register_stage_type

logger = logging.getLogger(__name__)


@register_stage_type
class ResearchIntent(BaseModel):
    model_config = ConfigDict(frozen=True)

    analysis_goals: list[IntentGoal] = Field(default_factory=list)
    entities_of_interest: list[str] = Field(default_factory=list)
    deliverable: str = "report"
    dropped_goals: list[str] = Field(default_factory=list)


def infer_intent(
    gateway: Gateway, session: SessionState, brief: ResearchBrief, catalog: SchemaCatalog
) -> ResearchIntent:
    reply = gateway.generate_structured(
        session, "intent", {"objective": brief.objective, "catalog": describe_catalog(catalog)}
    )
    assert isinstance(reply, IntentReply)

    grounded: list[IntentGoal] = []
    dropped: list[str] = []
    for goal in reply.analysis_goals:
        if any(catalog.has_entity(e) for e in goal.entities):
            grounded.append(goal)
        else:
            logger.warning("Dropping ungrounded goal %r (entities %s)", goal.goal, goal.entities)
            dropped.append(goal.goal)
    entities = [e for e in reply.entities_of_interest if catalog.has_entity(e)]
    return ResearchIntent(
        analysis_goals=grounded,
        entities_of_interest=entities,
        deliverable=reply.deliverable,
        dropped_goals=dropped,
    )


def _goals_text(intent: ResearchIntent) -> str:
    if not intent.analysis_goals:
        return "(no grounded goals; plan directly from the brief)"
    return "\n".join(f"- {g.goal} [{', '.join(g.entities)}]" for g in intent.analysis_goals)


def _constraints_text(constraints: Constraints) -> str:
    def limit(value: float) -> str:
        return f"{value:g}" if value > 0 else "0 (unlimited)"

    return (
        f"max_llm_calls: {constraints.max_llm_calls}\n"
        f"max_query_cost: {limit(constraints.max_query_cost)}\n"
        f"max_wall_time_s: {limit(constraints.max_wall_time)}"
    )


def check_plan(reply: PlanReply, catalog: SchemaCatalog, bounds: PlanConfig) -> ResearchPlan:
    """Machine-check an LLM plan; raise PlanInvalid naming the first problem."""
    count = len(reply.subtasks)
    if not bounds.min_subtasks <= count <= bounds.max_subtasks:
        raise PlanInvalid(
            f"plan has {count} subtasks; between {bounds.min_subtasks} and {bounds.max_subtasks} are required"
        )
    try:
        plan = ResearchPlan(
            subtasks=[Subtask.model_validate(item.model_dump()) for item in reply.subtasks],
            budget_allocation={item.id.strip(): 1.0 / count for item in reply.subtasks},
        )
    except ValidationError as exc:
        raise PlanInvalid(f"plan violates its invariants: {exc.errors()[0]['msg']}") from exc
    missing = plan.unknown_tables(catalog)
    if missing:
        raise PlanInvalid(f"plan references unknown tables: {', '.join(missing)}")
    return plan


def generate_plan(
    gateway: Gateway,
    session: SessionState,
    intent: ResearchIntent,
    catalog: SchemaCatalog,
    constraints: Constraints,
    *,
    bounds: PlanConfig = PlanConfig(),
) -> ResearchPlan:
    if catalog.is_empty():
        raise PreconditionFailed("cannot plan against an empty catalog")

    variables = {
        "objective": session.brief.objective,
        "goals": _goals_text(intent),
        "catalog": describe_catalog(catalog),
        "constraints": _constraints_text(constraints),
        "min_subtasks": str(bounds.min_subtasks),
        "max_subtasks": str(bounds.max_subtasks),
        "repair_note": "",
    }
    reply = gateway.generate_structured(session, "plan", variables)
    assert isinstance(reply, PlanReply)
    try:
        plan = check_plan(reply, catalog, bounds)
    except PlanInvalid as first:
        logger.warning("Plan rejected (%s); asking for a repaired plan", first)
        variables["repair_note"] = (
            f"Your previous plan was rejected: {first}\n"
            f"Previous plan: {json.dumps(reply.model_dump(), sort_keys=True)}\n"
        )
        reply = gateway.generate_structured(session, "plan", variables)
        assert isinstance(reply, PlanReply)
        plan = check_plan(reply, catalog, bounds)

    logger.info("Plan accepted with %d subtask(s): %s", len(plan.subtasks), [s.id for s in plan.subtasks])
    return plan
