"""Per-agent JSON reply schemas and the parser that enforces them."""

from __future__ import annotations

import json
import re
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError

from ..errors import SchemaViolation
from ..models import ExpectedOutput


class IntentGoal(BaseModel):
    goal: str = Field(min_length=1)
    entities: list[str] = Field(default_factory=list)


class IntentReply(BaseModel):
    analysis_goals: list[IntentGoal] = Field(min_length=1)
    entities_of_interest: list[str] = Field(default_factory=list)
    deliverable: Literal["report"] = "report"


class PlanItem(BaseModel):
    id: str = Field(min_length=1)
    objective: str = Field(min_length=1)
    referenced_tables: list[str] = Field(default_factory=list)
    expected_output: ExpectedOutput = "table"


class PlanReply(BaseModel):
    subtasks: list[PlanItem] = Field(min_length=1)


class QuerySpecReply(BaseModel):
    tables: list[str] = Field(min_length=1)
    columns: list[str] = Field(default_factory=list)
    filters: list[str] = Field(default_factory=list)
    aggregation: str = ""
    joins: list[str] = Field(default_factory=list)


class SqlReply(BaseModel):
    sql: str = Field(min_length=1)
    rationale: str = ""


class OutlineItem(BaseModel):
    title: str = Field(min_length=1)
    intent: str = ""
    evidence_subtasks: list[str] = Field(default_factory=list)


class OutlineReply(BaseModel):
    sections: list[OutlineItem] = Field(min_length=1)


class JudgeReply(BaseModel):
    grounding: float = Field(ge=0.0, le=1.0)
    coverage: float = Field(ge=0.0, le=1.0)
    coherence: float = Field(ge=0.0, le=1.0)
    actionability: float = Field(ge=0.0, le=1.0)
    feedback: str = ""


SCHEMAS: dict[str, type[BaseModel]] = {
    "intent": IntentReply,
    "plan": PlanReply,
    "query_spec": QuerySpecReply,
    "sql": SqlReply,
    "outline": OutlineReply,
    "judge": JudgeReply,
}

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Pull the JSON body out of a reply that may wrap it in prose or fences."""
    fenced = _FENCE_RE.search(text)
    candidate = fenced.group(1) if fenced else text
    start = candidate.find("{")
    end = candidate.rfind("}")
    if start == -1 or end < start:
        raise ValueError("no JSON object found in reply")
    return json.loads(candidate[start : end + 1])


def schema_json(schema_id: str) -> str:
    return json.dumps(SCHEMAS[schema_id].model_json_schema(), indent=2, sort_keys=True)


def parse_structured(schema_id: str, text: str) -> BaseModel:
    model = SCHEMAS.get(schema_id)
    if model is None:
        raise SchemaViolation(f"unregistered schema {schema_id!r}")
    try:
        return model.model_validate(extract_json(text))
    except (ValueError, ValidationError) as exc:
        raise SchemaViolation(f"reply does not match schema {schema_id}: {exc}") from exc
