from __future__ import annotations

import json
import logging
import threading
from collections.abc import Mapping
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field, PrivateAttr, ValidationError

from .errors import BudgetExhausted, CheckpointError, InvalidBrief, PreconditionFailed
from .models import (
    QueryAttempt,
    QualityAssessment,
    ReportDraft,
    ReportOutline,
    ResearchBrief,
    ResearchPlan,
    SchemaCatalog,
)

logger = logging.getLogger(__name__)

STAGE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT = "dar-checkpoint"
CHECKPOINT_VERSION = 1

# Models that round-trip through stage variables by name.
_STAGE_TYPES: dict[str, type[BaseModel]] = {
    model.__name__: model
    for model in (
        ResearchBrief,
        ResearchPlan,
        SchemaCatalog,
        ReportOutline,
        ReportDraft,
        QualityAssessment,
    )
}


def register_stage_type(model: type[BaseModel]) -> type[BaseModel]:
    _STAGE_TYPES[model.__name__] = model
    return model


def _utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


class ConversationEntry(BaseModel):
    role: str
    content: str
    timestamp: str


class Counters(BaseModel):
    query_review_iterations: int = 0
    revision_iterations: int = 0
    llm_calls: int = 0
    sql_executions: int = 0


class SessionState(BaseModel):
    """Tiered memory for one run.

    ``conversation_log`` and ``query_history`` only grow; counters only go up.
    Mutate through the methods below, never by assigning the lists.
    """

    brief: ResearchBrief
    conversation_log: list[ConversationEntry] = Field(default_factory=list)
    query_history: list[QueryAttempt] = Field(default_factory=list)
    stage_variables: dict[str, str] = Field(default_factory=dict)
    counters: Counters = Field(default_factory=Counters)

    _lock: threading.Lock = PrivateAttr(default_factory=threading.Lock)

    @property
    def max_llm_calls(self) -> int:
        return self.brief.constraints.max_llm_calls

    def remaining_llm_calls(self) -> int:
        return max(0, self.max_llm_calls - self.counters.llm_calls)

    def log_message(self, role: str, content: str) -> None:
        with self._lock:
            self.conversation_log.append(
                ConversationEntry(role=role, content=content, timestamp=_utc_now_iso())
            )

    def record_attempt(self, attempt: QueryAttempt) -> None:
        with self._lock:
            self.query_history.append(attempt)
            self.counters.sql_executions += 1

    def reserve_llm_call(self) -> None:
        """Claim one call from the budget or fail without claiming anything."""
        with self._lock:
            if self.counters.llm_calls >= self.max_llm_calls:
                raise BudgetExhausted(
                    f"llm call budget exhausted ({self.counters.llm_calls}/{self.max_llm_calls})"
                )
            self.counters.llm_calls += 1

    def bump_query_review(self) -> None:
        with self._lock:
            self.counters.query_review_iterations += 1

    def bump_revision(self) -> None:
        with self._lock:
            self.counters.revision_iterations += 1

    def attempts_for(self, subtask_id: str) -> list[QueryAttempt]:
        return [a for a in self.query_history if a.candidate.subtask_id == subtask_id]

    def find_attempt(self, query_id: str) -> Optional[QueryAttempt]:
        for attempt in self.query_history:
            if attempt.candidate.query_id == query_id:
                return attempt
        return None


def parse_brief(data: Mapping[str, Any]) -> ResearchBrief:
    try:
        return ResearchBrief.model_validate(dict(data))
    except ValidationError as exc:
        raise InvalidBrief(f"invalid brief: {exc.errors()[0]['msg']}") from exc


def new_session(brief: ResearchBrief | Mapping[str, Any]) -> SessionState:
    if isinstance(brief, ResearchBrief):
        # Re-validate: model_construct() can bypass the validators.
        brief = parse_brief(brief.model_dump())
    else:
        brief = parse_brief(brief)
    session = SessionState(brief=brief)
    session.log_message("user", brief.objective)
    return session


def encode_stage_value(value: Any) -> str:
    if isinstance(value, BaseModel):
        type_name = type(value).__name__
        if type_name not in _STAGE_TYPES:
            raise TypeError(f"unregistered stage type {type_name}")
        data: Any = value.model_dump(mode="json")
    else:
        type_name = "json"
        data = value
    return json.dumps(
        {"dar_stage": STAGE_FORMAT_VERSION, "type": type_name, "data": data},
        sort_keys=True,
        separators=(",", ":"),
    )


def decode_stage_value(text: str) -> Any:
    doc = json.loads(text)
    if doc.get("dar_stage") != STAGE_FORMAT_VERSION:
        raise ValueError(f"unsupported stage format: {doc.get('dar_stage')!r}")
    type_name = doc["type"]
    if type_name == "json":
        return doc["data"]
    model = _STAGE_TYPES.get(type_name)
    if model is None:
        raise ValueError(f"unknown stage type {type_name!r}")
    return model.model_validate(doc["data"])


def set_stage(session: SessionState, key: str, value: Any) -> SessionState:
    if not key:
        raise PreconditionFailed("stage key must be non-empty")
    session.stage_variables[key] = encode_stage_value(value)
    return session


def get_stage(session: SessionState, key: str) -> Any:
    text = session.stage_variables.get(key)
    if text is None:
        return None
    return decode_stage_value(text)


def save_checkpoint(session: SessionState, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "session": session.model_dump(mode="json"),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
    logger.info("Checkpoint written: %s", path)


def load_checkpoint(path: Path) -> SessionState:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a dar checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        return SessionState.model_validate(doc["session"])
    except (KeyError, ValidationError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
