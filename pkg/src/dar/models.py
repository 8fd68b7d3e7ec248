"""Domain types shared by every layer of a research run.

Value types are frozen pydantic models; their validators enforce the
invariants the rest of the package relies on, so an instance that exists is
an instance that holds.
"""

from __future__ import annotations

import math
import re
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

LogicalType = Literal["string", "integer", "float", "boolean", "timestamp", "geo_point"]
ExpectedOutput = Literal["table", "scalar", "classification", "narrative"]

EVIDENCE_MARKER_RE = re.compile(r"\[(Q\d+)\]")

QUALITY_DIMENSIONS = ("grounding", "coverage", "coherence", "actionability")


def _unique(values: list[str], what: str) -> None:
    seen: set[str] = set()
    for value in values:
        if value in seen:
            raise ValueError(f"duplicate {what}: {value!r}")
        seen.add(value)


# ---------------------------------------------------------------------------
# Brief


class Constraints(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_query_cost: float = Field(default=0.0, ge=0)
    max_wall_time: float = Field(default=0.0, ge=0)
    max_llm_calls: int = Field(default=200, ge=1)

    @field_validator("max_query_cost", "max_wall_time")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("constraint values must be finite")
        return value


class ResearchBrief(BaseModel):
    """The one-shot assignment. Nothing else from a human enters a run."""

    model_config = ConfigDict(frozen=True)

    objective: str
    target_scope: list[str] = Field(default_factory=list)
    constraints: Constraints = Field(default_factory=Constraints)

    @field_validator("objective")
    @classmethod
    def _objective_non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("objective must be non-empty")
        return value


# ---------------------------------------------------------------------------
# Catalog


class ColumnInfo(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    logical_type: LogicalType
    nullable: bool
    null_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    native_type: str = ""


class TableInfo(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    row_count: int = Field(ge=0)
    columns: list[ColumnInfo] = Field(default_factory=list)
    constraints: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_columns(self) -> "TableInfo":
        _unique([c.name for c in self.columns], f"column in table {self.id}")
        return self

    def column(self, name: str) -> Optional[ColumnInfo]:
        lowered = name.lower()
        for col in self.columns:
            if col.name.lower() == lowered:
                return col
        return None


class DatasetInfo(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    description: Optional[str] = None
    tables: list[TableInfo] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_tables(self) -> "DatasetInfo":
        _unique([t.id for t in self.tables], f"table in dataset {self.id}")
        return self

    @computed_field  # type: ignore[prop-decorator]
    @property
    def table_count(self) -> int:
        return len(self.tables)


class SchemaCatalog(BaseModel):
    model_config = ConfigDict(frozen=True)

    datasets: list[DatasetInfo] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_datasets(self) -> "SchemaCatalog":
        _unique([d.id for d in self.datasets], "dataset")
        return self

    def is_empty(self) -> bool:
        return not any(d.tables for d in self.datasets)

    def tables(self) -> list[tuple[str, TableInfo]]:
        return [(d.id, t) for d in self.datasets for t in d.tables]

    def find_table(self, ref: str) -> Optional[TableInfo]:
        """Resolve ``table`` or ``dataset.table`` (case-insensitive)."""
        ref = ref.strip().strip("`\"")
        dataset_id: Optional[str] = None
        table_id = ref
        if "." in ref:
            dataset_id, table_id = ref.split(".", 1)
        for ds in self.datasets:
            if dataset_id is not None and ds.id.lower() != dataset_id.lower():
                continue
            for table in ds.tables:
                if table.id.lower() == table_id.lower():
                    return table
        return None

    def has_entity(self, ref: str) -> bool:
        """True when ``ref`` names a table or a ``table.column`` in the catalog."""
        ref = ref.strip()
        if not ref:
            return False
        if self.find_table(ref) is not None:
            return True
        if "." in ref:
            table_ref, column = ref.rsplit(".", 1)
            table = self.find_table(table_ref)
            return table is not None and table.column(column.strip("`\"")) is not None
        return any(t.column(ref) is not None for _, t in self.tables())

    def column_count(self) -> int:
        return sum(len(t.columns) for _, t in self.tables())


# ---------------------------------------------------------------------------
# Plan


class Subtask(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    objective: str
    referenced_tables: list[str] = Field(default_factory=list)
    expected_output: ExpectedOutput = "table"

    @field_validator("id", "objective")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("must be non-empty")
        return value.strip()


class ResearchPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    subtasks: list[Subtask] = Field(min_length=1)
    budget_allocation: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "ResearchPlan":
        _unique([s.id for s in self.subtasks], "subtask id")
        ids = {s.id for s in self.subtasks}
        for key, fraction in self.budget_allocation.items():
            if key not in ids:
                raise ValueError(f"budget allocated to unknown subtask {key!r}")
            if fraction < 0:
                raise ValueError("budget fractions must be non-negative")
        if sum(self.budget_allocation.values()) > 1.0 + 1e-9:
            raise ValueError("budget fractions must sum to at most 1")
        return self

    def subtask(self, subtask_id: str) -> Optional[Subtask]:
        for item in self.subtasks:
            if item.id == subtask_id:
                return item
        return None

    def unknown_tables(self, catalog: SchemaCatalog) -> list[str]:
        missing: list[str] = []
        for item in self.subtasks:
            for ref in item.referenced_tables:
                if catalog.find_table(ref) is None and ref not in missing:
                    missing.append(ref)
        return missing


# ---------------------------------------------------------------------------
# Queries


class QueryCandidate(BaseModel):
    model_config = ConfigDict(frozen=True)

    subtask_id: str
    sql_text: str
    uses_ai_functions: bool = False
    rationale: str = ""
    revision_index: int = Field(default=0, ge=0)

    @field_validator("sql_text")
    @classmethod
    def _sql_non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("sql_text must be non-empty")
        return value

    @property
    def query_id(self) -> str:
        return f"{self.subtask_id}#{self.revision_index}"


class QueryError(BaseModel):
    model_config = ConfigDict(frozen=True)

    code: str
    message: str


class QueryOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: list[dict[str, Any]] = Field(default_factory=list)
    columns: list[str] = Field(default_factory=list)
    error: Optional[QueryError] = None
    elapsed: float = Field(default=0.0, ge=0)
    cost: float = Field(default=0.0, ge=0)
    truncated: bool = False
    warnings: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _error_means_no_rows(self) -> "QueryOutcome":
        if self.error is not None and self.rows:
            raise ValueError("an outcome carrying an error must have no rows")
        return self

    @classmethod
    def failure(cls, code: str, message: str, *, elapsed: float = 0.0, cost: float = 0.0) -> "QueryOutcome":
        return cls(error=QueryError(code=code, message=message), elapsed=elapsed, cost=cost)


class ValidationVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    status: Literal["PASS", "FAIL"]
    reason: Literal["ok", "empty_result", "execution_error"]

    @model_validator(mode="after")
    def _pass_iff_ok(self) -> "ValidationVerdict":
        if (self.status == "PASS") != (self.reason == "ok"):
            raise ValueError("status PASS requires reason ok and vice versa")
        return self

    @property
    def passed(self) -> bool:
        return self.status == "PASS"


class QueryAttempt(BaseModel):
    model_config = ConfigDict(frozen=True)

    candidate: QueryCandidate
    outcome: QueryOutcome
    verdict: ValidationVerdict


# ---------------------------------------------------------------------------
# Report


class OutlineSection(BaseModel):
    model_config = ConfigDict(frozen=True)

    title: str
    intent: str = ""
    evidence_subtasks: list[str] = Field(default_factory=list)


class ReportOutline(BaseModel):
    model_config = ConfigDict(frozen=True)

    sections: list[OutlineSection] = Field(min_length=3)


class ReportDraft(BaseModel):
    model_config = ConfigDict(frozen=True)

    markdown: str
    evidence_index: dict[str, str] = Field(default_factory=dict)
    revision_index: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _markers_resolve(self) -> "ReportDraft":
        for marker in EVIDENCE_MARKER_RE.findall(self.markdown):
            if marker not in self.evidence_index:
                raise ValueError(f"evidence marker [{marker}] has no entry in evidence_index")
        return self


class QualityAssessment(BaseModel):
    model_config = ConfigDict(frozen=True)

    score: float = Field(ge=0.0, le=1.0)
    sub_scores: dict[str, float]
    feedback: str = ""

    @model_validator(mode="after")
    def _score_is_mean(self) -> "QualityAssessment":
        if set(self.sub_scores) != set(QUALITY_DIMENSIONS):
            raise ValueError(f"sub_scores must be exactly {QUALITY_DIMENSIONS}")
        for name, value in self.sub_scores.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"sub-score {name} out of [0,1]: {value}")
        mean = sum(self.sub_scores.values()) / len(QUALITY_DIMENSIONS)
        if abs(mean - self.score) > 1e-9:
            raise ValueError("score must equal the mean of the sub-scores")
        return self

    @classmethod
    def from_sub_scores(cls, sub_scores: dict[str, float], feedback: str = "") -> "QualityAssessment":
        ordered = {name: float(sub_scores[name]) for name in QUALITY_DIMENSIONS}
        score = sum(ordered.values()) / len(QUALITY_DIMENSIONS)
        return cls(score=score, sub_scores=ordered, feedback=feedback)
