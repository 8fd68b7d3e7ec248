from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

from ..models import LogicalType, QueryOutcome

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROWS = 1000
DEFAULT_TIMEOUT_S = 120.0


@dataclass(frozen=True)
class QueryLimits:
    max_rows: int = DEFAULT_MAX_ROWS
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    description: Optional[str] = None


@dataclass(frozen=True)
class ColumnRecord:
    dataset_id: str
    table_id: str
    column_name: str
    native_type: str
    nullable: bool
    ordinal: int


@runtime_checkable
class SqlBackend(Protocol):
    """What the meta extractor, the shim and the SQL pipeline need from an engine."""

    kind: str
    dialect: str
    ai_native: bool

    @property
    def closed(self) -> bool: ...

    def list_datasets(self) -> list[DatasetRecord]: ...

    def introspect(self) -> list[ColumnRecord]: ...

    def execute_sql(self, sql_text: str, limits: QueryLimits = QueryLimits()) -> QueryOutcome: ...

    def close(self) -> None: ...


# Native type -> logical type. Matched on the upper-cased base type name
# (parameters such as VARCHAR(20) are stripped first).
_TYPE_MAP: dict[str, LogicalType] = {
    # sqlite declared types
    "TEXT": "string",
    "VARCHAR": "string",
    "CHAR": "string",
    "CLOB": "string",
    "NVARCHAR": "string",
    "INTEGER": "integer",
    "INT": "integer",
    "BIGINT": "integer",
    "SMALLINT": "integer",
    "TINYINT": "integer",
    "REAL": "float",
    "FLOAT": "float",
    "DOUBLE": "float",
    "NUMERIC": "float",
    "DECIMAL": "float",
    "BOOLEAN": "boolean",
    "BOOL": "boolean",
    "TIMESTAMP": "timestamp",
    "DATETIME": "timestamp",
    "DATE": "timestamp",
    "GEOGRAPHY": "geo_point",
    "GEO_POINT": "geo_point",
    "POINT": "geo_point",
    # warehouse types
    "STRING": "string",
    "INT64": "integer",
    "FLOAT64": "float",
    "BIGNUMERIC": "float",
}

_warned_types: set[str] = set()


def logical_type(native_type: str) -> LogicalType:
    base = re.sub(r"\(.*\)$", "", native_type.strip()).strip().upper()
    mapped = _TYPE_MAP.get(base)
    if mapped is not None:
        return mapped
    if native_type not in _warned_types:
        _warned_types.add(native_type)
        logger.warning("Unknown native type %r mapped to string", native_type)
    return "string"
