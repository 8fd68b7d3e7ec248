"""The four metadata tools plus catalog assembly.

Everything goes through the backend abstraction; nothing is cached, so every
call reflects the catalog as it is now.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from typing import Optional

from .backends import ColumnRecord, QueryLimits, SqlBackend, logical_type
from .errors import DarError, UnknownDataset, UnknownTable
from .models import ColumnInfo, DatasetInfo, SchemaCatalog, TableInfo

logger = logging.getLogger(__name__)

PROFILE_MARKER = "/* dar:profile */"


def quote_identifier(dialect: str, identifier: str) -> str:
    if dialect == "bigquery":
        return "`" + identifier.replace("`", "\\`") + "`"
    return '"' + identifier.replace('"', '""') + '"'


def _records_for(conn: SqlBackend, dataset_id: str) -> list[ColumnRecord]:
    if dataset_id not in list_dataset_ids(conn):
        raise UnknownDataset(f"unknown dataset {dataset_id!r}")
    return [r for r in conn.introspect() if r.dataset_id == dataset_id]


def list_dataset_ids(conn: SqlBackend) -> list[str]:
    return sorted({d.id for d in conn.list_datasets()})


def list_table_ids(conn: SqlBackend, dataset_id: str) -> list[str]:
    return sorted({r.table_id for r in _records_for(conn, dataset_id)})


def profile_sql(dialect: str, dataset_id: str, table_id: str, columns: Sequence[str]) -> str:
    def q(name: str) -> str:
        return quote_identifier(dialect, name)

    parts = [f"COUNT(*) AS {q('__row_count')}"]
    for i, name in enumerate(columns):
        parts.append(f"SUM(CASE WHEN {q(name)} IS NULL THEN 1 ELSE 0 END) AS {q(f'__n{i}')}")
    return f"{PROFILE_MARKER} SELECT {', '.join(parts)} FROM {q(dataset_id)}.{q(table_id)}"


def _table_info(conn: SqlBackend, dataset_id: str, table_id: str, records: list[ColumnRecord]) -> TableInfo:
    columns = sorted((r for r in records if r.table_id == table_id), key=lambda r: r.ordinal)
    if not columns:
        raise UnknownTable(f"unknown table {dataset_id}.{table_id}")

    outcome = conn.execute_sql(
        profile_sql(conn.dialect, dataset_id, table_id, [c.column_name for c in columns]),
        QueryLimits(max_rows=1),
    )
    if outcome.error is not None:
        if outcome.error.code == "unknown_table":
            raise UnknownTable(f"unknown table {dataset_id}.{table_id}: {outcome.error.message}")
        raise DarError(f"profiling {dataset_id}.{table_id} failed: {outcome.error.message}")
    row = outcome.rows[0] if outcome.rows else {}
    row_count = int(row.get("__row_count") or 0)

    infos: list[ColumnInfo] = []
    for i, rec in enumerate(columns):
        nulls = int(row.get(f"__n{i}") or 0)
        infos.append(
            ColumnInfo(
                name=rec.column_name,
                logical_type=logical_type(rec.native_type),
                nullable=rec.nullable,
                null_fraction=(nulls / row_count) if row_count else 0.0,
                native_type=rec.native_type,
            )
        )

    constraints: list[str] = []
    reporter = getattr(conn, "table_constraints", None)
    if callable(reporter):
        constraints = list(reporter(dataset_id, table_id))
    return TableInfo(id=table_id, row_count=row_count, columns=infos, constraints=constraints)


def list_table_info(conn: SqlBackend, dataset_id: str, table_id: str) -> TableInfo:
    return _table_info(conn, dataset_id, table_id, _records_for(conn, dataset_id))


def list_dataset_info(conn: SqlBackend, dataset_id: str) -> DatasetInfo:
    descriptions = {d.id: d.description for d in conn.list_datasets()}
    if dataset_id not in descriptions:
        raise UnknownDataset(f"unknown dataset {dataset_id!r}")
    records = [r for r in conn.introspect() if r.dataset_id == dataset_id]
    table_ids = sorted({r.table_id for r in records})
    tables = [_table_info(conn, dataset_id, t, records) for t in table_ids]
    return DatasetInfo(id=dataset_id, description=descriptions[dataset_id], tables=tables)


def build_catalog(conn: SqlBackend, scope: Optional[Sequence[str]] = None) -> SchemaCatalog:
    """``scope=None`` means every visible dataset; an empty scope yields an empty catalog."""
    dataset_ids = list_dataset_ids(conn) if scope is None else sorted(set(scope))
    datasets = [list_dataset_info(conn, ds) for ds in dataset_ids]
    catalog = SchemaCatalog(datasets=datasets)
    logger.info(
        "Catalog built: %d dataset(s), %d table(s), %d column(s)",
        len(catalog.datasets),
        len(catalog.tables()),
        catalog.column_count(),
    )
    return catalog


def describe_catalog(catalog: SchemaCatalog) -> str:
    """Plain-text catalog view used as prompt context."""
    if catalog.is_empty():
        return "(no tables visible)"
    lines: list[str] = []
    for ds in catalog.datasets:
        header = f"dataset {ds.id}"
        if ds.description:
            header += f": {ds.description}"
        lines.append(header)
        for table in ds.tables:
            lines.append(f"  table {table.id} ({table.row_count} rows)")
            for col in table.columns:
                null_note = f"nullable, {col.null_fraction:.2%} null" if col.nullable else "not null"
                lines.append(f"    - {col.name} {col.logical_type} ({null_note})")
            for constraint in table.constraints:
                lines.append(f"    * {constraint}")
    return "\n".join(lines)
