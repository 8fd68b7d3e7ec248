from __future__ import annotations

import logging
import math
import re
import sqlite3
import threading
import time
from pathlib import Path
from typing import Any, Optional
from urllib.parse import quote

from ..errors import ConnectionFailed, UnknownDataset
from ..models import QueryOutcome
from .base import ColumnRecord, DatasetRecord, QueryLimits

logger = logging.getLogger(__name__)

DIALECT = "sqlite"
META_TABLE = "_dar_dataset_info"

# Rows scanned per cost unit.
ROWS_PER_COST_UNIT = 1_000_000

_PLAN_LINE_RE = re.compile(r"^(SCAN|SEARCH)\s+(?:TABLE\s+)?([^\s(]+)(?:\s+AS\s+(\S+))?", re.IGNORECASE)


def _quote(identifier: str) -> str:
    return '"' + identifier.replace('"', '""') + '"'


def _error_code(exc: BaseException) -> str:
    message = str(exc).lower()
    if "syntax error" in message or "incomplete input" in message or "unrecognized token" in message:
        return "syntax_error"
    if "no such table" in message:
        return "unknown_table"
    if "no such column" in message or "ambiguous column" in message:
        return "unknown_column"
    if "no such function" in message:
        return "unknown_function"
    if "interrupted" in message:
        return "timeout"
    return "execution_error"


class EmbeddedBackend:
    """sqlite3 adapter. Each attached database file is one dataset."""

    kind = "embedded"
    dialect = DIALECT

    def __init__(
        self,
        location: str | Path | None = None,
        dataset_id: Optional[str] = None,
        *,
        ai_native: bool = False,
    ) -> None:
        self.ai_native = ai_native
        self._lock = threading.RLock()
        try:
            self._conn: Optional[sqlite3.Connection] = sqlite3.connect(
                ":memory:", uri=True, check_same_thread=False
            )
        except sqlite3.Error as exc:  # pragma: no cover
            raise ConnectionFailed(f"cannot open embedded engine: {exc}") from exc
        if location is not None and str(location) != ":memory:":
            path = Path(location)
            self.attach(path, dataset_id or path.stem)

    @property
    def closed(self) -> bool:
        return self._conn is None

    @property
    def connection(self) -> sqlite3.Connection:
        if self._conn is None:
            raise ConnectionFailed("connection is closed")
        return self._conn

    def attach(self, path: Path, dataset_id: str, *, read_only: bool = True) -> None:
        if not path.exists():
            raise ConnectionFailed(f"database file not found: {path}")
        uri = f"file:{quote(str(path.resolve()))}" + ("?mode=ro" if read_only else "")
        try:
            self.connection.execute(f"ATTACH DATABASE ? AS {_quote(dataset_id)}", (uri,))
        except sqlite3.Error as exc:
            raise ConnectionFailed(f"cannot attach {path} as {dataset_id}: {exc}") from exc
        logger.debug("Attached %s as dataset %s", path, dataset_id)

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    # -- introspection ----------------------------------------------------

    def _dataset_names(self) -> list[str]:
        try:
            rows = self.connection.execute("PRAGMA database_list").fetchall()
        except sqlite3.Error as exc:
            raise ConnectionFailed(str(exc)) from exc
        return sorted(str(r[1]) for r in rows if r[1] not in ("main", "temp"))

    def _description(self, dataset_id: str) -> Optional[str]:
        try:
            row = self.connection.execute(
                f"SELECT value FROM {_quote(dataset_id)}.{META_TABLE} WHERE key = 'description'"
            ).fetchone()
        except sqlite3.Error:
            return None
        return str(row[0]) if row else None

    def list_datasets(self) -> list[DatasetRecord]:
        return [DatasetRecord(id=name, description=self._description(name)) for name in self._dataset_names()]

    def _table_names(self, dataset_id: str) -> list[str]:
        rows = self.connection.execute(
            f"SELECT name FROM {_quote(dataset_id)}.sqlite_master "
            "WHERE type IN ('table', 'view') AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' "
            "AND name NOT LIKE '\\_dar\\_%' ESCAPE '\\' ORDER BY name"
        ).fetchall()
        return [str(r[0]) for r in rows]

    def introspect(self) -> list[ColumnRecord]:
        records: list[ColumnRecord] = []
        for dataset_id in self._dataset_names():
            for table_id in self._table_names(dataset_id):
                info = self.connection.execute(
                    f"PRAGMA {_quote(dataset_id)}.table_info({_quote(table_id)})"
                ).fetchall()
                for cid, name, native, notnull, _default, pk in info:
                    records.append(
                        ColumnRecord(
                            dataset_id=dataset_id,
                            table_id=table_id,
                            column_name=str(name),
                            native_type=str(native or ""),
                            nullable=not (bool(notnull) or bool(pk)),
                            ordinal=int(cid),
                        )
                    )
        return records

    def table_constraints(self, dataset_id: str, table_id: str) -> list[str]:
        if dataset_id not in self._dataset_names():
            raise UnknownDataset(dataset_id)
        out: list[str] = []
        info = self.connection.execute(
            f"PRAGMA {_quote(dataset_id)}.table_info({_quote(table_id)})"
        ).fetchall()
        pk_cols = [str(r[1]) for r in sorted(info, key=lambda r: r[5]) if r[5]]
        if pk_cols:
            out.append("PRIMARY KEY (" + ", ".join(pk_cols) + ")")
        for fk in self.connection.execute(
            f"PRAGMA {_quote(dataset_id)}.foreign_key_list({_quote(table_id)})"
        ).fetchall():
            out.append(f"FOREIGN KEY ({fk[3]}) REFERENCES {fk[2]}({fk[4]})")
        return out

    # -- execution --------------------------------------------------------

    def _table_row_count(self, name: str) -> int:
        qualified = ".".join(_quote(part) for part in name.split(".", 1))
        try:
            row = self.connection.execute(f"SELECT COUNT(*) FROM {qualified}").fetchone()
        except sqlite3.Error:
            return 0
        return int(row[0]) if row else 0

    def _estimate_cost(self, sql_text: str) -> float:
        try:
            plan = self.connection.execute("EXPLAIN QUERY PLAN " + sql_text).fetchall()
        except sqlite3.Error:
            return 0.0
        scanned = 0
        for row in plan:
            match = _PLAN_LINE_RE.match(str(row[-1]))
            if match is None:
                continue
            total = self._table_row_count(match.group(2))
            if match.group(1).upper() == "SCAN":
                scanned += total
            else:
                scanned += int(math.ceil(math.log2(total + 1)))
        return scanned / ROWS_PER_COST_UNIT

    def execute_sql(self, sql_text: str, limits: QueryLimits = QueryLimits()) -> QueryOutcome:
        # One statement at a time per connection; the progress handler is connection-wide.
        with self._lock:
            return self._execute(sql_text, limits)

    def _execute(self, sql_text: str, limits: QueryLimits) -> QueryOutcome:
        conn = self.connection
        started = time.perf_counter()
        deadline = started + limits.timeout_s if limits.timeout_s > 0 else None

        def _progress() -> int:
            return 1 if deadline is not None and time.perf_counter() > deadline else 0

        conn.set_progress_handler(_progress, 10_000)
        try:
            cursor = conn.execute(sql_text)
            columns = [d[0] for d in cursor.description] if cursor.description else []
            fetched = cursor.fetchmany(limits.max_rows + 1) if columns else []
        except (sqlite3.Error, sqlite3.Warning) as exc:
            elapsed = time.perf_counter() - started
            logger.debug("SQL failed (%s): %s", _error_code(exc), exc)
            return QueryOutcome.failure(_error_code(exc), str(exc), elapsed=elapsed)
        finally:
            conn.set_progress_handler(None, 0)

        truncated = len(fetched) > limits.max_rows
        rows: list[dict[str, Any]] = [dict(zip(columns, r)) for r in fetched[: limits.max_rows]]
        elapsed = time.perf_counter() - started
        return QueryOutcome(
            rows=rows,
            columns=columns,
            elapsed=elapsed,
            cost=self._estimate_cost(sql_text),
            truncated=truncated,
            warnings=[f"result truncated to {limits.max_rows} rows"] if truncated else [],
        )
