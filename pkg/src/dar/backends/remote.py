"""HTTP+JSON adapter for a remote warehouse gateway.

Wire contract (see docs/formats.md):

    POST {base}/query    {"sql", "params", "limits": {"max_rows", "timeout_s"}}
                      -> {"columns": [{"name", "type"}], "rows": [[...]],
                          "stats": {"elapsed_s", "bytes_scanned", "truncated"},
                          "error": {"code", "message"} | null}
    GET  {base}/catalog -> {"datasets": [{"id", "description"}],
                            "columns": [{"dataset_id", "table_id", "column_name",
                                         "native_type", "nullable", "ordinal"}]}
"""

from __future__ import annotations

import logging
import os
from typing import Any, Optional

import httpx
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from ..errors import ConnectionFailed
from ..models import QueryOutcome
from .base import ColumnRecord, DatasetRecord, QueryLimits

logger = logging.getLogger(__name__)

BYTES_PER_COST_UNIT = 1e9


def _is_transient(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code >= 500
    return isinstance(exc, httpx.TransportError)


class RemoteBackend:
    kind = "remote"

    def __init__(
        self,
        base_url: str,
        *,
        token_env: Optional[str] = None,
        dialect: str = "bigquery",
        ai_native: bool = False,
        transport: Optional[httpx.BaseTransport] = None,
        max_attempts: int = 3,
        timeout_s: float = 130.0,
    ) -> None:
        headers = {"Accept": "application/json"}
        if token_env:
            token = os.environ.get(token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            else:
                logger.warning("Credential env var %s is not set; connecting without a token", token_env)
        self.dialect = dialect
        self.ai_native = ai_native
        self._max_attempts = max_attempts
        self._client: Optional[httpx.Client] = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout_s, transport=transport
        )

    @property
    def closed(self) -> bool:
        return self._client is None

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def _request(self, method: str, path: str, payload: Optional[dict[str, Any]] = None) -> Any:
        if self._client is None:
            raise ConnectionFailed("connection is closed")
        client = self._client
        try:
            for attempt in Retrying(
                retry=retry_if_exception(_is_transient),
                stop=stop_after_attempt(self._max_attempts),
                wait=wait_exponential(multiplier=0.2, max=5),
                reraise=True,
            ):
                with attempt:
                    response = client.request(method, path, json=payload)
                    response.raise_for_status()
                    return response.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise ConnectionFailed(f"{method} {path} failed: {exc}") from exc
        raise AssertionError("unreachable")  # pragma: no cover

    def list_datasets(self) -> list[DatasetRecord]:
        doc = self._request("GET", "/catalog")
        out: list[DatasetRecord] = []
        for item in doc.get("datasets", []) if isinstance(doc, dict) else []:
            if not isinstance(item, dict) or not isinstance(item.get("id"), str):
                continue
            description = item.get("description")
            out.append(DatasetRecord(id=item["id"], description=description if isinstance(description, str) else None))
        return sorted(out, key=lambda d: d.id)

    def introspect(self) -> list[ColumnRecord]:
        doc = self._request("GET", "/catalog")
        out: list[ColumnRecord] = []
        for item in doc.get("columns", []) if isinstance(doc, dict) else []:
            if not isinstance(item, dict):
                continue
            try:
                out.append(
                    ColumnRecord(
                        dataset_id=str(item["dataset_id"]),
                        table_id=str(item["table_id"]),
                        column_name=str(item["column_name"]),
                        native_type=str(item.get("native_type", "")),
                        nullable=bool(item.get("nullable", True)),
                        ordinal=int(item.get("ordinal", 0)),
                    )
                )
            except (KeyError, TypeError, ValueError):
                logger.warning("Skipping malformed catalog record: %r", item)
        return sorted(out, key=lambda r: (r.dataset_id, r.table_id, r.ordinal))

    def execute_sql(self, sql_text: str, limits: QueryLimits = QueryLimits()) -> QueryOutcome:
        doc = self._request(
            "POST",
            "/query",
            {
                "sql": sql_text,
                "params": {},
                "limits": {"max_rows": limits.max_rows, "timeout_s": limits.timeout_s},
            },
        )
        if not isinstance(doc, dict):
            raise ConnectionFailed("query response is not a JSON object")
        stats = doc.get("stats") if isinstance(doc.get("stats"), dict) else {}
        elapsed = max(0.0, float(stats.get("elapsed_s", 0.0) or 0.0))
        cost = max(0.0, float(stats.get("bytes_scanned", 0) or 0)) / BYTES_PER_COST_UNIT
        error = doc.get("error")
        if isinstance(error, dict):
            return QueryOutcome.failure(
                str(error.get("code", "execution_error")),
                str(error.get("message", "")),
                elapsed=elapsed,
                cost=cost,
            )
        columns = [str(c.get("name")) for c in doc.get("columns", []) if isinstance(c, dict)]
        raw_rows = [r for r in doc.get("rows", []) if isinstance(r, list)]
        truncated = bool(stats.get("truncated", False)) or len(raw_rows) > limits.max_rows
        rows = [dict(zip(columns, r)) for r in raw_rows[: limits.max_rows]]
        return QueryOutcome(
            rows=rows,
            columns=columns,
            elapsed=elapsed,
            cost=cost,
            truncated=truncated,
            warnings=[f"result truncated to {limits.max_rows} rows"] if truncated else [],
        )
