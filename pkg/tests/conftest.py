from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import pytest
from tenacity import wait_none

from dar.backends import EmbeddedBackend, QueryLimits
from dar.config import Config, ConnectionConfig, ProviderConfig
from dar.fixtures import CI_INCIDENTS, DEFAULT_ASSETS, DEFAULT_SEED, generate_fixture
from dar.llm import Gateway, ScriptedBackend, ScriptRule, load_transcript
from dar.meta import PROFILE_MARKER, build_catalog
from dar.models import QueryOutcome, ResearchBrief, SchemaCatalog
from dar.orchestrator import brief_from_text
from dar.session import SessionState, new_session

FIXTURE_DIR = Path(__file__).parent / "fixtures"
TRANSCRIPT_DIR = FIXTURE_DIR / "transcripts"
GOLDEN_TRANSCRIPT = TRANSCRIPT_DIR / "golden.json"
DATASET = "research_poc"

BRIEF_TEXT = (
    "Analyze the security incident and asset data and identify significant patterns, "
    "trends, and anomalies. Generate actionable insights from the findings."
)


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if os.environ.get("DAR_LIVE") == "1":
        return
    skip_live = pytest.mark.skip(reason="set DAR_LIVE=1 to run live provider tests")
    for item in items:
        if "live" in item.keywords:
            item.add_marker(skip_live)


class RecordingBackend:
    """Delegating SqlBackend that logs every non-profiling statement."""

    def __init__(self, inner: Any) -> None:
        self.inner = inner
        self.kind = inner.kind
        self.dialect = inner.dialect
        self.ai_native = inner.ai_native
        self.statements: list[str] = []

    @property
    def closed(self) -> bool:
        return self.inner.closed

    def list_datasets(self):
        return self.inner.list_datasets()

    def introspect(self):
        return self.inner.introspect()

    def table_constraints(self, dataset_id: str, table_id: str) -> list[str]:
        return self.inner.table_constraints(dataset_id, table_id)

    def execute_sql(self, sql_text: str, limits: QueryLimits = QueryLimits()) -> QueryOutcome:
        if not sql_text.startswith(PROFILE_MARKER):
            self.statements.append(sql_text)
        return self.inner.execute_sql(sql_text, limits)

    def close(self) -> None:
        self.inner.close()


def make_gateway(rules: list[ScriptRule] | ScriptedBackend) -> Gateway:
    backend = rules if isinstance(rules, ScriptedBackend) else ScriptedBackend(rules)
    return Gateway(backend, retry_wait=wait_none())


def transcript_gateway(path: Path = GOLDEN_TRANSCRIPT) -> Gateway:
    return Gateway(load_transcript(path), retry_wait=wait_none())


def write_transcript(path: Path, overrides: list[dict[str, Any]], base: Path = GOLDEN_TRANSCRIPT) -> Path:
    """Golden transcript with ``overrides`` placed first (first match wins)."""
    doc = json.loads(base.read_text(encoding="utf-8"))
    doc["rules"] = list(overrides) + doc["rules"]
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def make_session(max_llm_calls: int = 200, objective: str = BRIEF_TEXT) -> SessionState:
    return new_session({"objective": objective, "constraints": {"max_llm_calls": max_llm_calls}})


def make_config(db_path: Optional[Path], transcript: Path = GOLDEN_TRANSCRIPT, **budget: Any) -> Config:
    config = Config(
        provider=ProviderConfig(kind="scripted", transcript=transcript),
        connection=ConnectionConfig(
            kind="embedded",
            location=str(db_path) if db_path is not None else ":memory:",
            default_dataset=DATASET,
        ),
    )
    if budget:
        config = replace(config, budget=replace(config.budget, **budget))
    return config


def make_brief(config: Config) -> ResearchBrief:
    return brief_from_text(BRIEF_TEXT, config)


@pytest.fixture(scope="session")
def small_db(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """CI-scale fixture: 26 assets, 2000 incidents, seed 42."""
    path = tmp_path_factory.mktemp("small") / f"{DATASET}.sqlite"
    return generate_fixture(DEFAULT_SEED, DEFAULT_ASSETS, CI_INCIDENTS, path)


@pytest.fixture(scope="session")
def tiny_db(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """At most 100 rows per table, for row-wise AI function checks."""
    path = tmp_path_factory.mktemp("tiny") / f"{DATASET}.sqlite"
    return generate_fixture(DEFAULT_SEED, DEFAULT_ASSETS, 60, path)


@pytest.fixture
def small_backend(small_db: Path):
    backend = RecordingBackend(EmbeddedBackend(small_db, DATASET))
    yield backend
    backend.close()


@pytest.fixture
def tiny_backend(tiny_db: Path):
    backend = RecordingBackend(EmbeddedBackend(tiny_db, DATASET))
    yield backend
    backend.close()


@pytest.fixture
def session() -> SessionState:
    return make_session()


@pytest.fixture(scope="session")
def small_catalog(small_db: Path) -> SchemaCatalog:
    backend = EmbeddedBackend(small_db, DATASET)
    try:
        return build_catalog(backend)
    finally:
        backend.close()
