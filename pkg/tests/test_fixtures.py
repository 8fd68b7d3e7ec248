from __future__ import annotations

import json
from pathlib import Path

import pytest

from dar.backends import EmbeddedBackend, QueryLimits
from dar.errors import PreconditionFailed
from dar.fixtures import (
    DEFAULT_ASSETS,
    DEFAULT_INCIDENTS,
    DEFAULT_SEED,
    REFERENCE_SQL,
    SEVERITY_WORDS,
    generate_fixture,
    sidecar_path,
)

from conftest import DATASET

ALL_ROWS = QueryLimits(max_rows=50_000)


def _rows(db: Path, sql: str) -> list[dict]:
    backend = EmbeddedBackend(db, DATASET)
    try:
        outcome = backend.execute_sql(sql, ALL_ROWS)
    finally:
        backend.close()
    assert outcome.error is None, outcome.error
    return outcome.rows


def _truth(db: Path) -> dict:
    return json.loads(sidecar_path(db).read_text(encoding="utf-8"))


def test_ci_scale_counts(small_db: Path) -> None:
    assert _rows(small_db, "SELECT COUNT(*) AS n FROM assets") == [{"n": 26}]
    assert _rows(small_db, "SELECT COUNT(*) AS n FROM incidents") == [{"n": 2000}]
    truth = _truth(small_db)
    assert (truth["seed"], truth["n_assets"], truth["n_incidents"]) == (DEFAULT_SEED, 26, 2000)


def test_smallest_fixture(tmp_path: Path) -> None:
    db = generate_fixture(7, 1, 0, tmp_path / "one.sqlite")
    assert _rows(db, "SELECT COUNT(*) AS n FROM assets") == [{"n": 1}]
    assert _rows(db, "SELECT COUNT(*) AS n FROM incidents") == [{"n": 0}]
    truth = _truth(db)
    assert truth["spike_week"]["count"] == 0
    assert truth["spike_week"]["ratio_to_median"] is None
    assert truth["clustering"]["incidents_near_asset"] == {}


@pytest.mark.parametrize("n_assets, n_incidents", [(0, 10), (3, -1)])
def test_rejects_impossible_sizes(tmp_path: Path, n_assets: int, n_incidents: int) -> None:
    with pytest.raises(PreconditionFailed):
        generate_fixture(1, n_assets, n_incidents, tmp_path / "bad.sqlite")
    assert not (tmp_path / "bad.sqlite").exists()


def test_same_seed_same_data(tmp_path: Path) -> None:
    a = generate_fixture(11, 5, 300, tmp_path / "a" / "db.sqlite")
    b = generate_fixture(11, 5, 300, tmp_path / "b" / "db.sqlite")
    c = generate_fixture(12, 5, 300, tmp_path / "c" / "db.sqlite")
    dump = "SELECT * FROM incidents ORDER BY IncidentID"
    assert _rows(a, dump) == _rows(b, dump)
    assert sidecar_path(a).read_bytes() == sidecar_path(b).read_bytes()
    assert _rows(a, dump) != _rows(c, dump)


def test_regenerating_replaces_the_file(tmp_path: Path) -> None:
    path = tmp_path / "db.sqlite"
    generate_fixture(3, 4, 50, path)
    generate_fixture(3, 2, 20, path)
    assert _rows(path, "SELECT COUNT(*) AS n FROM incidents") == [{"n": 20}]


def test_values_are_in_range(small_db: Path) -> None:
    incidents = _rows(
        small_db,
        "SELECT IncidentDateTime, Latitude, Longitude, SeverityLevel, IncidentDescription, Region FROM incidents",
    )
    for row in incidents:
        assert row["IncidentDateTime"].startswith("2024-")
        assert row["IncidentDateTime"].endswith("Z")
        assert -90.0 <= row["Latitude"] <= 90.0
        assert -180.0 <= row["Longitude"] <= 180.0
        assert row["SeverityLevel"] in SEVERITY_WORDS
        assert row["IncidentDescription"].startswith(f"{SEVERITY_WORDS[row['SeverityLevel']]} severity ")
    assert {row["Region"] for row in incidents} == {"North", "South", "East", "West", "Central"}

    nulls = _rows(small_db, "SELECT AVG(Hyperlink IS NULL) AS f FROM incidents")[0]["f"]
    assert 0.2 < nulls < 0.4


def test_reference_sql_reproduces_the_sidecar(small_db: Path) -> None:
    truth = _truth(small_db)
    assert truth["reference_sql"] == REFERENCE_SQL

    (spike,) = _rows(small_db, REFERENCE_SQL["spike_week"])
    assert spike == {"week": truth["spike_week"]["key"], "n": truth["spike_week"]["count"]}
    assert spike["week"] == "2024-10"

    weekly = _rows(small_db, REFERENCE_SQL["weekly_counts"])
    assert sum(r["n"] for r in weekly) == 2000

    regions = _rows(small_db, REFERENCE_SQL["severity_by_region"])
    assert regions[0]["Region"] == truth["severity_by_region"]["high_severity_region"] == "North"
    shares = truth["severity_by_region"]["high_share"]
    assert {r["Region"]: r["high_share"] for r in regions} == pytest.approx(shares)

    near = _rows(small_db, REFERENCE_SQL["incidents_near_assets"])
    assert {r["AssetID"]: r["n"] for r in near} == truth["clustering"]["incidents_near_asset"]
    assert set(truth["clustering"]["hotspot_assets"]) <= {r["AssetID"] for r in near}


def test_spike_stands_out(small_db: Path) -> None:
    spike = _truth(small_db)["spike_week"]
    assert spike["ratio_to_median"] > 3


def test_dataset_description_is_recorded(small_db: Path) -> None:
    rows = _rows(small_db, "SELECT value FROM _dar_dataset_info WHERE key = 'description'")
    assert "(synthetic)" in rows[0]["value"]


@pytest.mark.slow
def test_full_scale_fixture(tmp_path: Path) -> None:
    db = generate_fixture(DEFAULT_SEED, DEFAULT_ASSETS, DEFAULT_INCIDENTS, tmp_path / f"{DATASET}.sqlite")
    assert _rows(db, "SELECT COUNT(*) AS n FROM assets") == [{"n": 26}]
    assert _rows(db, "SELECT COUNT(*) AS n FROM incidents") == [{"n": 11489}]
    spike = _truth(db)["spike_week"]
    assert spike["key"] == "2024-10"
    assert spike["ratio_to_median"] > 3
