"""Synthetic asset / incident database with planted, documented patterns.

Planted signals (ground truth goes to ``<stem>.ground_truth.json``):

* spike week: the week starting Monday 2024-03-04 (``strftime('%Y-%W')`` key
  ``2024-10``) receives about a tenth of all incidents;
* clustering: about a third of incidents sit within a few kilometres of the
  first five assets;
* severity by region: incidents in region ``North`` are mostly severity 1.
"""

from __future__ import annotations

import json
import logging
import sqlite3
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .errors import PreconditionFailed

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42
DEFAULT_ASSETS = 26
DEFAULT_INCIDENTS = 11489
CI_INCIDENTS = 2000
DATASET_DESCRIPTION = "Asset locations and security incidents for a humanitarian organization (synthetic)."

YEAR_START = datetime(2024, 1, 1, tzinfo=timezone.utc)  # a Monday
DAYS_IN_RANGE = 364  # 52 full weeks
SPIKE_START = datetime(2024, 3, 4, tzinfo=timezone.utc)
SPIKE_SHARE = 0.10
CLUSTER_SHARE = 0.35
N_HOTSPOTS = 5
CLUSTER_RADIUS_DEG = 0.05
HIGH_SEVERITY_REGION = "North"

# city, country, region, latitude, longitude
CITIES: tuple[tuple[str, str, str, float, float], ...] = (
    ("Oslo", "Norway", "North", 59.9139, 10.7522),
    ("Nairobi", "Kenya", "South", -1.2921, 36.8219),
    ("Manila", "Philippines", "East", 14.5995, 120.9842),
    ("Lagos", "Nigeria", "West", 6.5244, 3.3792),
    ("Kinshasa", "DR Congo", "Central", -4.4419, 15.2663),
    ("Helsinki", "Finland", "North", 60.1699, 24.9384),
    ("Johannesburg", "South Africa", "South", -26.2041, 28.0473),
    ("Jakarta", "Indonesia", "East", -6.2088, 106.8456),
    ("Bogota", "Colombia", "West", 4.7110, -74.0721),
    ("Bangui", "Central African Republic", "Central", 4.3947, 18.5582),
)

INCIDENT_TYPES: tuple[tuple[int, str], ...] = (
    (1, "Civil Unrest"),
    (2, "Armed Conflict"),
    (3, "Natural Disaster"),
    (4, "Crime"),
    (5, "Health Emergency"),
    (6, "Infrastructure Failure"),
)
ASSET_TYPES = ("Office", "Warehouse", "Clinic", "Guesthouse", "Field Site")
SOURCES = ("FieldReport", "NewsWire", "PartnerFeed")
SEVERITY_WORDS = {1: "High", 2: "Medium", 3: "Low"}

ASSET_COLUMNS = (
    ("AssetID", "TEXT PRIMARY KEY"),
    ("OrganizationID", "TEXT NOT NULL"),
    ("AssetName", "TEXT NOT NULL"),
    ("ImpactRadius", "REAL"),
    ("Latitude", "REAL NOT NULL"),
    ("Longitude", "REAL NOT NULL"),
    ("Country", "TEXT"),
    ("City", "TEXT"),
    ("Address", "TEXT"),
    ("Headcount", "INTEGER"),
    ("Phone", "TEXT"),
    ("FocalPointName", "TEXT"),
    ("Email", "TEXT"),
    ("SecondaryPhone", "TEXT"),
    ("DataSource", "TEXT"),
    ("Hyperlink", "TEXT"),
    ("Photo", "INTEGER"),
    ("ReportLink", "INTEGER"),
    ("AssetType", "TEXT"),
)

INCIDENT_COLUMNS = (
    ("IncidentID", "INTEGER PRIMARY KEY"),
    ("IncidentSourceId", "TEXT"),
    ("IncidentDateTime", "TIMESTAMP NOT NULL"),
    ("Title", "TEXT"),
    ("IncidentDescription", "TEXT"),
    ("Photo", "INTEGER"),
    ("Latitude", "REAL"),
    ("Longitude", "REAL"),
    ("Country", "TEXT"),
    ("City", "TEXT"),
    ("Address", "TEXT"),
    ("Region", "TEXT"),
    ("IncidentTypeName", "TEXT"),
    ("IncidentTypeID", "INTEGER"),
    ("Relevance", "REAL"),
    ("eventCode", "TEXT"),
    ("SeverityLevel", "INTEGER NOT NULL"),
    ("Hyperlink", "TEXT"),
    ("DataSource", "TEXT"),
)

REFERENCE_SQL = {
    "spike_week": (
        "SELECT strftime('%Y-%W', IncidentDateTime) AS week, COUNT(*) AS n "
        "FROM incidents GROUP BY week ORDER BY n DESC, week LIMIT 1"
    ),
    "weekly_counts": (
        "SELECT strftime('%Y-%W', IncidentDateTime) AS week, COUNT(*) AS n "
        "FROM incidents GROUP BY week ORDER BY week"
    ),
    "severity_by_region": (
        "SELECT Region, AVG(CASE WHEN SeverityLevel = 1 THEN 1.0 ELSE 0.0 END) AS high_share "
        "FROM incidents GROUP BY Region ORDER BY high_share DESC, Region"
    ),
    "incidents_near_assets": (
        "SELECT a.AssetID, COUNT(*) AS n FROM incidents i JOIN assets a "
        f"ON ABS(i.Latitude - a.Latitude) < {CLUSTER_RADIUS_DEG} "
        f"AND ABS(i.Longitude - a.Longitude) < {CLUSTER_RADIUS_DEG} "
        "GROUP BY a.AssetID ORDER BY n DESC, a.AssetID"
    ),
}


def sidecar_path(db_path: Path) -> Path:
    return db_path.with_name(db_path.stem + ".ground_truth.json")


def _iso(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def _assets(rng: np.random.Generator, n_assets: int) -> list[tuple[Any, ...]]:
    rows = []
    for i in range(n_assets):
        city, country, _region, lat, lon = CITIES[i % len(CITIES)]
        asset_id = f"A{i + 1:03d}"
        d_lat, d_lon = rng.normal(0.0, 0.08, size=2)
        complete = bool(rng.random() < 0.7)
        rows.append(
            (
                asset_id,
                f"ORG{1 + i % 3:02d}",
                f"{city} {ASSET_TYPES[i % len(ASSET_TYPES)]} {i + 1}",
                round(float(rng.uniform(0.5, 10.0)), 2),
                round(lat + float(d_lat), 6),
                round(lon + float(d_lon), 6),
                country,
                city,
                f"{int(rng.integers(1, 400))} Main Street, {city}",
                int(rng.integers(2, 250)),
                f"+{int(rng.integers(10, 99))} {int(rng.integers(1000000, 9999999))}",
                f"Focal Point {i + 1}",
                f"focal{i + 1}@example.org",
                None if rng.random() < 0.4 else f"+{int(rng.integers(10, 99))} {int(rng.integers(1000000, 9999999))}",
                SOURCES[i % len(SOURCES)],
                f"https://assets.example.org/{asset_id}" if complete else None,
                1 if complete else 0,
                1 if rng.random() < 0.6 else 0,
                ASSET_TYPES[i % len(ASSET_TYPES)],
            )
        )
    return rows


def _severity(rng: np.random.Generator, region: str) -> int:
    weights = [0.65, 0.25, 0.10] if region == HIGH_SEVERITY_REGION else [0.15, 0.35, 0.50]
    return int(rng.choice([1, 2, 3], p=weights))


def _incidents(
    rng: np.random.Generator, assets: list[tuple[Any, ...]], n_incidents: int
) -> list[tuple[Any, ...]]:
    hotspots = assets[:N_HOTSPOTS]
    asset_region = {a[0]: CITIES[i % len(CITIES)][2] for i, a in enumerate(assets)}
    spike_days = (SPIKE_START - YEAR_START).days
    rows = []
    for k in range(n_incidents):
        if rng.random() < SPIKE_SHARE:
            day = spike_days + int(rng.integers(0, 7))
        else:
            day = int(rng.integers(0, DAYS_IN_RANGE))
        ts = YEAR_START + timedelta(days=day, milliseconds=int(rng.integers(0, 86_400_000)))

        if rng.random() < CLUSTER_SHARE:
            anchor = hotspots[int(rng.integers(0, len(hotspots)))]
            lat = anchor[4] + float(rng.normal(0.0, 0.01))
            lon = anchor[5] + float(rng.normal(0.0, 0.01))
            city, country, region = anchor[7], anchor[6], asset_region[anchor[0]]
        else:
            city, country, region, c_lat, c_lon = CITIES[int(rng.integers(0, len(CITIES)))]
            lat = c_lat + float(rng.normal(0.0, 0.6))
            lon = c_lon + float(rng.normal(0.0, 0.6))
        lat = min(90.0, max(-90.0, lat))
        lon = min(180.0, max(-180.0, lon))

        type_id, type_name = INCIDENT_TYPES[int(rng.integers(0, len(INCIDENT_TYPES)))]
        severity = _severity(rng, region)
        address = f"{int(rng.integers(1, 900))} Market Road, {city}"
        rows.append(
            (
                k + 1,
                f"SRC-{int(rng.integers(100000, 999999))}",
                _iso(ts),
                f"{type_name} reported in {city}",
                f"{SEVERITY_WORDS[severity]} severity {type_name.lower()} near {address}.",
                1 if rng.random() < 0.3 else 0,
                round(lat, 6),
                round(lon, 6),
                country,
                city,
                address,
                region,
                type_name,
                type_id,
                round(float(rng.uniform(0.0, 1.0)), 3),
                f"EV{type_id:02d}{severity}",
                severity,
                None if rng.random() < 0.3 else f"https://news.example.org/{k + 1}",
                SOURCES[int(rng.integers(0, len(SOURCES)))],
            )
        )
    return rows


def _ground_truth(
    seed: int, assets: list[tuple[Any, ...]], incidents: list[tuple[Any, ...]]
) -> dict[str, Any]:
    weeks: dict[str, int] = {}
    for row in incidents:
        ts = datetime.strptime(row[2], "%Y-%m-%dT%H:%M:%S.%fZ")
        key = ts.strftime("%Y-%W")
        weeks[key] = weeks.get(key, 0) + 1
    spike_key = SPIKE_START.strftime("%Y-%W")
    counts = np.array(sorted(weeks.values()), dtype=float)
    median = float(np.median(counts)) if counts.size else 0.0
    spike_count = weeks.get(spike_key, 0)

    by_region: dict[str, list[int]] = {}
    for row in incidents:
        by_region.setdefault(row[11], []).append(row[16])
    high_share = {r: sum(1 for s in v if s == 1) / len(v) for r, v in sorted(by_region.items())}

    near: dict[str, int] = {}
    for asset in assets:
        n = sum(
            1
            for row in incidents
            if abs(row[6] - asset[4]) < CLUSTER_RADIUS_DEG and abs(row[7] - asset[5]) < CLUSTER_RADIUS_DEG
        )
        if n:
            near[asset[0]] = n

    return {
        "seed": seed,
        "n_assets": len(assets),
        "n_incidents": len(incidents),
        "spike_week": {
            "key": spike_key,
            "start": SPIKE_START.date().isoformat(),
            "count": spike_count,
            "median_weekly": median,
            "ratio_to_median": (spike_count / median) if median else None,
        },
        "severity_by_region": {"high_severity_region": HIGH_SEVERITY_REGION, "high_share": high_share},
        "clustering": {
            "hotspot_assets": [a[0] for a in assets[:N_HOTSPOTS]],
            "radius_deg": CLUSTER_RADIUS_DEG,
            "incidents_near_asset": near,
        },
        "reference_sql": REFERENCE_SQL,
    }


def _create(conn: sqlite3.Connection, table: str, columns: tuple[tuple[str, str], ...]) -> None:
    body = ", ".join(f'"{name}" {decl}' for name, decl in columns)
    conn.execute(f'CREATE TABLE "{table}" ({body})')


def generate_fixture(
    seed: int = DEFAULT_SEED,
    n_assets: int = DEFAULT_ASSETS,
    n_incidents: int = DEFAULT_INCIDENTS,
    path: Path = Path("research_poc.sqlite"),
) -> Path:
    """Write the fixture database at ``path`` (replacing it) plus its ground-truth sidecar."""
    if n_assets < 1:
        raise PreconditionFailed("n_assets must be >= 1")
    if n_incidents < 0:
        raise PreconditionFailed("n_incidents must be >= 0")

    rng = np.random.default_rng(seed)
    assets = _assets(rng, n_assets)
    incidents = _incidents(rng, assets, n_incidents)

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    conn = sqlite3.connect(str(path))
    try:
        _create(conn, "assets", ASSET_COLUMNS)
        _create(conn, "incidents", INCIDENT_COLUMNS)
        conn.execute('CREATE TABLE "_dar_dataset_info" ("key" TEXT PRIMARY KEY, "value" TEXT)')
        conn.execute("INSERT INTO _dar_dataset_info VALUES ('description', ?)", (DATASET_DESCRIPTION,))
        conn.executemany(f"INSERT INTO assets VALUES ({', '.join('?' * len(ASSET_COLUMNS))})", assets)
        conn.executemany(f"INSERT INTO incidents VALUES ({', '.join('?' * len(INCIDENT_COLUMNS))})", incidents)
        conn.commit()
    finally:
        conn.close()

    truth = _ground_truth(seed, assets, incidents)
    sidecar_path(path).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Fixture written: %s (%d assets, %d incidents, seed %d)", path, n_assets, n_incidents, seed)
    return path
