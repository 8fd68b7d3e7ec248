from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

DEFAULT_TEMPERATURES = {"sql": 0.2, "narrative": 0.7}


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "scripted"  # scripted | http
    endpoint: str = ""
    model: str = ""
    transcript: Optional[Path] = None
    temperatures: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    max_output_tokens: int = 2048
    timeout_s: float = 60.0
    token_env: str = "DAR_API_TOKEN"


@dataclass(frozen=True)
class ConnectionConfig:
    kind: str = "embedded"  # embedded | remote
    location: str = ":memory:"
    credentials: Optional[str] = None  # name of an env var holding a bearer token
    default_dataset: Optional[str] = None
    ai_native: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    max_review_iterations: int = 3
    result_summary_row_cap: int = 50
    max_rows: int = 1000
    timeout_s: float = 120.0
    concurrent_subtasks: bool = False


@dataclass(frozen=True)
class PlanConfig:
    min_subtasks: int = 3
    max_subtasks: int = 8


@dataclass(frozen=True)
class EscalationConfig:
    theta: float = 0.75
    max_revisions: int = 3


@dataclass(frozen=True)
class ShimConfig:
    fanout_width: int = 4


@dataclass(frozen=True)
class BudgetConfig:
    max_llm_calls: int = 200
    max_query_cost: float = 0.0
    max_wall_time: float = 0.0


@dataclass(frozen=True)
class Config:
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    connection: ConnectionConfig = field(default_factory=ConnectionConfig)
    scope: tuple[str, ...] = ()
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    report: EscalationConfig = field(default_factory=EscalationConfig)
    shim: ShimConfig = field(default_factory=ShimConfig)


def _xdg_config_home() -> Path:
    value = os.environ.get("XDG_CONFIG_HOME")
    if value:
        return Path(value).expanduser()
    return Path.home() / ".config"


def default_config_path() -> Path:
    return _xdg_config_home() / "dar" / "config.json"


def _section(doc: dict[str, Any], name: str) -> dict[str, Any]:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be an object")
    return value


def _num(section: dict[str, Any], where: str, key: str, default: float, *, minimum: float = 0.0) -> float:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{where}].{key} must be a number")
    if value < minimum:
        raise ConfigError(f"[{where}].{key} must be >= {minimum}")
    return float(value)


def _int(section: dict[str, Any], where: str, key: str, default: int, *, minimum: int = 0) -> int:
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"[{where}].{key} must be an integer")
    if value < minimum:
        raise ConfigError(f"[{where}].{key} must be >= {minimum}")
    return value


def _theta(value: float) -> float:
    if value > 1:
        raise ConfigError("[report].theta must be in [0, 1]")
    return value


def _resolve(base: Path, value: Optional[str]) -> Optional[Path]:
    if not value:
        return None
    path = Path(value).expanduser()
    return path if path.is_absolute() else (base / path)


def parse_config(doc: dict[str, Any], *, base_dir: Path = Path(".")) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")

    prov = _section(doc, "provider")
    kind = str(prov.get("kind", "scripted"))
    if kind not in {"scripted", "http"}:
        raise ConfigError("[provider].kind must be 'scripted' or 'http'")
    temperatures = dict(DEFAULT_TEMPERATURES)
    temps_value = prov.get("temperatures", {})
    if not isinstance(temps_value, dict):
        raise ConfigError("[provider].temperatures must be an object")
    for role, temp in temps_value.items():
        if isinstance(temp, bool) or not isinstance(temp, (int, float)) or not 0 <= temp <= 2:
            raise ConfigError(f"[provider].temperatures.{role} must be a number in [0, 2]")
        temperatures[str(role)] = float(temp)
    provider = ProviderConfig(
        kind=kind,
        endpoint=str(prov.get("endpoint", "")),
        model=str(prov.get("model", "")),
        transcript=_resolve(base_dir, prov.get("transcript")),
        temperatures=temperatures,
        max_output_tokens=_int(prov, "provider", "max_output_tokens", 2048, minimum=1),
        timeout_s=_num(prov, "provider", "timeout_s", 60.0),
        token_env=str(prov.get("token_env", "DAR_API_TOKEN")),
    )
    if provider.kind == "http" and not provider.endpoint:
        raise ConfigError("[provider].endpoint is required when kind is 'http'")
    if provider.kind == "scripted" and provider.transcript is None:
        raise ConfigError("[provider].transcript is required when kind is 'scripted'")

    conn = _section(doc, "connection")
    conn_kind = str(conn.get("kind", "embedded"))
    if conn_kind not in {"embedded", "remote"}:
        raise ConfigError("[connection].kind must be 'embedded' or 'remote'")
    location = str(conn.get("location", ":memory:" if conn_kind == "embedded" else ""))
    if conn_kind == "remote" and not location.startswith(("http://", "https://")):
        raise ConfigError("[connection].location must be an http(s) URL for a remote connection")
    if conn_kind == "embedded" and not location:
        raise ConfigError("[connection].location must be a file path or ':memory:'")
    if conn_kind == "embedded" and location != ":memory:":
        location = str(_resolve(base_dir, location))
    connection = ConnectionConfig(
        kind=conn_kind,
        location=location,
        credentials=conn.get("credentials"),
        default_dataset=conn.get("default_dataset"),
        ai_native=bool(conn.get("ai_native", False)),
    )

    scope_value = doc.get("scope", [])
    if not isinstance(scope_value, list) or not all(isinstance(s, str) for s in scope_value):
        raise ConfigError("scope must be a list of dataset ids")

    bud = _section(doc, "budget")
    pipe = _section(doc, "pipeline")
    plan = _section(doc, "plan")
    rep = _section(doc, "report")
    shim = _section(doc, "shim")

    plan_config = PlanConfig(
        min_subtasks=_int(plan, "plan", "min_subtasks", 3, minimum=1),
        max_subtasks=_int(plan, "plan", "max_subtasks", 8, minimum=1),
    )
    if plan_config.min_subtasks > plan_config.max_subtasks:
        raise ConfigError("[plan].min_subtasks must be <= [plan].max_subtasks")
    theta = _theta(_num(rep, "report", "theta", 0.75))

    return Config(
        provider=provider,
        connection=connection,
        scope=tuple(s.strip() for s in scope_value if s.strip()),
        budget=BudgetConfig(
            max_llm_calls=_int(bud, "budget", "max_llm_calls", 200, minimum=1),
            max_query_cost=_num(bud, "budget", "max_query_cost", 0.0),
            max_wall_time=_num(bud, "budget", "max_wall_time", 0.0),
        ),
        pipeline=PipelineConfig(
            max_review_iterations=_int(pipe, "pipeline", "max_review_iterations", 3),
            result_summary_row_cap=_int(pipe, "pipeline", "result_summary_row_cap", 50, minimum=1),
            max_rows=_int(pipe, "pipeline", "max_rows", 1000, minimum=1),
            timeout_s=_num(pipe, "pipeline", "timeout_s", 120.0),
            concurrent_subtasks=bool(pipe.get("concurrent_subtasks", False)),
        ),
        plan=plan_config,
        report=EscalationConfig(
            theta=theta,
            max_revisions=_int(rep, "report", "max_revisions", 3),
        ),
        shim=ShimConfig(fanout_width=_int(shim, "shim", "fanout_width", 4, minimum=1)),
    )


def load_config(path: Path) -> Config:
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, base_dir=path.parent)


def with_overrides(config: Config, **overrides: Any) -> Config:
    """Apply CLI flag overrides; ``None`` means "not given". Same range checks as the file."""
    given = {k: v for k, v in overrides.items() if v is not None}
    budget = config.budget
    report = config.report
    pipeline = config.pipeline
    if "max_llm_calls" in given:
        budget = replace(budget, max_llm_calls=_int(given, "budget", "max_llm_calls", 0, minimum=1))
    if "theta" in given:
        report = replace(report, theta=_theta(_num(given, "report", "theta", 0.0)))
    if "max_revisions" in given:
        report = replace(report, max_revisions=_int(given, "report", "max_revisions", 0))
    if "max_review_iterations" in given:
        pipeline = replace(pipeline, max_review_iterations=_int(given, "pipeline", "max_review_iterations", 0))
    return replace(config, budget=budget, report=report, pipeline=pipeline)


def default_config_doc() -> dict[str, Any]:
    return {
        "provider": {
            "kind": "http",
            "endpoint": "https://api.example.com/v1",
            "model": "your-model-name",
            "token_env": "DAR_API_TOKEN",
            "temperatures": dict(DEFAULT_TEMPERATURES),
        },
        "connection": {
            "kind": "embedded",
            "location": "research_poc.sqlite",
            "default_dataset": "research_poc",
        },
        "scope": [],
        "budget": {"max_llm_calls": 200, "max_query_cost": 0, "max_wall_time": 0},
        "pipeline": {"max_review_iterations": 3, "result_summary_row_cap": 50},
        "plan": {"min_subtasks": 3, "max_subtasks": 8},
        "report": {"theta": 0.75, "max_revisions": 3},
        "shim": {"fanout_width": 4},
    }


def default_config_text() -> str:
    return json.dumps(default_config_doc(), indent=2) + "\n"


def ensure_parent_dir(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def write_default_config(path: Path) -> None:
    ensure_parent_dir(path)
    if path.exists():
        return
    path.write_text(default_config_text(), encoding="utf-8")


def as_dict(config: Config) -> dict[str, Any]:
    doc = asdict(config)
    doc["scope"] = list(config.scope)
    transcript = config.provider.transcript
    doc["provider"]["transcript"] = str(transcript) if transcript else None
    return doc
