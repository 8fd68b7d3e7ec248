from __future__ import annotations

from ..config import ConnectionConfig
from ..errors import ConfigError
from .base import ColumnRecord, DatasetRecord, QueryLimits, SqlBackend, logical_type
from .embedded import EmbeddedBackend
from .remote import RemoteBackend

__all__ = [
    "ColumnRecord",
    "DatasetRecord",
    "EmbeddedBackend",
    "QueryLimits",
    "RemoteBackend",
    "SqlBackend",
    "logical_type",
    "open_backend",
]


def open_backend(config: ConnectionConfig) -> SqlBackend:
    if config.kind == "embedded":
        return EmbeddedBackend(config.location, config.default_dataset, ai_native=config.ai_native)
    if config.kind == "remote":
        return RemoteBackend(config.location, token_env=config.credentials, ai_native=config.ai_native)
    raise ConfigError(f"unknown connection kind {config.kind!r}")
