from __future__ import annotations


class DarError(RuntimeError):
    code = "dar_error"


class PreconditionFailed(DarError, ValueError):
    code = "precondition_failed"


class InvalidBrief(DarError, ValueError):
    code = "invalid_brief"


class ConfigError(DarError):
    code = "config_error"


class CheckpointError(DarError):
    code = "checkpoint_error"


class ConnectionFailed(DarError):
    code = "connection_failed"


class UnknownDataset(DarError):
    code = "unknown_dataset"


class UnknownTable(DarError):
    code = "unknown_table"


class BudgetExhausted(DarError):
    code = "budget_exhausted"


class ProviderError(DarError):
    code = "provider_error"

    def __init__(self, message: str, *, transient: bool = True) -> None:
        super().__init__(message)
        self.transient = transient


class SchemaViolation(DarError):
    code = "schema_violation"


class ScriptedMiss(DarError):
    code = "scripted_miss"


class SqlParseError(DarError):
    code = "parse_error"


class UnsupportedShape(DarError):
    code = "unsupported_shape"


class PlanInvalid(DarError):
    code = "plan_invalid"


class SpecUngrounded(DarError):
    code = "spec_ungrounded"


class OutlineInvalid(DarError):
    code = "outline_invalid"


class IterationsExhausted(DarError):
    code = "iterations_exhausted"


class BoundaryViolation(DarError):
    code = "boundary_violation"


class UnevidencedClaim(DarError):
    code = "unevidenced_claim"

    def __init__(self, message: str, sentences: list[str] | None = None) -> None:
        super().__init__(message)
        self.sentences = list(sentences or [])
