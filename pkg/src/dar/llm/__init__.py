from __future__ import annotations

from ..config import ProviderConfig
from ..errors import ConfigError
from .gateway import Gateway, LlmRequest, LlmResponse
from .providers import Completion, HttpChatBackend, LlmBackend, ScriptedBackend, ScriptRule, load_transcript
from .templates import TEMPLATES, TemplateLibrary

__all__ = [
    "Completion",
    "Gateway",
    "HttpChatBackend",
    "LlmBackend",
    "LlmRequest",
    "LlmResponse",
    "ScriptRule",
    "ScriptedBackend",
    "TEMPLATES",
    "TemplateLibrary",
    "load_transcript",
    "open_gateway",
]


def open_gateway(config: ProviderConfig) -> Gateway:
    backend: LlmBackend
    if config.kind == "scripted":
        if config.transcript is None:
            raise ConfigError("scripted provider needs a transcript")
        backend = load_transcript(config.transcript)
    elif config.kind == "http":
        backend = HttpChatBackend(
            config.endpoint, config.model, token_env=config.token_env, timeout_s=config.timeout_s
        )
    else:
        raise ConfigError(f"unknown provider kind {config.kind!r}")
    return Gateway(backend, temperatures=config.temperatures, max_output_tokens=config.max_output_tokens)
