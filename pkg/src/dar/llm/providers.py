from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Protocol

import httpx

from ..errors import ConfigError, PreconditionFailed, ProviderError, ScriptedMiss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Completion:
    text: str
    tokens_used: int = 0


class LlmBackend(Protocol):
    provider_id: str

    def complete(self, prompt: str, *, temperature: float, max_output_tokens: int) -> Completion: ...

    def close(self) -> None: ...


@dataclass(frozen=True)
class ScriptRule:
    matcher: str
    reply: str
    consume_once: bool = False
    regex: bool = False

    def matches(self, prompt: str) -> bool:
        if self.regex:
            return re.search(self.matcher, prompt, re.DOTALL) is not None
        return self.matcher in prompt


class ScriptedBackend:
    """Deterministic test double: the first matching rule answers."""

    provider_id = "scripted"

    def __init__(self, rules: list[ScriptRule]) -> None:
        if not rules:
            raise PreconditionFailed("a scripted backend needs at least one rule")
        self._rules = list(rules)
        self._consumed: set[int] = set()
        self._lock = threading.Lock()
        self.calls: list[str] = []
        self.closed = False

    @property
    def invocations(self) -> int:
        return len(self.calls)

    def close(self) -> None:
        self.closed = True

    def complete(self, prompt: str, *, temperature: float, max_output_tokens: int) -> Completion:
        with self._lock:
            self.calls.append(prompt)
            for index, rule in enumerate(self._rules):
                if index in self._consumed or not rule.matches(prompt):
                    continue
                if rule.consume_once:
                    self._consumed.add(index)
                return Completion(text=rule.reply, tokens_used=len(rule.reply.split()))
        first_line = prompt.strip().splitlines()[0] if prompt.strip() else ""
        raise ScriptedMiss(f"no scripted rule matches prompt starting {first_line!r}")


def _rule_from_doc(item: dict[str, Any]) -> ScriptRule:
    if "reply_json" in item:
        reply = json.dumps(item["reply_json"], sort_keys=True)
    else:
        reply = str(item["reply"])
    if "pattern" in item:
        return ScriptRule(str(item["pattern"]), reply, bool(item.get("consume_once", False)), regex=True)
    return ScriptRule(str(item["match"]), reply, bool(item.get("consume_once", False)))


def load_transcript(path: Path) -> ScriptedBackend:
    """Transcript file: ``{"rules": [{"match"|"pattern", "reply"|"reply_json", "consume_once"}]}``."""
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        rules = [_rule_from_doc(item) for item in doc["rules"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load transcript {path}: {exc}") from exc
    return ScriptedBackend(rules)


class HttpChatBackend:
    """Chat-completion shaped JSON over HTTP."""

    provider_id = "http"

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        token_env: str = "DAR_API_TOKEN",
        timeout_s: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        token = os.environ.get(token_env)
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        else:
            logger.warning("Env var %s is not set; calling %s without a token", token_env, endpoint)
        self._model = model
        self._client = httpx.Client(
            base_url=endpoint.rstrip("/"), headers=headers, timeout=timeout_s, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def complete(self, prompt: str, *, temperature: float, max_output_tokens: int) -> Completion:
        payload = {
            "model": self._model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_output_tokens,
        }
        try:
            response = self._client.post("/chat/completions", json=payload)
            response.raise_for_status()
            doc = response.json()
        except httpx.HTTPStatusError as exc:
            status = exc.response.status_code
            raise ProviderError(f"provider returned HTTP {status}", transient=status >= 500 or status == 429) from exc
        except httpx.TransportError as exc:
            raise ProviderError(f"provider unreachable: {exc}") from exc
        except ValueError as exc:
            raise ProviderError(f"provider returned invalid JSON: {exc}", transient=False) from exc

        try:
            text = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError("provider response missing choices[0].message.content", transient=False) from exc
        usage = doc.get("usage") if isinstance(doc.get("usage"), dict) else {}
        return Completion(text=str(text), tokens_used=int(usage.get("total_tokens", 0) or 0))
