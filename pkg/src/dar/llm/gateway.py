from __future__ import annotations

import logging
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential
from tenacity.wait import wait_base

from ..config import DEFAULT_TEMPERATURES
from ..errors import PreconditionFailed, ProviderError, SchemaViolation
from ..session import SessionState
from .providers import Completion, LlmBackend
from .schemas import SCHEMAS, parse_structured, schema_json
from .templates import TemplateLibrary

logger = logging.getLogger(__name__)

# Total attempts per call: the first try plus two retries.
PROVIDER_ATTEMPTS = 3


class LlmRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    template_id: str
    variables: dict[str, str] = Field(default_factory=dict)
    temperature: Optional[float] = Field(default=None, ge=0.0, le=2.0)
    max_output_tokens: int = Field(default=2048, ge=1)
    response_shape: Literal["free_text", "structured"] = "free_text"
    schema_id: Optional[str] = None

    @model_validator(mode="after")
    def _schema_registered(self) -> "LlmRequest":
        if self.response_shape == "structured" and self.schema_id not in SCHEMAS:
            raise ValueError(f"structured request names unregistered schema {self.schema_id!r}")
        return self


class LlmResponse(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    text: str
    parsed: Optional[Any] = None
    tokens_used: int = Field(default=0, ge=0)
    provider_id: str


def _transient(exc: BaseException) -> bool:
    return isinstance(exc, ProviderError) and exc.transient


class Gateway:
    """Budgeted access to one LLM backend.

    Every backend invocation, retries and repairs included, claims one unit
    of ``session.counters.llm_calls`` before it is issued.
    """

    def __init__(
        self,
        backend: LlmBackend,
        *,
        library: Optional[TemplateLibrary] = None,
        temperatures: Optional[dict[str, float]] = None,
        max_output_tokens: int = 2048,
        retry_wait: Optional[wait_base] = None,
    ) -> None:
        self.backend = backend
        self.library = library or TemplateLibrary()
        self.temperatures = dict(DEFAULT_TEMPERATURES)
        self.temperatures.update(temperatures or {})
        self.max_output_tokens = max_output_tokens
        self._retry_wait = retry_wait if retry_wait is not None else wait_exponential(multiplier=0.5, max=8)

    def close(self) -> None:
        self.backend.close()

    def remaining(self, session: SessionState) -> int:
        return session.remaining_llm_calls()

    def render(self, req: LlmRequest) -> str:
        return self.library.render(req.template_id, req.variables)

    def request(
        self,
        template_id: str,
        variables: dict[str, str],
        *,
        structured: bool = False,
        temperature: Optional[float] = None,
    ) -> LlmRequest:
        spec = self.library.spec(template_id)
        return LlmRequest(
            template_id=template_id,
            variables=variables,
            temperature=temperature,
            max_output_tokens=self.max_output_tokens,
            response_shape="structured" if structured else "free_text",
            schema_id=spec.schema_id if structured else None,
        )

    def _temperature(self, req: LlmRequest) -> float:
        if req.temperature is not None:
            return req.temperature
        kind = self.library.spec(req.template_id).role_kind
        return self.temperatures.get(kind, 0.2)

    def _invoke(self, session: SessionState, prompt: str, temperature: float, max_tokens: int) -> Completion:
        for attempt in Retrying(
            retry=retry_if_exception(_transient),
            stop=stop_after_attempt(PROVIDER_ATTEMPTS),
            wait=self._retry_wait,
            reraise=True,
        ):
            with attempt:
                session.reserve_llm_call()
                if attempt.retry_state.attempt_number > 1:
                    logger.warning("Retrying provider call (attempt %d)", attempt.retry_state.attempt_number)
                session.log_message("user", prompt)
                completion = self.backend.complete(prompt, temperature=temperature, max_output_tokens=max_tokens)
                session.log_message("assistant", completion.text)
                return completion
        raise AssertionError("unreachable")  # pragma: no cover

    def generate(self, session: SessionState, req: LlmRequest) -> LlmResponse:
        prompt = self.render(req)
        temperature = self._temperature(req)
        completion = self._invoke(session, prompt, temperature, req.max_output_tokens)
        tokens = completion.tokens_used
        if req.response_shape == "free_text":
            return LlmResponse(text=completion.text, tokens_used=tokens, provider_id=self.backend.provider_id)

        assert req.schema_id is not None
        try:
            parsed = parse_structured(req.schema_id, completion.text)
        except SchemaViolation as first_error:
            logger.warning("Structured reply for %s failed validation; asking for a repair", req.template_id)
            repair_prompt = self.library.render(
                "repair",
                {
                    "schema_id": req.schema_id,
                    "schema": schema_json(req.schema_id),
                    "error": str(first_error),
                    "previous_reply": completion.text,
                },
            )
            completion = self._invoke(session, repair_prompt, temperature, req.max_output_tokens)
            tokens += completion.tokens_used
            parsed = parse_structured(req.schema_id, completion.text)
        return LlmResponse(
            text=completion.text, parsed=parsed, tokens_used=tokens, provider_id=self.backend.provider_id
        )

    def generate_structured(self, session: SessionState, template_id: str, variables: dict[str, str]) -> Any:
        spec = self.library.spec(template_id)
        if spec.schema_id is None:
            raise PreconditionFailed(f"template {template_id} has no structured schema")
        return self.generate(session, self.request(template_id, variables, structured=True)).parsed

    def generate_text(self, session: SessionState, template_id: str, variables: dict[str, str]) -> str:
        return self.generate(session, self.request(template_id, variables)).text
