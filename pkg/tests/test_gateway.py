from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest
from pydantic import ValidationError
from tenacity import wait_none

from dar.config import ProviderConfig
from dar.errors import BudgetExhausted, ConfigError, PreconditionFailed, ProviderError, SchemaViolation, ScriptedMiss
from dar.llm import (
    TEMPLATES,
    Completion,
    Gateway,
    HttpChatBackend,
    LlmRequest,
    ScriptedBackend,
    ScriptRule,
    TemplateLibrary,
    load_transcript,
    open_gateway,
)
from dar.llm.schemas import JudgeReply, extract_json

from conftest import GOLDEN_TRANSCRIPT, make_gateway, make_session

JUDGE_OK = json.dumps({"grounding": 1, "coverage": 1, "coherence": 1, "actionability": 1, "feedback": "fine"})


def _ai_vars(prompt: str = "hello") -> dict[str, str]:
    return {"function": "AI.GENERATE", "output_instruction": "Reply with text.", "prompt": prompt}


def _bind_all(template_id: str) -> dict[str, str]:
    return {name: "x" for name in TemplateLibrary().variables(template_id)}


class FlakyBackend:
    """Raises ``failures`` provider errors, then answers."""

    provider_id = "flaky"

    def __init__(self, failures: int, *, transient: bool = True, text: str = "ok") -> None:
        self.failures = failures
        self.transient = transient
        self.text = text
        self.invocations = 0
        self.temperatures: list[float] = []

    def complete(self, prompt: str, *, temperature: float, max_output_tokens: int) -> Completion:
        self.invocations += 1
        self.temperatures.append(temperature)
        if self.invocations <= self.failures:
            raise ProviderError("upstream hiccup", transient=self.transient)
        return Completion(text=self.text, tokens_used=3)


# ---------------------------------------------------------------------------
# scripted backend


def test_scripted_reply_and_call_accounting() -> None:
    backend = ScriptedBackend([ScriptRule("INPUT: hello", "hi there")])
    gateway = make_gateway(backend)
    session = make_session()
    assert gateway.generate_text(session, "ai_function", _ai_vars()) == "hi there"
    assert backend.invocations == 1
    assert session.counters.llm_calls == 1
    assert backend.calls[0].startswith("ROLE: ai_function\nFUNCTION: AI.GENERATE\n")
    assert [e.role for e in session.conversation_log] == ["user", "user", "assistant"]


def test_first_matching_rule_wins() -> None:
    gateway = make_gateway([ScriptRule("ROLE: ai_function", "first"), ScriptRule("INPUT: hello", "second")])
    assert gateway.generate_text(make_session(), "ai_function", _ai_vars()) == "first"


def test_consume_once_rules_answer_a_single_time() -> None:
    gateway = make_gateway(
        [ScriptRule("INPUT: hello", "once", consume_once=True), ScriptRule("INPUT: hello", "again")]
    )
    session = make_session()
    replies = [gateway.generate_text(session, "ai_function", _ai_vars()) for _ in range(3)]
    assert replies == ["once", "again", "again"]


def test_regex_rules_match_across_lines() -> None:
    gateway = make_gateway([ScriptRule(r"FUNCTION: AI\.GENERATE\n.*INPUT: h.llo", "matched", regex=True)])
    assert gateway.generate_text(make_session(), "ai_function", _ai_vars()) == "matched"


def test_unmatched_prompt_is_a_scripted_miss() -> None:
    backend = ScriptedBackend([ScriptRule("never appears", "x")])
    session = make_session()
    with pytest.raises(ScriptedMiss):
        make_gateway(backend).generate_text(session, "ai_function", _ai_vars())
    assert backend.invocations == 1
    assert session.counters.llm_calls == 1


def test_empty_rule_list_is_rejected() -> None:
    with pytest.raises(PreconditionFailed):
        ScriptedBackend([])


# ---------------------------------------------------------------------------
# budget


def test_budget_boundary_issues_no_extra_call() -> None:
    backend = ScriptedBackend([ScriptRule("ROLE: ai_function", "ok")])
    gateway = make_gateway(backend)
    session = make_session(max_llm_calls=2)
    gateway.generate_text(session, "ai_function", _ai_vars())
    gateway.generate_text(session, "ai_function", _ai_vars())
    assert gateway.remaining(session) == 0
    with pytest.raises(BudgetExhausted):
        gateway.generate_text(session, "ai_function", _ai_vars())
    assert backend.invocations == 2
    assert session.counters.llm_calls == 2


def test_retries_stop_at_the_budget() -> None:
    backend = FlakyBackend(failures=5)
    session = make_session(max_llm_calls=2)
    with pytest.raises(BudgetExhausted):
        Gateway(backend, retry_wait=wait_none()).generate_text(session, "ai_function", _ai_vars())
    assert backend.invocations == 2
    assert session.counters.llm_calls == 2


# ---------------------------------------------------------------------------
# structured replies


def test_structured_reply_is_parsed() -> None:
    gateway = make_gateway([ScriptRule("ROLE: quality_judge", "Scores follow.\n```json\n" + JUDGE_OK + "\n```")])
    parsed = gateway.generate_structured(make_session(), "quality_judge", {"revision": "0", "draft": "d"})
    assert isinstance(parsed, JudgeReply)
    assert parsed.grounding == 1.0


def test_one_repair_then_success() -> None:
    backend = ScriptedBackend([ScriptRule("ROLE: quality_judge", "I liked it."), ScriptRule("ROLE: repair", JUDGE_OK)])
    session = make_session()
    parsed = make_gateway(backend).generate_structured(session, "quality_judge", {"revision": "0", "draft": "d"})
    assert parsed.feedback == "fine"
    assert backend.invocations == 2
    assert "SCHEMA_ID: judge" in backend.calls[1]
    assert "I liked it." in backend.calls[1]
    assert session.counters.llm_calls == 2


def test_schema_violation_after_a_failed_repair() -> None:
    bad = json.dumps({"grounding": 1.2, "coverage": 1, "coherence": 1, "actionability": 1})
    backend = ScriptedBackend([ScriptRule("ROLE: quality_judge", bad), ScriptRule("ROLE: repair", bad)])
    session = make_session()
    with pytest.raises(SchemaViolation):
        make_gateway(backend).generate_structured(session, "quality_judge", {"revision": "0", "draft": "d"})
    assert backend.invocations == 2
    assert session.counters.llm_calls == 2


def test_free_text_template_cannot_be_structured() -> None:
    gateway = make_gateway([ScriptRule("ROLE", "x")])
    with pytest.raises(PreconditionFailed):
        gateway.generate_structured(make_session(), "scratch_research", _bind_all("scratch_research"))


def test_structured_request_needs_a_registered_schema() -> None:
    with pytest.raises(ValidationError):
        LlmRequest(template_id="plan", response_shape="structured", schema_id="nope")


def test_extract_json_tolerates_prose_and_fences() -> None:
    assert extract_json('Sure! {"a": 1} Hope that helps.') == {"a": 1}
    assert extract_json('```json\n{"a": [1, 2]}\n```') == {"a": [1, 2]}
    with pytest.raises(ValueError):
        extract_json("no braces here")


# ---------------------------------------------------------------------------
# transient failures


def test_transient_failures_are_retried() -> None:
    backend = FlakyBackend(failures=2)
    session = make_session()
    text = Gateway(backend, retry_wait=wait_none()).generate_text(session, "ai_function", _ai_vars())
    assert text == "ok"
    assert backend.invocations == 3
    assert session.counters.llm_calls == 3


def test_retries_give_up_after_three_attempts() -> None:
    backend = FlakyBackend(failures=10)
    with pytest.raises(ProviderError):
        Gateway(backend, retry_wait=wait_none()).generate_text(make_session(), "ai_function", _ai_vars())
    assert backend.invocations == 3


def test_permanent_failures_are_not_retried() -> None:
    backend = FlakyBackend(failures=1, transient=False)
    with pytest.raises(ProviderError):
        Gateway(backend, retry_wait=wait_none()).generate_text(make_session(), "ai_function", _ai_vars())
    assert backend.invocations == 1


def test_temperature_follows_the_template_role() -> None:
    backend = FlakyBackend(failures=0)
    gateway = Gateway(backend, temperatures={"narrative": 0.9}, retry_wait=wait_none())
    session = make_session()
    gateway.generate_text(session, "ai_function", _ai_vars())
    gateway.generate_text(session, "scratch_research", _bind_all("scratch_research"))
    gateway.generate(session, gateway.request("ai_function", _ai_vars(), temperature=0.0))
    assert backend.temperatures == [0.2, 0.9, 0.0]


# ---------------------------------------------------------------------------
# templates


@pytest.mark.parametrize("template_id", sorted(TEMPLATES))
def test_every_template_renders_when_bound(template_id: str) -> None:
    text = TemplateLibrary().render(template_id, _bind_all(template_id))
    assert text.startswith("ROLE: ")
    if template_id != "ai_function":
        assert f"TEMPLATE: {template_id}.v1\n" in text


def test_unbound_and_unknown_templates_fail() -> None:
    library = TemplateLibrary()
    with pytest.raises(PreconditionFailed) as info:
        library.render("query_review", {"subtask_id": "s1"})
    assert "unbound" in str(info.value)
    with pytest.raises(PreconditionFailed):
        library.render("haiku", {})


# ---------------------------------------------------------------------------
# transcripts and provider wiring


def test_load_transcript_serializes_json_replies(tmp_path: Path) -> None:
    path = tmp_path / "t.json"
    path.write_text(
        json.dumps({"rules": [{"match": "ROLE: plan_generator", "reply_json": {"b": 1, "a": 2}, "consume_once": True}]}),
        encoding="utf-8",
    )
    backend = load_transcript(path)
    assert backend.complete("ROLE: plan_generator", temperature=0.2, max_output_tokens=10).text == '{"a": 2, "b": 1}'
    with pytest.raises(ScriptedMiss):
        backend.complete("ROLE: plan_generator", temperature=0.2, max_output_tokens=10)


def test_load_transcript_rejects_malformed_files(tmp_path: Path) -> None:
    path = tmp_path / "t.json"
    path.write_text(json.dumps({"rules": [{"reply": "no matcher"}]}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_transcript(path)
    with pytest.raises(ConfigError):
        load_transcript(tmp_path / "absent.json")


def test_open_gateway_wires_the_configured_provider() -> None:
    gateway = open_gateway(ProviderConfig(kind="scripted", transcript=GOLDEN_TRANSCRIPT))
    assert gateway.backend.provider_id == "scripted"
    with pytest.raises(ConfigError):
        open_gateway(ProviderConfig(kind="scripted"))
    with pytest.raises(ConfigError):
        open_gateway(ProviderConfig(kind="oracle"))


def _chat(handler) -> HttpChatBackend:
    return HttpChatBackend("http://llm.test/v1", "test-model", transport=httpx.MockTransport(handler))


def test_http_backend_speaks_chat_completions(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("DAR_API_TOKEN", "tok")
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(
            200, json={"choices": [{"message": {"content": "hello back"}}], "usage": {"total_tokens": 7}}
        )

    completion = _chat(handler).complete("hi", temperature=0.3, max_output_tokens=64)
    assert completion == Completion(text="hello back", tokens_used=7)
    assert seen[0].url.path == "/v1/chat/completions"
    assert seen[0].headers["Authorization"] == "Bearer tok"
    body = json.loads(seen[0].content)
    assert body["model"] == "test-model"
    assert body["messages"] == [{"role": "user", "content": "hi"}]
    assert (body["temperature"], body["max_tokens"]) == (0.3, 64)


@pytest.mark.parametrize(
    "response, transient",
    [
        (httpx.Response(503), True),
        (httpx.Response(429), True),
        (httpx.Response(400), False),
        (httpx.Response(200, text="not json"), False),
        (httpx.Response(200, json={"choices": []}), False),
    ],
)
def test_http_backend_classifies_failures(response: httpx.Response, transient: bool) -> None:
    backend = _chat(lambda request: response)
    with pytest.raises(ProviderError) as info:
        backend.complete("hi", temperature=0.2, max_output_tokens=8)
    assert info.value.transient is transient


def test_http_backend_recovers_through_gateway_retries() -> None:
    attempts = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        attempts["n"] += 1
        if attempts["n"] < 3:
            return httpx.Response(502)
        return httpx.Response(200, json={"choices": [{"message": {"content": "finally"}}]})

    session = make_session()
    gateway = Gateway(_chat(handler), retry_wait=wait_none())
    assert gateway.generate_text(session, "ai_function", _ai_vars()) == "finally"
    assert attempts["n"] == 3
    assert session.counters.llm_calls == 3


def test_closing_the_gateway_releases_the_http_client() -> None:
    backend = _chat(lambda request: httpx.Response(200, json={"choices": [{"message": {"content": "x"}}]}))
    gateway = Gateway(backend, retry_wait=wait_none())
    gateway.close()
    assert backend._client.is_closed
