"""Chat-completion gateway with two interchangeable backends.

The live backend speaks the de facto JSON chat-completions HTTP format
(POST ``{base_url}/v1/chat/completions`` with bearer auth from LLM_API_KEY).
The scripted backend replays canned rules from a JSON file and is the test
and simulation oracle: for a fixed script and request sequence its responses
are fully deterministic.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import requests

API_KEY_ENV_VAR = "LLM_API_KEY"
DEFAULT_TIMEOUT_SECONDS = 30.0
DEFAULT_RETRY_BACKOFF_SECONDS = 2.0

# Classification-like calls (extraction, validation) default to temperature 0;
# conversational generation defaults to 0.7.
EXTRACTION_TEMPERATURE = 0.0
CONVERSATION_TEMPERATURE = 0.7


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Network failure or HTTP status >= 400."""


class GatewayTimeout(GatewayError):
    """The backend did not answer within the configured timeout."""


class NoRuleMatched(GatewayError):
    """Scripted backend exhausted its rules without a match."""


class EmptyResponse(GatewayError):
    """The backend returned empty text."""


class ScriptParseError(GatewayError):
    """The script file is not valid JSON or violates the rule schema."""


@dataclass(frozen=True)
class CompletionRequest:
    system_text: str
    user_text: str
    model_name: str = "scripted"
    temperature: float = 0.0
    max_output_chars: int = 4000

    def __post_init__(self) -> None:
        if not self.system_text and not self.user_text:
            raise ValueError("system_text and user_text must not both be empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_output_chars <= 0:
            raise ValueError("max_output_chars must be positive")


@dataclass(frozen=True)
class CompletionResponse:
    text: str  # verbatim backend output; trimming is the caller's job
    latency_ms: int = 0


@dataclass
class ScriptedRule:
    """One canned response. ``contains=None`` means match-always.

    Rules are evaluated in file order and the first rule that matches *and*
    still has uses left wins; an exhausted rule falls through to the next.
    """

    response: str
    contains: str | None = None
    max_uses: int | None = None  # None = unlimited
    uses: int = field(default=0, compare=False)

    def matches(self, request: CompletionRequest) -> bool:
        if self.max_uses is not None and self.uses >= self.max_uses:
            return False
        if self.contains is None:
            return True
        return self.contains in request.user_text


class ScriptedBackend:
    """Deterministic backend driven by an ordered rule list.

    Safe to share across sessions: rule-count updates are serialized, so for
    a fixed per-session call order the response sequence is reproducible.
    """

    def __init__(self, rules: list[ScriptedRule]) -> None:
        self.rules = rules
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            for rule in self.rules:
                if rule.matches(request):
                    rule.uses += 1
                    if not rule.response:
                        raise EmptyResponse("scripted rule produced empty text")
                    return CompletionResponse(text=rule.response, latency_ms=0)
        raise NoRuleMatched(
            f"no scripted rule matched user_text starting {request.user_text[:80]!r}"
        )


def _parse_rule(index: int, raw: Any) -> ScriptedRule:
    if not isinstance(raw, dict):
        raise ScriptParseError(f"rule {index}: expected an object, got {type(raw).__name__}")
    unknown = set(raw) - {"match", "response", "max_uses"}
    if unknown:
        raise ScriptParseError(f"rule {index}: unknown fields {sorted(unknown)}")
    if "response" not in raw or not isinstance(raw["response"], str):
        raise ScriptParseError(f"rule {index}: field 'response' must be a string")

    match = raw.get("match", "always")
    contains: str | None
    if match == "always":
        contains = None
    elif isinstance(match, dict) and set(match) == {"user_text_contains"}:
        contains = match["user_text_contains"]
        if not isinstance(contains, str) or not contains:
            raise ScriptParseError(f"rule {index}: 'user_text_contains' must be a non-empty string")
    else:
        raise ScriptParseError(
            f"rule {index}: field 'match' must be \"always\" or {{\"user_text_contains\": ...}}"
        )

    max_uses = raw.get("max_uses")
    if max_uses is not None and (not isinstance(max_uses, int) or max_uses <= 0):
        raise ScriptParseError(f"rule {index}: 'max_uses' must be a positive integer")

    return ScriptedRule(response=raw["response"], contains=contains, max_uses=max_uses)


def parse_script(data: Any) -> list[ScriptedRule]:
    if not isinstance(data, list):
        raise ScriptParseError(f"script must be a JSON array of rules, got {type(data).__name__}")
    return [_parse_rule(i, raw) for i, raw in enumerate(data)]


def load_script(path: str | Path) -> ScriptedBackend:
    """Load a rule script file; all use counts start at zero."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScriptParseError(f"cannot read script {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ScriptParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return ScriptedBackend(parse_script(data))


class HttpBackend:
    """Chat-completions HTTP client with one retry and bearer auth.

    Request texts are sent verbatim: the system and user texts become the two
    entries of the ``messages`` array, untouched.
    """

    def __init__(
        self,
        base_url: str,
        *,
        timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS,
        retry_backoff_seconds: float = DEFAULT_RETRY_BACKOFF_SECONDS,
        api_key: str | None = None,
        session: requests.Session | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout_seconds = timeout_seconds
        self.retry_backoff_seconds = retry_backoff_seconds
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV_VAR, "")
        self._session = session or requests.Session()

    def _post_once(self, request: CompletionRequest) -> CompletionResponse:
        url = f"{self.base_url}/v1/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        payload = {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
        }
        started = time.monotonic()
        try:
            response = self._session.post(
                url, json=payload, headers=headers, timeout=self.timeout_seconds
            )
        except requests.Timeout as exc:
            raise GatewayTimeout(f"no response within {self.timeout_seconds}s") from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        latency_ms = int((time.monotonic() - started) * 1000)

        if response.status_code >= 400:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:500]}")
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        if not text:
            raise EmptyResponse("backend returned empty text")
        return CompletionResponse(text=text, latency_ms=latency_ms)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        try:
            return self._post_once(request)
        except (GatewayTimeout, TransportError):
            time.sleep(self.retry_backoff_seconds)
            return self._post_once(request)


def complete(backend: ScriptedBackend | HttpBackend, request: CompletionRequest) -> CompletionResponse:
    """Uniform entry point over any backend."""
    return backend.complete(request)
