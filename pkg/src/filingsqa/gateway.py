"""Single chokepoint for all LLM traffic: chat completion, tool calls, annotation.

Two backends share one interface: `RemoteLlmGateway` speaks the
OpenAI-compatible chat-completions protocol over HTTP, and `MockLlmGateway`
replays a deterministic script so every LLM-dependent step of the system is
testable offline. Requests carry a `purpose` tag naming the pipeline step
that issued them; mock rules and built-in defaults key off it.

Prompt convention used across the codebase: instructions go in the system
message and the payload being operated on (chunk text, query, ...) is exactly
the last user message. The mock's identity behaviors rely on this.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


@dataclass
class ChatRequest:
    model: str
    messages: list[tuple[str, str]]  # (role, text)
    tools: Optional[list[dict]] = None  # OpenAI function-calling schema objects
    temperature: float = 0.0
    purpose: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")

    def last_user_text(self) -> str:
        for role, text in reversed(self.messages):
            if role == "user":
                return text
        return self.messages[-1][1]

    def full_text(self) -> str:
        return "\n".join(text for _, text in self.messages)


@dataclass
class ChatResponse:
    text: Optional[str] = None
    tool_calls: Optional[list[ToolCall]] = None
    usage: Usage = field(default_factory=lambda: Usage(0, 0))

    def __post_init__(self) -> None:
        if self.text is None and not self.tool_calls:
            raise ValueError("response must carry text or tool calls")


class GatewayError(Exception):
    """Raised when the backing LLM call fails for good."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class LlmGateway(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


def estimate_tokens(text: str) -> int:
    """Characters/4 rounded up: the convention used whenever the provider
    reports no usage, so mock and remote ledgers stay comparable."""
    return math.ceil(len(text) / 4)


def _fill_usage(req: ChatRequest, resp: ChatResponse) -> ChatResponse:
    if resp.usage.total == 0:
        completion = resp.text or ""
        if resp.tool_calls:
            completion += "".join(
                tc.name + json.dumps(tc.arguments, sort_keys=True) for tc in resp.tool_calls
            )
        resp.usage = Usage(estimate_tokens(req.full_text()), estimate_tokens(completion))
    return resp


# ---------------------------------------------------------------------------
# Deterministic mock


Matcher = Callable[[ChatRequest], bool]
Responder = Callable[[ChatRequest], ChatResponse]


@dataclass
class MockRule:
    """First-match-wins scripted rule: predicate over the request, canned reply.

    `respond` may be a fixed ChatResponse or a callable building one from the
    request; callables must be deterministic for the mock to stay scripted.
    """

    match: Matcher
    respond: ChatResponse | Responder

    def response_for(self, req: ChatRequest) -> ChatResponse:
        if callable(self.respond):
            return self.respond(req)
        return ChatResponse(
            text=self.respond.text,
            tool_calls=self.respond.tool_calls,
            usage=self.respond.usage,
        )


def rule(
    contains: Optional[str] = None,
    purpose: Optional[str] = None,
    *,
    text: Optional[str] = None,
    tool_name: Optional[str] = None,
    arguments: Optional[dict] = None,
    respond: Optional[Responder] = None,
) -> MockRule:
    """Build a MockRule from substring/purpose matchers and a canned reply."""

    def matches(req: ChatRequest) -> bool:
        if purpose is not None and req.purpose != purpose:
            return False
        if contains is not None and contains not in req.full_text():
            return False
        return True

    if respond is not None:
        return MockRule(matches, respond)
    if tool_name is not None:
        return MockRule(
            matches, ChatResponse(tool_calls=[ToolCall(tool_name, arguments or {})])
        )
    if text is None:
        raise ValueError("rule needs text, tool_name, or respond")
    return MockRule(matches, ChatResponse(text=text))


@dataclass
class MockScript:
    rules: list[MockRule] = field(default_factory=list)
    default: Optional[ChatResponse] = None

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        """Load a script from JSON: {"rules": [{"purpose"?, "contains"?,
        "text"? | "tool_name"?+"arguments"?}], "default"?: {"text": ...}}."""
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            rule(
                contains=entry.get("contains"),
                purpose=entry.get("purpose"),
                text=entry.get("text"),
                tool_name=entry.get("tool_name"),
                arguments=entry.get("arguments"),
            )
            for entry in obj.get("rules", [])
        ]
        default = None
        if "default" in obj:
            default = ChatResponse(text=obj["default"].get("text", ""))
        return cls(rules=rules, default=default)


def _first_n_words(text: str, n: int) -> str:
    return " ".join(text.split()[:n])


class MockLlmGateway:
    """Scripted gateway: first matching rule wins, then the script default,
    then purpose-specific built-ins.

    Built-ins make the bare `MockLlmGateway()` the "identity mock" used all
    over the tests and the offline CLI: rewrite/transform/co-reference calls
    echo their payload unchanged, summary calls return the payload's first 30
    words, and tool calls pick the offered tool whose name or description
    shares a keyword with the payload (empty canned arguments).
    """

    SUMMARY_WORDS = 30

    def __init__(self, script: Optional[MockScript] = None):
        self.script = script or MockScript()
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
        for r in self.script.rules:
            if r.match(req):
                return _fill_usage(req, r.response_for(req))
        if self.script.default is not None:
            d = self.script.default
            return _fill_usage(req, ChatResponse(text=d.text, tool_calls=d.tool_calls))
        return _fill_usage(req, self._builtin(req))

    def _builtin(self, req: ChatRequest) -> ChatResponse:
        payload = req.last_user_text()
        if req.purpose == "summary":
            return ChatResponse(text=_first_n_words(payload, self.SUMMARY_WORDS))
        if req.purpose == "tool" and req.tools:
            chosen = _select_tool_by_keyword(payload, req.tools)
            if chosen is not None:
                return ChatResponse(tool_calls=[ToolCall(chosen, {})])
            return ChatResponse(text="no matching tool")
        return ChatResponse(text=payload)


def _select_tool_by_keyword(payload: str, tools: list[dict]) -> Optional[str]:
    payload_tokens = set(payload.lower().replace("?", " ").replace(",", " ").split())
    for spec in tools:
        fn = spec.get("function", spec)
        name = fn.get("name", "")
        keywords = set(name.lower().split("_"))
        keywords |= set(fn.get("description", "").lower().split())
        if keywords & payload_tokens:
            return name
    return None


# ---------------------------------------------------------------------------
# Remote OpenAI-compatible backend


class RemoteLlmGateway:
    """HTTP client for an OpenAI-compatible chat-completions endpoint.

    Retries 5xx responses (2 attempts, exponential backoff); 4xx errors fail
    immediately. The API key is read from the environment variable named in
    the constructor so secrets never live in config files.
    """

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "FILINGSQA_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 2,
        max_concurrency: int = 8,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self._client = httpx.Client(timeout=timeout)
        self._sem = threading.Semaphore(max_concurrency)

    def complete(self, req: ChatRequest) -> ChatResponse:
        payload: dict = {
            "model": req.model,
            "messages": [{"role": role, "content": text} for role, text in req.messages],
            "temperature": req.temperature,
        }
        if req.tools:
            payload["tools"] = req.tools
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        attempt = 0
        while True:
            with self._sem:
                try:
                    resp = self._client.post(
                        f"{self.endpoint}/chat/completions", json=payload, headers=headers
                    )
                except httpx.HTTPError as exc:
                    if attempt >= self.max_retries:
                        raise GatewayError(f"transport failure: {exc}", retries=attempt)
                    attempt += 1
                    time.sleep(0.5 * 2 ** (attempt - 1))
                    continue
            if resp.status_code >= 500 and attempt < self.max_retries:
                attempt += 1
                time.sleep(0.5 * 2 ** (attempt - 1))
                continue
            if resp.status_code >= 400:
                raise GatewayError(
                    f"HTTP {resp.status_code}: {resp.text[:200]}", retries=attempt
                )
            return _fill_usage(req, self._parse(resp.json()))

    @staticmethod
    def _parse(body: dict) -> ChatResponse:
        message = body["choices"][0]["message"]
        tool_calls = None
        if message.get("tool_calls"):
            tool_calls = []
            for tc in message["tool_calls"]:
                fn = tc["function"]
                args = fn.get("arguments") or "{}"
                if isinstance(args, str):
                    try:
                        args = json.loads(args)
                    except json.JSONDecodeError:
                        args = {"_raw": args}
                tool_calls.append(ToolCall(fn["name"], args))
        usage = Usage(0, 0)
        if body.get("usage"):
            usage = Usage(
                int(body["usage"].get("prompt_tokens", 0)),
                int(body["usage"].get("completion_tokens", 0)),
            )
        return ChatResponse(text=message.get("content"), tool_calls=tool_calls, usage=usage)
