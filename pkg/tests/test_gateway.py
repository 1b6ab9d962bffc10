"""Gateway tests: mock scripting, usage estimation, remote retry behavior."""

import json

import httpx
import pytest

from filingsqa.gateway import (
    ChatRequest,
    ChatResponse,
    GatewayError,
    MockLlmGateway,
    MockScript,
    RemoteLlmGateway,
    ToolCall,
    estimate_tokens,
    rule,
)


def req(text="hello", purpose="", tools=None, system=None):
    messages = [("system", system)] if system else []
    messages.append(("user", text))
    return ChatRequest(model="chat", messages=messages, purpose=purpose, tools=tools)


def test_mock_default_only_script():
    gw = MockLlmGateway(MockScript(default=ChatResponse(text="canned")))
    assert gw.complete(req("anything")).text == "canned"
    assert gw.complete(req("else", purpose="transform")).text == "canned"


def test_mock_first_rule_wins():
    gw = MockLlmGateway(MockScript(rules=[
        rule(contains="rewrite", text="first"),
        rule(contains="rewrite", text="second"),
    ]))
    assert gw.complete(req("please rewrite this")).text == "first"


def test_mock_identity_builtin_echoes_payload():
    gw = MockLlmGateway()
    assert gw.complete(req("the payload", purpose="rewrite", system="instr")).text == "the payload"


def test_mock_summary_builtin_first_30_words():
    gw = MockLlmGateway()
    text = " ".join(f"w{i}" for i in range(40))
    got = gw.complete(req(text, purpose="summary"))
    assert got.text == " ".join(f"w{i}" for i in range(30))


def test_mock_tool_builtin_keyword_selection():
    tools = [{
        "type": "function",
        "function": {"name": "stock_price", "description": "current share price quote",
                     "parameters": {}},
    }]
    gw = MockLlmGateway()
    got = gw.complete(req("what is the share price now", purpose="tool", tools=tools))
    assert got.tool_calls == [ToolCall("stock_price", {})]
    miss = gw.complete(req("unrelated question", purpose="tool", tools=tools))
    assert miss.tool_calls is None


def test_mock_determinism():
    script = MockScript(rules=[rule(contains="a", text="A"), rule(text="B")])
    seq = ["a question", "b question", "another a"]
    runs = []
    for _ in range(3):
        gw = MockLlmGateway(script)
        runs.append([gw.complete(req(s)).text for s in seq])
    assert runs[0] == runs[1] == runs[2] == ["A", "B", "A"]


def test_usage_chars_over_4_rounded_up():
    assert estimate_tokens("x" * 400) == 100
    assert estimate_tokens("x" * 401) == 101
    assert estimate_tokens("") == 0
    gw = MockLlmGateway(MockScript(default=ChatResponse(text="y" * 100)))
    resp = gw.complete(ChatRequest(model="m", messages=[("user", "x" * 300)]))
    # 300-char prompt + 100-char completion = 400-char exchange -> 100 tokens
    assert resp.usage.prompt_tokens == 75
    assert resp.usage.completion_tokens == 25
    assert resp.usage.total == 100


def test_script_file_loading(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps({
        "rules": [
            {"purpose": "rewrite", "text": "rewritten"},
            {"contains": "price", "tool_name": "stock_price", "arguments": {"sym": "Z"}},
        ],
        "default": {"text": "fallback"},
    }))
    gw = MockLlmGateway(MockScript.from_file(path))
    assert gw.complete(req("q", purpose="rewrite")).text == "rewritten"
    got = gw.complete(req("share price please"))
    assert got.tool_calls == [ToolCall("stock_price", {"sym": "Z"})]
    assert gw.complete(req("nothing matches")).text == "fallback"


def test_response_requires_content():
    with pytest.raises(ValueError):
        ChatResponse()


def make_remote(handler, retries=2):
    gw = RemoteLlmGateway("http://test", max_retries=retries)
    gw._client = httpx.Client(transport=httpx.MockTransport(handler), timeout=5)
    return gw


def test_remote_parses_openai_shape():
    def handler(request):
        body = json.loads(request.content)
        assert body["model"] == "chat"
        return httpx.Response(200, json={
            "choices": [{"message": {"content": "hi", "tool_calls": [
                {"function": {"name": "f", "arguments": "{\"a\": 1}"}}
            ]}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3},
        })

    gw = make_remote(handler)
    resp = gw.complete(req("hello"))
    assert resp.text == "hi"
    assert resp.tool_calls == [ToolCall("f", {"a": 1})]
    assert resp.usage.total == 10


def test_remote_retries_5xx_then_succeeds(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda s: None)
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503, text="unavailable")
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    gw = make_remote(handler)
    assert gw.complete(req("q")).text == "ok"
    assert len(calls) == 3


def test_remote_no_retry_on_4xx():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    gw = make_remote(handler)
    with pytest.raises(GatewayError, match="HTTP 400"):
        gw.complete(req("q"))
    assert len(calls) == 1


def test_remote_5xx_exhausts_retries(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda s: None)
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, text="boom")

    gw = make_remote(handler)
    with pytest.raises(GatewayError, match="HTTP 500") as err:
        gw.complete(req("q"))
    assert len(calls) == 3  # initial + 2 retries
    assert err.value.retries == 2


def test_remote_fills_usage_estimate_when_absent():
    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "y" * 40}}]})

    gw = make_remote(handler)
    resp = gw.complete(ChatRequest(model="m", messages=[("user", "x" * 80)]))
    assert resp.usage.prompt_tokens == 20
    assert resp.usage.completion_tokens == 10
