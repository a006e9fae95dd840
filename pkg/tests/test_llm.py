import json
import threading
import time

import httpx
import pytest
from hypothesis import given, strategies as st
from pydantic import BaseModel

from semsql.errors import AuthFailure, LLMTimeout, MalformedResponse, RateLimited, ScriptMiss, TransportError
from semsql.llm import (
    ChatRequest,
    ChatResponse,
    Gateway,
    OpenAICompatibleProvider,
    ProviderConfig,
    RecordingProvider,
    ScriptedProvider,
    extract_fenced,
    extract_json,
)
from semsql.metrics import ConsistencyLabel, consistency_request

from conftest import no_sleep


def req(user="hello", tag="free_text", temp=0.0):
    return ChatRequest("system", user, temperature=temp, response_schema_tag=tag)


def test_scripted_echo():
    r = req()
    gw = Gateway(ScriptedProvider({r.fingerprint(): "ok"}))
    assert gw.complete(r).text == "ok"


def test_identical_requests_identical_responses():
    r = req()
    gw = Gateway(ScriptedProvider({r.fingerprint(): "same"}))
    assert gw.complete(r).text == gw.complete(req()).text == "same"


def test_script_miss_names_fingerprint():
    with pytest.raises(ScriptMiss) as info:
        Gateway(ScriptedProvider({})).complete(req())
    assert info.value.fingerprint == req().fingerprint()


def test_fingerprint_covers_texts_and_temperature():
    base = req()
    assert base.fingerprint() == req().fingerprint()
    assert base.fingerprint() != req(user="other").fingerprint()
    assert base.fingerprint() != req(temp=0.7).fingerprint()
    assert base.fingerprint() != ChatRequest("system2", "hello").fingerprint()
    # the schema tag and token budget are not part of the key
    assert base.fingerprint() == ChatRequest("system", "hello", max_output_tokens=7).fingerprint()


def test_request_and_response_invariants():
    with pytest.raises(ValueError):
        ChatRequest("s", "")
    with pytest.raises(ValueError):
        ChatRequest("s", "u", temperature=2.5)
    with pytest.raises(ValueError):
        ChatResponse(text="")
    assert ChatResponse(text="", finish_reason="error").text == ""
    with pytest.raises(ValueError):
        ProviderConfig("http://x", "m", concurrency_cap=0)


def test_consistency_record_parsed():
    r = consistency_request("CREATE TABLE t (a);", "q", "SELECT a FROM t")
    gw = Gateway(ScriptedProvider({r.fingerprint(): '{"label": 1, "reasoning": "match"}'}))
    got = gw.complete_structured(r, ConsistencyLabel)
    assert got.label == 1 and got.reasoning == "match"


def test_fenced_record_extracted():
    r = req(tag="structured_record")
    text = 'Sure, here it is:\n```json\n{"label": 0, "reasoning": "x"}\n```\nDone.'
    gw = Gateway(ScriptedProvider({r.fingerprint(): text}))
    assert gw.complete_structured(r, ConsistencyLabel).label == 0


def test_embedded_braces_extracted():
    assert extract_json('prefix {"a": "}{", "b": {"c": 1}} suffix') == {"a": "}{", "b": {"c": 1}}


def test_extract_fenced_prefers_language():
    text = "```\nplain\n```\n```sql\nSELECT 1\n```"
    assert extract_fenced(text, ("sql",)) == "SELECT 1"
    assert extract_fenced(text) == "plain"
    assert extract_fenced("no fence") is None


class _Flaky:
    model_id = "flaky"

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def send(self, request):
        self.requests.append(request)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return ChatResponse(text=reply)


def test_unparseable_twice_raises_with_raw_text():
    prov = _Flaky(["not json at all", "still not json"])
    with pytest.raises(MalformedResponse) as info:
        Gateway(prov).complete_structured(req(tag="structured_record"), ConsistencyLabel)
    assert info.value.raw_text == "still not json"
    assert len(prov.requests) == 2
    assert "could not be parsed" in prov.requests[1].user_text


def test_reprompt_recovers():
    prov = _Flaky(["garbage", '{"label": 1}'])
    got = Gateway(prov).complete_structured(req(tag="structured_record"), ConsistencyLabel)
    assert got.label == 1


def test_structured_requires_tag():
    with pytest.raises(ValueError):
        Gateway(_Flaky([])).complete_structured(req(), ConsistencyLabel)


def test_retries_transport_and_rate_limit_with_backoff():
    delays = []
    prov = _Flaky([RateLimited("429"), TransportError("boom"), LLMTimeout("slow"), "fine"])
    gw = Gateway(prov, max_retries=3, backoff_base=0.5, sleep=delays.append)
    assert gw.complete(req()).text == "fine"
    assert delays == [0.5, 1.0, 2.0]


def test_retries_exhausted():
    prov = _Flaky([RateLimited("a"), RateLimited("b")])
    with pytest.raises(RateLimited):
        Gateway(prov, max_retries=1, sleep=no_sleep).complete(req())
    assert len(prov.requests) == 2


def test_auth_failure_not_retried():
    prov = _Flaky([AuthFailure("no"), "unused"])
    with pytest.raises(AuthFailure):
        Gateway(prov, sleep=no_sleep).complete(req())
    assert len(prov.requests) == 1


class _Slow:
    model_id = "slow"

    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def send(self, request):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.02)
        with self.lock:
            self.active -= 1
        return ChatResponse(text="x")


def test_concurrency_cap_enforced():
    prov = _Slow()
    gw = Gateway(prov, concurrency_cap=3)
    threads = [threading.Thread(target=gw.complete, args=(req(str(i)),)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert prov.peak <= 3 and gw.peak_in_flight <= 3
    assert gw.n_requests == 16


def test_recording_then_replay(tmp_path):
    rec = RecordingProvider(lambda r: r.user_text.upper())
    gw = Gateway(rec)
    gw.complete(req("abc"))
    rec.save(tmp_path / "s.json")
    replay = Gateway(ScriptedProvider.from_file(tmp_path / "s.json"))
    assert replay.complete(req("abc")).text == "ABC"


# -- OpenAI-compatible wire ----------------------------------------------------

def _provider(handler, monkeypatch, key="sk-test"):
    if key is None:
        monkeypatch.delenv("SEMSQL_TEST_KEY", raising=False)
    else:
        monkeypatch.setenv("SEMSQL_TEST_KEY", key)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return OpenAICompatibleProvider(
        ProviderConfig("https://llm.example/v1", "m-1", api_key_source="SEMSQL_TEST_KEY"), client)


def test_unset_key_fails_before_network(monkeypatch):
    calls = []
    prov = _provider(lambda r: calls.append(r) or httpx.Response(200), monkeypatch, key=None)
    with pytest.raises(AuthFailure):
        prov.send(req())
    assert calls == []


def test_wire_format(monkeypatch):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "choices": [{"message": {"content": "hi"}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 1}})

    resp = _provider(handler, monkeypatch).send(req(temp=0.7))
    assert resp.text == "hi" and resp.usage == {"prompt": 3, "completion": 1}
    assert seen["url"] == "https://llm.example/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"]["model"] == "m-1" and seen["body"]["temperature"] == 0.7
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]


@pytest.mark.parametrize("status,exc", [(401, AuthFailure), (403, AuthFailure), (429, RateLimited),
                                        (503, TransportError), (400, MalformedResponse)])
def test_status_mapping(monkeypatch, status, exc):
    with pytest.raises(exc):
        _provider(lambda r: httpx.Response(status, text="err"), monkeypatch).send(req())


def test_timeout_mapping(monkeypatch):
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)
    with pytest.raises(LLMTimeout):
        _provider(handler, monkeypatch).send(req())


def test_gateway_retries_429_over_the_wire(monkeypatch):
    replies = [httpx.Response(429), httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})]
    prov = _provider(lambda r: replies.pop(0), monkeypatch)
    assert Gateway(prov, sleep=no_sleep).complete(req()).text == "ok"


def test_embeddings_endpoint(monkeypatch):
    def handler(request):
        assert request.url.path.endswith("/embeddings")
        return httpx.Response(200, json={"data": [{"index": 1, "embedding": [0, 1]},
                                                  {"index": 0, "embedding": [1, 0]}]})
    assert _provider(handler, monkeypatch).embed(["a", "b"]) == [[1.0, 0.0], [0.0, 1.0]]


@given(st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=4),
       st.text(alphabet="abc xyz\n", max_size=20))
def test_extract_json_finds_embedded_record(record, noise):
    text = f"{noise}```json\n{json.dumps(record)}\n```{noise}"
    assert extract_json(text) == record
