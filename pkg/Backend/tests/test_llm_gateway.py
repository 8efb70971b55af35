import json

import numpy as np
import pytest
import requests

from app.core.config import BackendConfig
from app.core.errors import (
    BackendUnavailable,
    DimensionMismatch,
    GatewayError,
    GatewayTimeout,
    MissingReplayEntry,
    NoMatch,
)
from app.core.models import ChatRequest
from app.utils.llm_utils import (
    HttpBackend,
    LLMGateway,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
    ScriptRule,
    chat_digest,
    clean_and_parse_json,
    embed_digest,
    load_script,
)
from tests.helpers import scripted_gateway


def _req(user: str = "hello", tag: str = "ranker:direct", system: str = "sys") -> ChatRequest:
    return ChatRequest(system=system, user=user, temperature=0.1, tag=tag)


@pytest.mark.parametrize("raw", [
    '{"a": 1}',
    'Here you go:\n```json\n{"a": 1}\n```',
    'Sure! {"a": 1} Hope this helps.',
])
def test_clean_and_parse_json_variants(raw: str) -> None:
    data, error = clean_and_parse_json(raw)
    assert error is None
    assert data == {"a": 1}


def test_clean_and_parse_json_failure() -> None:
    data, error = clean_and_parse_json("no json here")
    assert data is None
    assert error


def test_digest_ignores_whitespace_but_not_tag() -> None:
    assert chat_digest(_req(user="a  b\n c")) == chat_digest(_req(user="a b c"))
    assert chat_digest(_req(tag="judge:0")) != chat_digest(_req(tag="judge:1"))
    assert embed_digest("x  y") == embed_digest("x y")


def test_transient_failures_are_retried() -> None:
    gateway, backend = scripted_gateway({"tag:ranker:direct": ScriptRule(response="ok", fail_times=2)}, max_retries=3)
    assert gateway.chat_complete(_req()) == "ok"
    assert backend.count("tag:ranker:direct") == 3


def test_retries_stop_after_max_attempts() -> None:
    gateway, backend = scripted_gateway({"tag:ranker:direct": ScriptRule(response="ok", fail_times=10)}, max_retries=3)
    with pytest.raises(BackendUnavailable):
        gateway.chat_complete(_req())
    assert backend.count("tag:ranker:direct") == 4


def test_unmatched_request_is_not_retried() -> None:
    gateway, backend = scripted_gateway({"tag:judge": "{}"})
    with pytest.raises(NoMatch):
        gateway.chat_complete(_req(tag="planner"))
    assert backend.total_calls == 0


def test_sequence_responses_served_in_order() -> None:
    gateway, _ = scripted_gateway({"tag:planner": ["first", "second"]})
    answers = [gateway.chat_complete(_req(tag="planner")) for _ in range(3)]
    assert answers == ["first", "second", "second"]


def test_matcher_clauses() -> None:
    gateway, backend = scripted_gateway({
        "tag:ranker:*&utterance:sba": "business",
        "tag:ranker:*": "generic",
    })
    assert gateway.chat_complete(_req(user='User Utterance: "sba"')) == "business"
    assert gateway.chat_complete(_req(user='User Utterance: "lost deb"')) == "generic"
    assert backend.count("tag:ranker:*&utterance:sba") == 1


def test_record_then_replay(tmp_path) -> None:
    path = tmp_path / "replay.jsonl"
    _, inner = scripted_gateway({"tag:ranker:direct": "recorded answer"})
    recorder = LLMGateway(RecordingBackend(inner, ReplayStore.load(str(path))), BackendConfig(kind="record"))
    assert recorder.chat_complete(_req()) == "recorded answer"
    recorder.embed_batch(["lost card"])

    replay = LLMGateway(ReplayBackend(ReplayStore.load(str(path))), BackendConfig(kind="replay"))
    assert replay.chat_complete(_req(user="hello  ")) == "recorded answer"
    np.testing.assert_allclose(replay.embed_batch(["lost card"]), recorder.embed_batch(["lost card"]))
    with pytest.raises(MissingReplayEntry):
        replay.chat_complete(_req(user="never recorded"))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert {json.loads(line)["kind"] for line in lines} == {"chat", "embed"}


def test_recording_backend_reuses_store() -> None:
    _, inner = scripted_gateway({"tag:ranker:direct": "answer"})
    gateway = LLMGateway(RecordingBackend(inner, ReplayStore()), BackendConfig(kind="record"))
    gateway.chat_complete(_req())
    gateway.chat_complete(_req())
    assert inner.count("tag:ranker:direct") == 1


def test_embed_batch_normalizes_rows() -> None:
    gateway, _ = scripted_gateway({}, embeddings={"a": [3.0, 4.0], "b": [0.0, 2.0]}, hashing_dim=None)
    matrix = gateway.embed_batch(["a", "b"])
    np.testing.assert_allclose(matrix, [[0.6, 0.8], [0.0, 1.0]])


def test_embed_batch_splits_into_batches() -> None:
    gateway, backend = scripted_gateway({})
    gateway.cfg = gateway.cfg.model_copy(update={"embed_batch_size": 2})
    matrix = gateway.embed_batch(["a", "b", "c", "d", "e"])
    assert matrix.shape == (5, 64)
    assert backend.count("embeddings") == 3


def test_ragged_embeddings_raise_dimension_mismatch() -> None:
    gateway, _ = scripted_gateway({}, embeddings={"a": [1.0, 0.0], "b": [1.0, 0.0, 0.0]}, hashing_dim=None)
    with pytest.raises(DimensionMismatch):
        gateway.embed_batch(["a", "b"])


def test_zero_vector_rejected() -> None:
    gateway, _ = scripted_gateway({}, embeddings={"a": [0.0, 0.0]}, hashing_dim=None)
    with pytest.raises(GatewayError):
        gateway.embed_batch(["a"])


def test_load_script(tmp_path) -> None:
    path = tmp_path / "script.json"
    path.write_text(json.dumps({
        "chat": [{"match": "tag:judge", "response": {"reranked_faqs": []}}],
        "embeddings": {"hashing": 16},
    }), encoding="utf-8")
    gateway = LLMGateway(load_script(str(path)), BackendConfig(kind="scripted"))
    assert json.loads(gateway.chat_complete(_req(tag="judge"))) == {"reranked_faqs": []}
    assert gateway.embed_batch(["x"]).shape == (1, 16)


class _FakeResponse:
    def __init__(self, status_code: int, payload: dict):
        self.status_code = status_code
        self._payload = payload
        self.text = json.dumps(payload)

    def json(self) -> dict:
        return self._payload


class _FakeSession:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def test_http_backend_chat_request_shape(monkeypatch) -> None:
    monkeypatch.setenv("TEST_LLM_KEY", "secret")
    session = _FakeSession([_FakeResponse(200, {"choices": [{"message": {"content": "{}"}}]})])
    cfg = BackendConfig(endpoint_url="http://llm.local/v1/", api_key_env_name="TEST_LLM_KEY", timeout_ms=5000)
    gateway = LLMGateway(HttpBackend(session), cfg)
    assert gateway.chat_complete(_req()) == "{}"
    call = session.calls[0]
    assert call["url"] == "http://llm.local/v1/chat/completions"
    assert call["json"]["response_format"] == {"type": "json_object"}
    assert call["json"]["model"] == "gpt-4o"
    assert call["headers"]["Authorization"] == "Bearer secret"
    assert call["timeout"] == 5.0


def test_http_backend_retries_server_errors() -> None:
    session = _FakeSession([
        _FakeResponse(503, {}),
        _FakeResponse(429, {}),
        _FakeResponse(200, {"choices": [{"message": {"content": "done"}}]}),
    ])
    gateway = LLMGateway(HttpBackend(session), BackendConfig(max_retries=3, backoff_base_ms=0.0))
    assert gateway.chat_complete(_req()) == "done"
    assert len(session.calls) == 3


def test_http_backend_timeout_maps_to_gateway_timeout() -> None:
    session = _FakeSession([requests.exceptions.Timeout("slow")] * 2)
    gateway = LLMGateway(HttpBackend(session), BackendConfig(max_retries=1, backoff_base_ms=0.0))
    with pytest.raises(GatewayTimeout):
        gateway.chat_complete(_req())
    assert len(session.calls) == 2


def test_http_backend_client_error_not_retried() -> None:
    session = _FakeSession([_FakeResponse(400, {"error": "bad"})])
    gateway = LLMGateway(HttpBackend(session), BackendConfig(max_retries=3, backoff_base_ms=0.0))
    with pytest.raises(GatewayError):
        gateway.chat_complete(_req())
    assert len(session.calls) == 1


def test_http_backend_embeddings_sorted_by_index() -> None:
    payload = {"data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}]}
    session = _FakeSession([_FakeResponse(200, payload)])
    gateway = LLMGateway(HttpBackend(session), BackendConfig())
    matrix = gateway.embed_batch(["first", "second"])
    np.testing.assert_allclose(matrix, [[1.0, 0.0], [0.0, 1.0]])
    assert session.calls[0]["url"].endswith("/embeddings")


class _HtmlResponse:
    status_code = 200
    text = "<html>proxy error</html>"

    def json(self) -> dict:
        raise ValueError("Expecting value")


def test_http_backend_non_json_body_is_backend_error() -> None:
    session = _FakeSession([_HtmlResponse()])
    gateway = LLMGateway(HttpBackend(session), BackendConfig(max_retries=0, backoff_base_ms=0.0))
    with pytest.raises(BackendUnavailable) as info:
        gateway.chat_complete(_req())
    assert "non-JSON" in str(info.value)

    session = _FakeSession([_HtmlResponse(), _FakeResponse(200, {"choices": [{"message": {"content": "ok"}}]})])
    gateway = LLMGateway(HttpBackend(session), BackendConfig(max_retries=1, backoff_base_ms=0.0))
    assert gateway.chat_complete(_req()) == "ok"
    assert len(session.calls) == 2
