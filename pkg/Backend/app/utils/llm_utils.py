# Backend/app/utils/llm_utils.py
import hashlib
import json
import random
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import requests
from loguru import logger
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from app.core.config import BackendConfig
from app.core.errors import (
    BackendUnavailable,
    ConfigError,
    DimensionMismatch,
    GatewayError,
    GatewayTimeout,
    MissingReplayEntry,
    NoMatch,
)
from app.core.models import ChatRequest

RETRYABLE_ERRORS = (BackendUnavailable, GatewayTimeout)


def clean_and_parse_json(raw_text: str):
    """
    Extract a JSON object from an LLM response that may be wrapped in prose or
    code fences. Returns (parsed, None) or (None, error message).
    """
    if not raw_text or not isinstance(raw_text, str):
        return None, "Invalid or empty response text"

    # First attempt: direct parsing
    try:
        return json.loads(raw_text), None
    except json.JSONDecodeError:
        logger.debug("Direct JSON parsing failed, attempting to clean response...")

    # Second attempt: extract from markdown code block
    fence = re.search(r"```(?:json|JSON)?\s*(.*?)```", raw_text, re.DOTALL)
    if fence:
        try:
            return json.loads(fence.group(1).strip()), None
        except json.JSONDecodeError as e:
            logger.debug(f"Code block extraction failed: {e}")

    # Third attempt: find outermost braces
    json_start = raw_text.find("{")
    json_end = raw_text.rfind("}")
    if json_start >= 0 and json_end > json_start:
        try:
            return json.loads(raw_text[json_start:json_end + 1]), None
        except json.JSONDecodeError as e:
            logger.debug(f"Brace extraction failed: {e}")

    error_msg = "Could not parse response as valid JSON after multiple attempts."
    logger.warning(f"{error_msg} Raw response: {raw_text[:300]}...")
    return None, error_msg


# --- Request digests and the replay store ---
def _canonical_text(text: str) -> str:
    return " ".join(text.split())


def chat_digest(req: ChatRequest) -> str:
    payload = {
        "kind": "chat",
        "system": _canonical_text(req.system),
        "user": _canonical_text(req.user),
        "temperature": round(req.temperature, 6),
        "force_json": req.force_json,
        "tag": req.tag,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


def embed_digest(text: str) -> str:
    payload = {"kind": "embed", "input": _canonical_text(text)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


class ReplayStore:
    """
    Map from request digest to recorded response, persisted as JSON-lines of
    {digest, kind, response}. Reads go to an in-memory dict; writes are
    serialized.
    """

    def __init__(self, entries: Optional[Dict[str, Tuple[str, Any]]] = None, path: Optional[str] = None):
        self._entries: Dict[str, Tuple[str, Any]] = dict(entries or {})
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str) -> "ReplayStore":
        entries: Dict[str, Tuple[str, Any]] = {}
        store_path = Path(path)
        if store_path.exists():
            with store_path.open("r", encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        entries[record["digest"]] = (record["kind"], record["response"])
                    except (json.JSONDecodeError, KeyError) as e:
                        logger.warning(f"Skipping malformed replay line {line_no} in {path}: {e}")
        logger.info(f"Loaded {len(entries)} replay entries from {path}")
        return cls(entries, path=path)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self._entries

    def get(self, digest: str) -> Any:
        entry = self._entries.get(digest)
        if entry is None:
            raise MissingReplayEntry(digest)
        return entry[1]

    def record(self, digest: str, kind: str, response: Any) -> None:
        with self._lock:
            if digest in self._entries:
                return
            self._entries[digest] = (kind, response)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(json.dumps({"digest": digest, "kind": kind, "response": response}, ensure_ascii=False) + "\n")


# --- Backends ---
class ChatBackend(Protocol):
    name: str

    def chat(self, req: ChatRequest, cfg: BackendConfig) -> str: ...

    def embed(self, texts: Sequence[str], cfg: BackendConfig) -> List[List[float]]: ...


class HttpBackend:
    """OpenAI-compatible chat/completions and embeddings over HTTP."""

    name = "live"

    def __init__(self, session: Optional[requests.Session] = None):
        self.session = session or requests.Session()

    def _post(self, url: str, body: dict, cfg: BackendConfig) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = cfg.api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self.session.post(url, json=body, headers=headers, timeout=cfg.timeout_ms / 1000.0)
        except requests.exceptions.Timeout as e:
            raise GatewayTimeout(f"Request to {url} timed out after {cfg.timeout_ms} ms") from e
        except requests.exceptions.RequestException as e:
            raise BackendUnavailable(f"Request to {url} failed: {e}") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise BackendUnavailable(f"{url} returned HTTP {response.status_code}")
        if response.status_code >= 400:
            raise GatewayError(f"{url} rejected the request with HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise BackendUnavailable(f"{url} returned a non-JSON body: {response.text[:200]!r}") from e

    def chat(self, req: ChatRequest, cfg: BackendConfig) -> str:
        body: Dict[str, Any] = {
            "model": cfg.chat_model_name,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
        }
        if req.force_json:
            body["response_format"] = {"type": "json_object"}
        data = self._post(f"{cfg.endpoint_url.rstrip('/')}/chat/completions", body, cfg)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise BackendUnavailable(f"Malformed chat completion payload: {e}") from e

    def embed(self, texts: Sequence[str], cfg: BackendConfig) -> List[List[float]]:
        body = {"model": cfg.embed_model_name, "input": list(texts)}
        data = self._post(f"{cfg.endpoint_url.rstrip('/')}/embeddings", body, cfg)
        try:
            rows = sorted(data["data"], key=lambda item: item.get("index", 0))
            return [row["embedding"] for row in rows]
        except (KeyError, TypeError) as e:
            raise BackendUnavailable(f"Malformed embeddings payload: {e}") from e


class ReplayBackend:
    """Answers only from a replay store; never touches the network."""

    name = "replay"

    def __init__(self, store: ReplayStore):
        self.store = store

    def chat(self, req: ChatRequest, cfg: BackendConfig) -> str:
        return self.store.get(chat_digest(req))

    def embed(self, texts: Sequence[str], cfg: BackendConfig) -> List[List[float]]:
        return [self.store.get(embed_digest(text)) for text in texts]


class RecordingBackend:
    """Serves from the replay store when possible, otherwise calls through and records."""

    name = "record"

    def __init__(self, inner: ChatBackend, store: ReplayStore):
        self.inner = inner
        self.store = store

    def chat(self, req: ChatRequest, cfg: BackendConfig) -> str:
        digest = chat_digest(req)
        if digest in self.store:
            return self.store.get(digest)
        text = self.inner.chat(req, cfg)
        self.store.record(digest, "chat", text)
        return text

    def embed(self, texts: Sequence[str], cfg: BackendConfig) -> List[List[float]]:
        missing = [t for t in dict.fromkeys(texts) if embed_digest(t) not in self.store]
        if missing:
            for text, vector in zip(missing, self.inner.embed(missing, cfg)):
                self.store.record(embed_digest(text), "embed", list(map(float, vector)))
        return [self.store.get(embed_digest(t)) for t in texts]


# --- Scripted backend (offline tests and demos) ---
Matcher = Union[str, Callable[[ChatRequest], bool]]
Response = Union[str, Sequence[str], Callable[[ChatRequest], str], BaseException, type]


@dataclass
class ScriptRule:
    """
    A canned response. ``response`` may be a string, a list of strings served in
    call order (the last one repeats), a callable of the request, or an
    exception to raise. ``fail_times`` raises BackendUnavailable for the first
    N calls; ``delay_ms`` sleeps before answering.
    """
    response: Response
    delay_ms: float = 0.0
    fail_times: int = 0


def _matches(matcher: Matcher, req: ChatRequest) -> bool:
    if callable(matcher):
        return bool(matcher(req))
    for clause in matcher.split("&"):
        key, _, value = clause.partition(":")
        if key == "tag":
            if value.endswith("*"):
                if not req.tag.startswith(value[:-1]):
                    return False
            elif req.tag != value:
                return False
        elif key == "utterance":
            if f'"{value}"' not in req.user:
                return False
        elif key == "text":
            if value not in req.system and value not in req.user:
                return False
        else:
            raise ConfigError(f"Unknown matcher clause '{clause}'")
    return True


def hashing_embedder(dimension: int = 64) -> Callable[[str], List[float]]:
    """
    Deterministic bag-of-words embedding: tokens hashed into ``dimension``
    buckets. Texts sharing words get positive cosine similarity.
    """
    def embed(text: str) -> List[float]:
        vector = np.zeros(dimension, dtype=np.float64)
        for token in re.findall(r"[^\W_]+", text.casefold()):
            bucket = int(hashlib.md5(token.encode("utf-8")).hexdigest(), 16) % dimension
            vector[bucket] += 1.0
        if not vector.any():
            vector[0] = 1.0
        return vector.tolist()
    return embed


class ScriptedBackend:
    """
    Deterministic backend driven by a script of matcher -> response rules.
    Counts invocations per matcher (failed attempts included).
    """

    name = "scripted"

    def __init__(
        self,
        script: Mapping[Matcher, Union[Response, ScriptRule]],
        embeddings: Union[None, Mapping[str, Sequence[float]], Callable[[str], Sequence[float]]] = None,
        embed_delay_ms: float = 0.0,
    ):
        self.rules: List[Tuple[Matcher, ScriptRule]] = [
            (matcher, rule if isinstance(rule, ScriptRule) else ScriptRule(response=rule))
            for matcher, rule in script.items()
        ]
        self.embeddings = embeddings
        self.embed_delay_ms = embed_delay_ms
        self.counts: Counter = Counter()
        self.requests: List[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def total_calls(self) -> int:
        with self._lock:
            return sum(self.counts.values())

    def count(self, matcher: Matcher) -> int:
        with self._lock:
            return self.counts[self._key(matcher)]

    @staticmethod
    def _key(matcher: Matcher) -> str:
        return matcher if isinstance(matcher, str) else getattr(matcher, "__name__", repr(matcher))

    def chat(self, req: ChatRequest, cfg: BackendConfig) -> str:
        for matcher, rule in self.rules:
            if _matches(matcher, req):
                break
        else:
            raise NoMatch(f"[{req.tag}] {req.user}")
        key = self._key(matcher)
        with self._lock:
            self.counts[key] += 1
            call_index = self.counts[key] - 1
            self.requests.append(req)
        if rule.delay_ms:
            time.sleep(rule.delay_ms / 1000.0)
        if call_index < rule.fail_times:
            raise BackendUnavailable(f"Scripted failure {call_index + 1}/{rule.fail_times} for '{key}'")
        response = rule.response
        if isinstance(response, BaseException):
            raise response
        if isinstance(response, type) and issubclass(response, BaseException):
            raise response(f"Scripted error for '{key}'")
        if callable(response):
            return response(req)
        if isinstance(response, str):
            return response
        answers = list(response)
        return answers[min(call_index - rule.fail_times, len(answers) - 1)]

    def embed(self, texts: Sequence[str], cfg: BackendConfig) -> List[List[float]]:
        with self._lock:
            self.counts["embeddings"] += 1
        if self.embed_delay_ms:
            time.sleep(self.embed_delay_ms / 1000.0)
        if self.embeddings is None:
            raise NoMatch(f"[embeddings] {texts[0] if texts else ''}")
        vectors = []
        for text in texts:
            if callable(self.embeddings):
                vectors.append(list(self.embeddings(text)))
            elif text in self.embeddings:
                vectors.append(list(self.embeddings[text]))
            else:
                raise NoMatch(f"[embeddings] {text}")
        return vectors


def scripted_backend(script: Mapping[Matcher, Union[Response, ScriptRule]], **kwargs: Any) -> ScriptedBackend:
    return ScriptedBackend(script, **kwargs)


def load_script(path: str) -> ScriptedBackend:
    """
    Build a scripted backend from a JSON file:
    {"chat": [{"match": "...", "response": "..." | {...}, "delay_ms": 0}],
     "embeddings": {"hashing": 64}}
    JSON responses given as objects are serialized back to text.
    """
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot load backend script {path}: {e}") from e
    script: Dict[Matcher, ScriptRule] = {}
    for rule in spec.get("chat", []):
        response = rule["response"]
        if isinstance(response, list):
            response = [r if isinstance(r, str) else json.dumps(r, ensure_ascii=False) for r in response]
        elif not isinstance(response, str):
            response = json.dumps(response, ensure_ascii=False)
        script[rule["match"]] = ScriptRule(response=response, delay_ms=rule.get("delay_ms", 0.0))
    embeddings_spec = spec.get("embeddings", {"hashing": 64})
    if "hashing" in embeddings_spec:
        embeddings: Any = hashing_embedder(int(embeddings_spec["hashing"]))
    else:
        embeddings = embeddings_spec.get("vectors", {})
    return ScriptedBackend(script, embeddings=embeddings)


# --- Gateway ---
def jittered_backoff(base_ms: float, factor: float = 2.0, jitter: float = 0.2) -> Callable[[Any], float]:
    def wait(retry_state) -> float:
        delay = (base_ms / 1000.0) * factor ** (retry_state.attempt_number - 1)
        return delay * random.uniform(1.0 - jitter, 1.0 + jitter)
    return wait


def _log_retry(retry_state) -> None:
    error = retry_state.outcome.exception() if retry_state.outcome else None
    logger.warning(f"LLM call attempt {retry_state.attempt_number} failed ({error}); retrying")


class LLMGateway:
    """
    Uniform chat/embedding access with retries. Safe for concurrent use; it
    holds no per-request state.
    """

    def __init__(self, backend: ChatBackend, cfg: Optional[BackendConfig] = None):
        self.backend = backend
        self.cfg = cfg or BackendConfig(kind=getattr(backend, "name", "live"))

    @property
    def kind(self) -> str:
        return getattr(self.backend, "name", self.cfg.kind)

    def _retrying(self) -> Retrying:
        return Retrying(
            stop=stop_after_attempt(self.cfg.max_retries + 1),
            wait=jittered_backoff(self.cfg.backoff_base_ms),
            retry=retry_if_exception_type(RETRYABLE_ERRORS),
            before_sleep=_log_retry,
            reraise=True,
        )

    def chat_complete(self, req: ChatRequest) -> str:
        started = time.perf_counter()
        text = self._retrying()(self.backend.chat, req, self.cfg)
        logger.debug(f"chat [{req.tag}] answered in {(time.perf_counter() - started) * 1000:.0f} ms")
        return text

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        """
        Embed texts in batches; returns an (n, d) array of L2-normalized rows.
        """
        if not texts:
            raise ValueError("embed_batch needs at least one text")
        rows: List[Sequence[float]] = []
        size = self.cfg.embed_batch_size
        for start in range(0, len(texts), size):
            chunk = list(texts[start:start + size])
            vectors = self._retrying()(self.backend.embed, chunk, self.cfg)
            if len(vectors) != len(chunk):
                raise DimensionMismatch(f"{len(vectors)} vectors for {len(chunk)} inputs")
            rows.extend(vectors)
        dimensions = sorted({len(v) for v in rows})
        if len(dimensions) != 1:
            raise DimensionMismatch(dimensions)
        matrix = np.asarray(rows, dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise GatewayError("Backend returned a zero embedding vector")
        return matrix / norms


def build_gateway(cfg: BackendConfig, backend: Optional[ChatBackend] = None) -> LLMGateway:
    """
    Create a gateway for the configured backend kind. A scripted backend can
    be passed directly (tests) or loaded from ``cfg.script_path``.
    """
    if backend is not None:
        return LLMGateway(backend, cfg)
    if cfg.kind == "scripted":
        if not cfg.script_path:
            raise ConfigError("Scripted backend needs backend.script_path")
        return LLMGateway(load_script(cfg.script_path), cfg)
    if cfg.kind == "replay":
        if not cfg.replay_path:
            raise ConfigError("Replay backend needs backend.replay_path")
        return LLMGateway(ReplayBackend(ReplayStore.load(cfg.replay_path)), cfg)
    if not cfg.api_key():
        logger.warning(f"Environment variable {cfg.api_key_env_name} is not set; requests go out unauthenticated")
    if cfg.kind == "record":
        if not cfg.replay_path:
            raise ConfigError("Record backend needs backend.replay_path")
        return LLMGateway(RecordingBackend(HttpBackend(), ReplayStore.load(cfg.replay_path)), cfg)
    logger.info(f"Using live backend {cfg.endpoint_url} (chat={cfg.chat_model_name}, embed={cfg.embed_model_name})")
    return LLMGateway(HttpBackend(), cfg)
