"""Chat-completion access for every LLM-backed step.

All network I/O in the package goes through :class:`Gateway`. Providers only
translate a :class:`ChatRequest` into a :class:`ChatResponse`; retries,
backoff, the concurrency cap and structured-record parsing live in the gateway.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Protocol, TypeVar

import httpx
from pydantic import BaseModel, ValidationError

from .errors import (
    AuthFailure,
    LLMTimeout,
    MalformedResponse,
    RateLimited,
    ScriptMiss,
    TransportError,
)

logger = logging.getLogger(__name__)

GENERATION_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0

ModelT = TypeVar("ModelT", bound=BaseModel)


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = JUDGE_TEMPERATURE
    max_output_tokens: int = 4096
    response_schema_tag: Literal["free_text", "structured_record"] = "free_text"

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if self.response_schema_tag not in ("free_text", "structured_record"):
            raise ValueError(f"unknown response_schema_tag {self.response_schema_tag!r}")

    def fingerprint(self) -> str:
        payload = json.dumps([self.system_text, self.user_text, float(self.temperature)],
                             ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ChatResponse:
    text: str
    finish_reason: Literal["stop", "length", "error"] = "stop"
    usage: dict[str, int] = field(default_factory=lambda: {"prompt": 0, "completion": 0})

    def __post_init__(self):
        if not self.text and self.finish_reason != "error":
            raise ValueError("empty response text requires finish_reason='error'")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str
    model_id: str
    api_key_source: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    concurrency_cap: int = 4

    def __post_init__(self):
        if self.concurrency_cap < 1:
            raise ValueError("concurrency_cap must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class Provider(Protocol):
    model_id: str

    def send(self, request: ChatRequest) -> ChatResponse: ...


class OpenAICompatibleProvider:
    """POSTs to ``{endpoint_url}/chat/completions`` with a bearer key from the environment."""

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        self.config = config
        self.model_id = config.model_id
        self._client = client or httpx.Client(timeout=config.timeout)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_source)
        if not key:
            raise AuthFailure(f"environment variable {self.config.api_key_source} is not set")
        return key

    def _post(self, path: str, body: dict) -> dict:
        key = self._api_key()
        url = self.config.endpoint_url.rstrip("/") + path
        try:
            resp = self._client.post(url, json=body, headers={"Authorization": f"Bearer {key}"})
        except httpx.TimeoutException as exc:
            raise LLMTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthFailure(f"provider rejected credentials ({resp.status_code})")
        if resp.status_code == 429:
            raise RateLimited("rate limited by provider")
        if resp.status_code >= 500:
            raise TransportError(f"provider error {resp.status_code}")
        if resp.status_code >= 400:
            raise MalformedResponse(f"provider returned {resp.status_code}", resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse("response body is not JSON", resp.text) from exc

    def send(self, request: ChatRequest) -> ChatResponse:
        body: dict[str, Any] = {
            "model": self.config.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        data = self._post("/chat/completions", body)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
            reason = choice.get("finish_reason") or "stop"
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse("unexpected chat-completions body", json.dumps(data)) from exc
        usage = data.get("usage") or {}
        if reason not in ("stop", "length"):
            reason = "stop" if text else "error"
        if not text:
            reason = "error"
        return ChatResponse(
            text=text,
            finish_reason=reason,
            usage={"prompt": usage.get("prompt_tokens", 0),
                   "completion": usage.get("completion_tokens", 0)},
        )

    def embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.config.model_id, "input": texts})
        try:
            items = sorted(data["data"], key=lambda d: d["index"])
            return [list(map(float, d["embedding"])) for d in items]
        except (KeyError, TypeError) as exc:
            raise MalformedResponse("unexpected embeddings body", json.dumps(data)) from exc


class ScriptedProvider:
    """Replays canned responses keyed by request fingerprint."""

    model_id = "scripted"

    def __init__(self, script: dict[str, str]):
        self.script = dict(script)
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedProvider:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("responses", data))

    def send(self, request: ChatRequest) -> ChatResponse:
        fp = request.fingerprint()
        self.calls.append(fp)
        if fp not in self.script:
            raise ScriptMiss(fp, request.system_text[:60])
        return ChatResponse(text=self.script[fp])


class RecordingProvider:
    """Answers via a responder callable and records a fingerprint script.

    Useful for authoring fixture files: run a pipeline against a rule-based
    responder, then :meth:`save` the transcript for :class:`ScriptedProvider`.
    """

    model_id = "scripted"

    def __init__(self, responder: Callable[[ChatRequest], str]):
        self.responder = responder
        self.script: dict[str, str] = {}
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> ChatResponse:
        text = self.responder(request)
        with self._lock:
            self.script[request.fingerprint()] = text
        return ChatResponse(text=text)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"responses": dict(sorted(self.script.items()))}, indent=1, ensure_ascii=False),
            encoding="utf-8")


_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)


def extract_fenced(text: str, languages: tuple[str, ...] = ()) -> str | None:
    """Body of the first fenced block, preferring blocks tagged with ``languages``."""
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        return None
    for lang, body in blocks:
        if lang.lower() in languages:
            return body.strip()
    return blocks[0][1].strip()


def extract_json(text: str) -> Any:
    """Parse a JSON record from model output.

    Tried in order: the whole text, the first fenced block, the first balanced
    ``{...}`` span. Raises ``ValueError`` when none parses.
    """
    stripped = text.strip()
    candidates = [stripped]
    fenced = extract_fenced(stripped, ("json",))
    if fenced is not None:
        candidates.append(fenced)
    start = stripped.find("{")
    if start >= 0:
        depth = 0
        in_str = False
        escape = False
        for i in range(start, len(stripped)):
            ch = stripped[i]
            if in_str:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    candidates.append(stripped[start:i + 1])
                    break
    last_err: Exception | None = None
    for cand in candidates:
        try:
            return json.loads(cand)
        except ValueError as exc:
            last_err = exc
    raise ValueError(f"no JSON record found: {last_err}")


class Gateway:
    """Shared, thread-safe front door to a provider."""

    def __init__(
        self,
        provider: Provider,
        max_retries: int = 3,
        concurrency_cap: int = 4,
        backoff_base: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if concurrency_cap < 1:
            raise ValueError("concurrency_cap must be >= 1")
        self.provider = provider
        self.max_retries = max_retries
        self.concurrency_cap = concurrency_cap
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(concurrency_cap)
        self._stats_lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.n_requests = 0

    @classmethod
    def from_config(cls, config: ProviderConfig, client: httpx.Client | None = None) -> Gateway:
        return cls(OpenAICompatibleProvider(config, client),
                   max_retries=config.max_retries, concurrency_cap=config.concurrency_cap)

    @property
    def model_id(self) -> str:
        return getattr(self.provider, "model_id", "unknown")

    def _send_once(self, request: ChatRequest) -> ChatResponse:
        with self._slots:
            with self._stats_lock:
                self.in_flight += 1
                self.n_requests += 1
                self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                return self.provider.send(request)
            finally:
                with self._stats_lock:
                    self.in_flight -= 1

    def complete(self, request: ChatRequest) -> ChatResponse:
        """Send ``request``; retry rate limits and transport failures with exponential backoff."""
        attempt = 0
        while True:
            try:
                return self._send_once(request)
            except (RateLimited, TransportError, LLMTimeout) as exc:
                if attempt >= self.max_retries:
                    raise
                delay = self.backoff_base * (2 ** attempt)
                logger.warning("provider attempt %d failed (%s); retrying in %.1fs",
                               attempt + 1, exc, delay)
                self._sleep(delay)
                attempt += 1

    def complete_structured(self, request: ChatRequest, model: type[ModelT]) -> ModelT:
        """Complete and parse the reply into ``model``.

        One reprompt is issued on parse failure, carrying the error text. A
        second failure raises :class:`MalformedResponse` with the raw reply.
        """
        if request.response_schema_tag != "structured_record":
            raise ValueError("complete_structured requires response_schema_tag='structured_record'")
        current = request
        raw = ""
        for attempt in range(2):
            resp = self.complete(current)
            raw = resp.text
            try:
                return model.model_validate(extract_json(raw))
            except (ValueError, ValidationError) as exc:
                err = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                logger.info("structured parse failed (attempt %d): %s", attempt + 1, err)
                current = ChatRequest(
                    system_text=request.system_text,
                    user_text=(request.user_text + "\n\nYour previous reply could not be parsed: "
                               + err + "\nReply with only the JSON record."),
                    temperature=request.temperature,
                    max_output_tokens=request.max_output_tokens,
                    response_schema_tag=request.response_schema_tag,
                )
        raise MalformedResponse(f"could not parse a {model.__name__} record", raw)

    def embed(self, texts: list[str]) -> list[list[float]]:
        embed = getattr(self.provider, "embed", None)
        if embed is None:
            raise NotImplementedError(f"provider {self.model_id!r} has no embedding endpoint")
        with self._slots:
            return embed(texts)
