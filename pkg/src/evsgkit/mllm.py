"""Chat-completion client for an external multimodal endpoint, plus an offline mock.

Both :class:`HttpChatClient` and :class:`ScriptedMock` expose
``complete(request) -> ChatResponse``; pipeline code only depends on that.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .errors import (
    ConfigError,
    EmptyResponseError,
    EndpointError,
    FixtureMissError,
    TransportError,
)

log = logging.getLogger(__name__)

ENV_ENDPOINT_URL = "EVSG_ENDPOINT_URL"
DEFAULT_TOKEN_ENV = "EVSG_API_KEY"

_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"unsupported role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model_id: str = "qwen2.5-vl-7b-instruct"
    video_ref: str | None = None
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("request needs at least one user message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def to_payload(self) -> dict:
        """Request body in the common chat-completions shape."""
        messages = []
        video_attached = False
        for m in self.messages:
            if m.role == "user" and self.video_ref and not video_attached:
                content = [
                    {"type": "video_url", "video_url": {"url": self.video_ref}},
                    {"type": "text", "text": m.content},
                ]
                video_attached = True
            else:
                content = m.content
            messages.append({"role": m.role, "content": content})
        return {
            "model": self.model_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency_ms: int = 0
    token_counts: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    auth_token_env: str = DEFAULT_TOKEN_ENV
    timeout_ms: int = 120_000
    max_retries: int = 3
    backoff_ms: int = 1000
    max_in_flight: int = 4
    require_auth: bool = False

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ConfigError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.backoff_ms < 0:
            raise ConfigError("backoff_ms must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

    @classmethod
    def from_env(cls, **overrides) -> EndpointConfig:
        base_url = overrides.pop("base_url", None) or os.environ.get(ENV_ENDPOINT_URL)
        if not base_url:
            raise ConfigError(f"no endpoint URL: set {ENV_ENDPOINT_URL} or endpoint.base_url")
        return cls(base_url=base_url, **overrides)

    def backoff_schedule(self) -> list[float]:
        """Seconds to sleep before each retry; doubles every time."""
        return [self.backoff_ms * 2**k / 1000.0 for k in range(self.max_retries)]


def _canonical_text(text: str) -> str:
    return unicodedata.normalize("NFC", text.replace("\r\n", "\n"))


def fingerprint(request: ChatRequest) -> str:
    """sha256 over messages, model and video reference; sampling params excluded."""
    body = {
        "messages": [[m.role, _canonical_text(m.content)] for m in request.messages],
        "model_id": request.model_id,
        "video_ref": request.video_ref,
    }
    blob = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ChatClient(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class HttpChatClient:
    """Blocking client; safe to share between threads.

    At most ``config.max_in_flight`` requests run at once. Transient failures
    (timeouts, connection errors, 408/429/5xx) are retried with doubling
    backoff; other non-2xx responses fail immediately.
    """

    def __init__(self, config: EndpointConfig, http: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._http = http or httpx.Client(timeout=config.timeout_ms / 1000.0)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self.attempts = 0  # attempts used by the most recent call

    def _headers(self) -> dict[str, str]:
        token = os.environ.get(self.config.auth_token_env)
        if self.config.require_auth and not token:
            raise ConfigError(f"auth token env var {self.config.auth_token_env} is not set")
        return {"Authorization": f"Bearer {token}"} if token else {}

    def complete(self, request: ChatRequest) -> ChatResponse:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = self._headers()
        payload = request.to_payload()
        delays = self.config.backoff_schedule()
        last_exc: Exception | None = None
        with self._slots:
            for attempt in range(1 + self.config.max_retries):
                self.attempts = attempt + 1
                if attempt:
                    self._sleep(delays[attempt - 1])
                t0 = time.perf_counter()
                try:
                    resp = self._http.post(url, json=payload, headers=headers,
                                           timeout=self.config.timeout_ms / 1000.0)
                except (httpx.TimeoutException, httpx.TransportError) as exc:
                    log.warning("attempt %d: transport failure %s", attempt + 1, exc)
                    last_exc = TransportError(f"{type(exc).__name__}: {exc}")
                    continue
                latency = int((time.perf_counter() - t0) * 1000)
                if resp.status_code in _TRANSIENT_STATUS:
                    log.warning("attempt %d: HTTP %d", attempt + 1, resp.status_code)
                    last_exc = EndpointError(resp.status_code, resp.text)
                    continue
                if not resp.is_success:
                    raise EndpointError(resp.status_code, resp.text)
                return _parse_completion(resp, latency)
        assert last_exc is not None
        raise last_exc


def _parse_completion(resp: httpx.Response, latency_ms: int) -> ChatResponse:
    try:
        body = resp.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise EndpointError(resp.status_code, resp.text) from None
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not content or not content.strip():
        raise EmptyResponseError("endpoint returned an empty completion")
    usage = body.get("usage") or {}
    return ChatResponse(
        text=content,
        latency_ms=latency_ms,
        token_counts=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
    )


@dataclass
class ScriptedMock:
    """Deterministic stand-in keyed by :func:`fingerprint`.

    On disk a fixture directory holds one file per fingerprint whose name is
    the hex digest and whose content is the response text.
    """

    fixtures: dict[str, str] = field(default_factory=dict)
    calls: list[str] = field(default_factory=list, compare=False)

    @classmethod
    def from_dir(cls, path: str | os.PathLike) -> ScriptedMock:
        root = Path(path)
        if not root.is_dir():
            raise ConfigError(f"mock fixture directory not found: {root}")
        fixtures = {p.name: p.read_text(encoding="utf-8") for p in sorted(root.iterdir()) if p.is_file()}
        return cls(fixtures)

    def add(self, request: ChatRequest, text: str) -> str:
        digest = fingerprint(request)
        self.fixtures[digest] = text
        return digest

    def save(self, path: str | os.PathLike) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for digest, text in sorted(self.fixtures.items()):
            (root / digest).write_text(text, encoding="utf-8")

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = fingerprint(request)
        self.calls.append(digest)
        try:
            text = self.fixtures[digest]
        except KeyError:
            raise FixtureMissError(digest) from None
        if not text.strip():
            raise EmptyResponseError(f"fixture {digest} is empty")
        return ChatResponse(text=text)


def complete(client: ChatClient | EndpointConfig, request: ChatRequest) -> ChatResponse:
    """Convenience wrapper accepting either a client or an endpoint config."""
    if isinstance(client, EndpointConfig):
        client = HttpChatClient(client)
    return client.complete(request)
