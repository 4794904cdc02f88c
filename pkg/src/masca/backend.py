"""Chat-completion backends, response cache, and JSON extraction from model text.

Live requests use the OpenAI-compatible ``/chat/completions`` JSON shape::

    POST <endpoint>
    Authorization: Bearer <$MASCA_API_KEY>
    {"model": str, "messages": [{"role": str, "content": str}, ...],
     "temperature": float, "max_tokens": int}

    200 -> {"choices": [{"message": {"content": str}}],
            "usage": {"prompt_tokens": int, "completion_tokens": int}}
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
TRANSIENT_STATUSES = frozenset({408, 409, 425, 429, 500, 502, 503, 504})
WILDCARD = "*"


class BackendError(RuntimeError):
    """Terminal backend failure."""


class ScriptMissError(BackendError):
    pass


class AuthenticationError(BackendError):
    pass


class RateLimitError(BackendError):
    pass


class ExtractionError(ValueError):
    """No parseable JSON object in model text."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_json(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    tag: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user message")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"unknown message role {m.role!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def wire_messages(self) -> list[dict[str, str]]:
        return [m.to_json() for m in self.messages]

    def cache_key(self) -> str:
        blob = json.dumps(
            {
                "model": self.model_id,
                "messages": self.wire_messages(),
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def prompt_hash(self) -> str:
        return prompt_hash(self.messages)


def prompt_hash(messages: Iterable[Message]) -> str:
    """Hash of the message list alone; scripted backends key on this."""
    blob = json.dumps([m.to_json() for m in messages], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_json(self) -> dict[str, int]:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage = field(default_factory=Usage)
    cached: bool = False
    latency_ms: float = 0.0


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


class ScriptedBackend:
    """Deterministic replies keyed on (tag, prompt hash) with wildcard fallbacks.

    Lookup order: (tag, hash), (tag, "*"), ("*", hash), ("*", "*"), ``responder``,
    ``default``. A miss with none of those raises ScriptMissError.
    """

    def __init__(
        self,
        script: dict[tuple[str, str], str] | None = None,
        default: str | None = None,
        responder: Callable[[ChatRequest], str | None] | None = None,
    ):
        self.script = dict(script or {})
        self.default = default
        self.responder = responder

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        script = {(e["tag"], e.get("match", WILDCARD)): e["response"] for e in data.get("entries", [])}
        return cls(script, default=data.get("default"))

    def to_file(self, path: str | Path) -> None:
        entries = [
            {"tag": tag, "match": match, "response": text}
            for (tag, match), text in sorted(self.script.items())
        ]
        Path(path).write_text(
            json.dumps({"default": self.default, "entries": entries}, indent=1, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    def lookup(self, request: ChatRequest) -> str:
        h = request.prompt_hash()
        for key in ((request.tag, h), (request.tag, WILDCARD), (WILDCARD, h), (WILDCARD, WILDCARD)):
            if key in self.script:
                return self.script[key]
        if self.responder is not None:
            text = self.responder(request)
            if text is not None:
                return text
        if self.default is not None:
            return self.default
        raise ScriptMissError(f"no scripted response for tag {request.tag!r} (prompt {h[:12]})")

    def send(self, request: ChatRequest) -> ChatResponse:
        text = self.lookup(request)
        usage = Usage(
            prompt_tokens=sum(len(m.content.split()) for m in request.messages),
            completion_tokens=len(text.split()),
        )
        return ChatResponse(text=text, usage=usage)


class LiveBackend:
    """HTTP backend for any OpenAI-compatible chat-completions endpoint."""

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "MASCA_API_KEY",
        timeout: float = 120.0,
        max_in_flight: int = 4,
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        self._limiter = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    @staticmethod
    def payload(request: ChatRequest) -> dict[str, Any]:
        return {
            "model": request.model_id,
            "messages": request.wire_messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = self._headers()
        body = self.payload(request)
        last = ""
        for attempt in range(1, self.max_attempts + 1):
            start = time.perf_counter()
            try:
                with self._limiter:
                    resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"network error: {exc!r}"
                status = None
            else:
                status = resp.status_code
                if status == 200:
                    return self._parse(resp, (time.perf_counter() - start) * 1000.0)
                excerpt = resp.text[:300]
                if status in (401, 403):
                    raise AuthenticationError(f"HTTP {status} from {self.endpoint}: {excerpt}")
                last = f"HTTP {status}: {excerpt}"
                if status not in TRANSIENT_STATUSES:
                    raise BackendError(f"{last} (tag {request.tag!r})")
            if attempt < self.max_attempts:
                delay = self.backoff_s * 2 ** (attempt - 1)
                log.warning("%s, retry %d/%d in %.1fs", last, attempt, self.max_attempts - 1, delay)
                self._sleep(delay)
        if status == 429:
            raise RateLimitError(f"rate limited after {self.max_attempts} attempts: {last}")
        raise BackendError(f"failed after {self.max_attempts} attempts: {last}")

    @staticmethod
    def _parse(resp: httpx.Response, latency_ms: float) -> ChatResponse:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion body: {resp.text[:300]}") from exc
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text,
            usage=Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            latency_ms=latency_ms,
        )

    def close(self) -> None:
        self._client.close()


class ResponseCache:
    """Content-addressed cache: one ``<key>.json`` file per request."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, request: ChatRequest) -> ChatResponse | None:
        path = self._path(request.cache_key())
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            log.warning("ignoring unreadable cache entry %s", path)
            return None
        return ChatResponse(
            text=entry["response"]["text"],
            usage=Usage(**entry["response"]["usage"]),
            cached=True,
            latency_ms=0.0,
        )

    def put(self, request: ChatRequest, response: ChatResponse) -> None:
        key = request.cache_key()
        entry = {
            "key": key,
            "request": {**LiveBackend.payload(request), "tag": request.tag},
            "response": {"text": response.text, "usage": response.usage.to_json()},
        }
        with self._lock:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(entry, f, indent=1, ensure_ascii=False)
            os.replace(tmp, self._path(key))


def complete(request: ChatRequest, backend: Backend, cache: ResponseCache | None = None) -> ChatResponse:
    if cache is not None:
        hit = cache.get(request)
        if hit is not None:
            return hit
    response = backend.send(request)
    if cache is not None:
        cache.put(request, response)
    return replace(response, cached=False)


@dataclass(frozen=True)
class Extraction:
    value: Any
    notes: tuple[str, ...] = ()


def _strip_fences(text: str) -> str:
    return "\n".join(line for line in text.splitlines() if not line.strip().startswith("```"))


def _balanced_end(text: str, start: int) -> int | None:
    """Index one past the brace closing the object opened at ``start``."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    return None


def _objects(text: str, start: int = 0):
    """Yield (start, end, value-or-error) for successive balanced object candidates."""
    i = text.find("{", start)
    while i != -1:
        end = _balanced_end(text, i)
        if end is None:
            i = text.find("{", i + 1)
            continue
        try:
            value = json.loads(text[i:end])
        except json.JSONDecodeError as exc:
            yield i, end, exc
            i = text.find("{", i + 1)
            continue
        yield i, end, value
        i = text.find("{", end)


def extract_json_detailed(text: str) -> Extraction:
    body = _strip_fences(text)
    first_error = None
    for _, end, value in _objects(body):
        if isinstance(value, json.JSONDecodeError):
            first_error = first_error or value
            continue
        notes = ()
        if any(not isinstance(v, json.JSONDecodeError) for _, _, v in _objects(body, end)):
            notes = ("multiple top-level JSON objects; using the first",)
        return Extraction(value, notes)
    if first_error is not None:
        raise ExtractionError(f"JSON parse failure in candidate object: {first_error.msg}")
    raise ExtractionError("no balanced JSON object found")


def extract_json(text: str) -> Any:
    """First balanced top-level JSON object in ``text`` (code fences ignored)."""
    return extract_json_detailed(text).value
