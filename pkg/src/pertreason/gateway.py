"""Chat-completion gateway with live, scripted and oracle backends.

All backends share one ``complete(ChatRequest) -> ChatResponse`` surface and
cap the number of concurrent in-flight calls. The scripted backend replays
responses keyed by a canonical request hash, so a pipeline driven by it is a
pure function of its inputs and the script.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user")


class GatewayError(RuntimeError):
    pass


class UnscriptedRequest(GatewayError):
    def __init__(self, request_hash: str):
        super().__init__(f"unscripted request {request_hash}")
        self.request_hash = request_hash


class GatewayTimeout(GatewayError):
    pass


class GatewayHTTPError(GatewayError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class MalformedResponse(GatewayError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    model: str = "default"
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int = 1024

    def __post_init__(self):
        if not any(role == "user" for role, _ in self.messages):
            raise ValueError("a chat request needs at least one user message")
        bad = [role for role, _ in self.messages if role not in ROLES]
        if bad:
            raise ValueError(f"unsupported roles {bad}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def from_messages(cls, messages: list[dict[str, str]], **kw) -> "ChatRequest":
        return cls(tuple((m["role"], m["content"]) for m in messages), **kw)

    @property
    def system(self) -> str:
        return next((c for r, c in self.messages if r == "system"), "")

    @property
    def user(self) -> str:
        return "\n".join(c for r, c in self.messages if r == "user")

    def payload(self) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body


def request_hash(req: ChatRequest) -> str:
    """Canonical hash over messages, temperature and seed (not max_tokens)."""
    canon = json.dumps(
        {"messages": [[r, c] for r, c in req.messages], "temperature": float(req.temperature), "seed": req.seed},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    content: str
    backend: str
    latency_ms: int = 0
    request_hash: str = ""


class Backend:
    """Base class: concurrency cap around ``_complete``."""

    name = "base"

    def __init__(self, max_in_flight: int = 8):
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._slots:
            t0 = time.monotonic()
            content = self._complete(req)
            ms = int((time.monotonic() - t0) * 1000)
        if not content:
            raise MalformedResponse("empty completion")
        return ChatResponse(content, self.name, ms, request_hash(req))

    def _complete(self, req: ChatRequest) -> str:
        raise NotImplementedError


class ScriptedBackend(Backend):
    name = "scripted"

    def __init__(self, script: dict[str, str], max_in_flight: int = 8):
        super().__init__(max_in_flight)
        self.script = dict(script)

    @classmethod
    def from_file(cls, path: Path, **kw) -> "ScriptedBackend":
        return cls(read_script(path), **kw)

    def _complete(self, req: ChatRequest) -> str:
        h = request_hash(req)
        try:
            return self.script[h]
        except KeyError:
            raise UnscriptedRequest(h) from None


class LiveBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` client with bounded retries.

    Timeouts and 5xx responses are retried after 0.5 s, 1 s and 2 s; other
    failures surface immediately.
    """

    name = "live"
    backoff = (0.5, 1.0, 2.0)

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(max_in_flight)
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env, "")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _complete(self, req: ChatRequest) -> str:
        last: GatewayError | None = None
        for attempt in range(len(self.backoff) + 1):
            if attempt:
                self._sleep(self.backoff[attempt - 1])
            try:
                resp = self._client.post(self.url, json=req.payload(), headers=self._headers())
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(str(exc) or "timeout")
                continue
            except httpx.HTTPError as exc:
                raise GatewayError(f"transport error: {exc}") from exc
            if resp.status_code >= 500:
                last = GatewayHTTPError(resp.status_code, resp.text)
                continue
            if not 200 <= resp.status_code < 300:
                raise GatewayHTTPError(resp.status_code, resp.text)
            return _content_of(resp)
        assert last is not None
        raise last


def _content_of(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected completion body: {resp.text[:200]}") from exc
    if not isinstance(content, str) or not content:
        raise MalformedResponse("completion content missing or empty")
    return content


@dataclass
class Exchange:
    request: ChatRequest
    response: ChatResponse


@dataclass
class Recorder:
    """Wraps a backend and keeps every request/response pair."""

    inner: Backend
    exchanges: list[Exchange] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.inner.name

    def complete(self, req: ChatRequest) -> ChatResponse:
        resp = self.inner.complete(req)
        with self._lock:
            self.exchanges.append(Exchange(req, resp))
        return resp

    def script(self) -> dict[str, str]:
        with self._lock:
            return {request_hash(e.request): e.response.content for e in self.exchanges}


def write_script(script: dict[str, str], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in sorted(script):
            fh.write(json.dumps({"request_hash": h, "response_text": script[h]}, ensure_ascii=False) + "\n")


def read_script(path: Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[obj["request_hash"]] = obj["response_text"]
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad script line ({exc})") from exc
    return out


@dataclass(frozen=True)
class CallSettings:
    model: str = "default"
    temperature: float = 0.7
    max_tokens: int = 1024


def ask(backend, messages: list[dict[str, str]], seed: int, settings: CallSettings = CallSettings()) -> str:
    """One chat round-trip; returns the completion text."""
    req = ChatRequest.from_messages(
        messages, model=settings.model, temperature=settings.temperature, seed=seed, max_tokens=settings.max_tokens
    )
    return backend.complete(req).content
