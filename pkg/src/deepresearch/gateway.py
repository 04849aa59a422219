"""Uniform chat-completion interface over pluggable model backends.

Every other module talks to models through this layer, so the rest of the
system is agnostic to whether completions come from a live HTTP endpoint or
a deterministic scripted backend. Scripted backends make whole-pipeline runs
reproducible at desk scale.
"""

from __future__ import annotations

import base64
import hashlib
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

from .errors import (
    InvalidRequestError,
    MalformedResponseError,
    ScriptMissError,
    TransientTransportError,
    TransportExhaustedError,
    UnresolvableImageError,
)
from .records import canonical_dumps, read_jsonl, write_jsonl

VALID_ROLES = ("system", "user", "assistant", "tool")
FINISH_REASONS = ("stop", "length", "error")

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.5


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image, either a local path or inline bytes."""

    path: Optional[str] = None
    data: Optional[bytes] = None

    def resolve(self) -> bytes:
        if self.data is not None:
            return self.data
        if self.path is not None:
            p = Path(self.path)
            if not p.is_file():
                raise UnresolvableImageError(f"image file not found: {self.path}")
            return p.read_bytes()
        raise UnresolvableImageError("image reference carries neither path nor data")

    def content_hash(self) -> str:
        return hashlib.sha256(self.resolve()).hexdigest()


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    image: Optional[ImageRef] = None

    def __post_init__(self):
        if self.role not in VALID_ROLES:
            raise InvalidRequestError(f"invalid message role: {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    model: str = "default"

    def __post_init__(self):
        if not self.messages:
            raise InvalidRequestError("message list must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise InvalidRequestError("first message must be system or user")
        if self.temperature < 0:
            raise InvalidRequestError("temperature must be >= 0")

    @staticmethod
    def make(messages: list[ChatMessage], **kwargs) -> "ChatRequest":
        return ChatRequest(messages=tuple(messages), **kwargs)


@dataclass(frozen=True)
class TokenInfo:
    """One completion token with its log-probability under the serving policy."""

    text: str
    logprob: float


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    tokens: Optional[tuple[TokenInfo, ...]] = None

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise MalformedResponseError(f"invalid finish reason: {self.finish_reason!r}")
        if self.tokens is not None:
            joined = "".join(t.text for t in self.tokens)
            if joined != self.text:
                raise MalformedResponseError(
                    "token records do not concatenate to the completion text"
                )

    def to_json(self) -> dict:
        rec: dict = {"text": self.text, "finish_reason": self.finish_reason}
        if self.tokens is not None:
            rec["tokens"] = [{"t": t.text, "logprob": t.logprob} for t in self.tokens]
        return rec

    @staticmethod
    def from_json(rec: dict) -> "ChatResponse":
        tokens = None
        if rec.get("tokens") is not None:
            tokens = tuple(TokenInfo(t["t"], float(t["logprob"])) for t in rec["tokens"])
        return ChatResponse(
            text=rec["text"],
            finish_reason=rec.get("finish_reason", "stop"),
            tokens=tokens,
        )


def fingerprint(request: ChatRequest) -> str:
    """Stable hash over role+content of all messages.

    Whitespace-only differences are ignored so template tweaks that only move
    spacing around do not invalidate recorded scripts. Image content enters
    through its content hash.
    """
    parts = []
    for msg in request.messages:
        entry = {"role": msg.role, "content": " ".join(msg.content.split())}
        if msg.image is not None:
            entry["image"] = msg.image.content_hash()
        parts.append(entry)
    return hashlib.sha256(canonical_dumps(parts).encode("utf-8")).hexdigest()


class BackendHandle(Protocol):
    """Anything that can turn a ChatRequest into a ChatResponse."""

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class ScriptedBackend:
    """Deterministic backend driven by fingerprint-keyed canned responses.

    Each fingerprint maps to an ordered sequence of responses: repeated
    identical requests consume the sequence in order and stick on the last
    entry, so a single-entry script always replays the same response while a
    multi-entry script can model sampling diversity. Replaying an identical
    request sequence therefore yields an identical response sequence.
    """

    def __init__(self, strict: bool = True):
        self.strict = strict
        self._entries: dict[str, list[ChatResponse]] = {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        self.match_log: list[str] = []

    def add(self, messages: list[ChatMessage] | ChatRequest, response: ChatResponse | str) -> str:
        """Register a canned response; returns the fingerprint it is keyed on."""
        request = messages if isinstance(messages, ChatRequest) else ChatRequest.make(messages)
        if isinstance(response, str):
            response = ChatResponse(text=response)
        fp = fingerprint(request)
        self._entries.setdefault(fp, []).append(response)
        return fp

    def add_fingerprint(self, fp: str, response: ChatResponse) -> None:
        self._entries.setdefault(fp, []).append(response)

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = fingerprint(request)
        with self._lock:
            self.match_log.append(fp)
            seq = self._entries.get(fp)
            if seq is None:
                if self.strict:
                    raise ScriptMissError(f"no scripted entry for fingerprint {fp}")
                last = request.messages[-1].content
                return ChatResponse(text=last, finish_reason="stop")
            idx = self._cursor.get(fp, 0)
            response = seq[min(idx, len(seq) - 1)]
            self._cursor[fp] = idx + 1
            return response

    def reset(self) -> None:
        """Rewind all sequence cursors and clear the match log."""
        with self._lock:
            self._cursor.clear()
            self.match_log.clear()

    def save(self, path: str | Path) -> None:
        rows = []
        for fp, seq in self._entries.items():
            for resp in seq:
                rows.append({"fingerprint": fp, "response": resp.to_json()})
        write_jsonl(path, rows)

    @classmethod
    def load(cls, path: str | Path, strict: bool = True) -> "ScriptedBackend":
        backend = cls(strict=strict)
        for rec in read_jsonl(path):
            backend.add_fingerprint(rec["fingerprint"], ChatResponse.from_json(rec["response"]))
        return backend


@dataclass
class Rule:
    """One substring-triggered rule of a RuleBackend."""

    contains: list[str]
    responses: list[ChatResponse]


class RuleBackend:
    """Deterministic backend driven by ordered substring rules.

    Rules are evaluated in registration order against the concatenation of
    all message contents; the first rule whose substrings all occur serves
    its next response (sticking on the last one). This keeps desk-scale
    end-to-end scripts writable by hand, where exact-fingerprint scripts
    would be hostile to edit. Matching state advances per rule, so an
    identical request sequence yields an identical response sequence.
    """

    def __init__(self):
        self._rules: list[Rule] = []
        self._cursor: dict[int, int] = {}
        self._lock = threading.Lock()
        self.match_log: list[int] = []

    def add_rule(
        self,
        contains: str | list[str],
        responses: list[ChatResponse | str] | ChatResponse | str,
    ) -> None:
        if isinstance(contains, str):
            contains = [contains]
        if not isinstance(responses, list):
            responses = [responses]
        normalized = [ChatResponse(text=r) if isinstance(r, str) else r for r in responses]
        self._rules.append(Rule(contains=list(contains), responses=normalized))

    def complete(self, request: ChatRequest) -> ChatResponse:
        blob = "\n".join(m.content for m in request.messages)
        with self._lock:
            for i, rule in enumerate(self._rules):
                if all(needle in blob for needle in rule.contains):
                    self.match_log.append(i)
                    idx = self._cursor.get(i, 0)
                    self._cursor[i] = idx + 1
                    return rule.responses[min(idx, len(rule.responses) - 1)]
        raise ScriptMissError("no rule matched the request")

    def reset(self) -> None:
        with self._lock:
            self._cursor.clear()
            self.match_log.clear()

    def save(self, path: str | Path) -> None:
        rows = [
            {"contains": r.contains, "responses": [resp.to_json() for resp in r.responses]}
            for r in self._rules
        ]
        write_jsonl(path, rows)

    @classmethod
    def load(cls, path: str | Path) -> "RuleBackend":
        backend = cls()
        for rec in read_jsonl(path):
            backend.add_rule(
                rec["contains"], [ChatResponse.from_json(r) for r in rec["responses"]]
            )
        return backend


def build_chat_payload(request: ChatRequest, want_logprobs: bool = False) -> dict:
    """Encode a request in the de-facto chat-completion HTTP body."""
    messages = []
    for msg in request.messages:
        if msg.image is not None:
            data = msg.image.resolve()
            url = "data:image/octet-stream;base64," + base64.b64encode(data).decode("ascii")
            content: object = [
                {"type": "text", "text": msg.content},
                {"type": "image_url", "image_url": {"url": url}},
            ]
        else:
            content = msg.content
        messages.append({"role": msg.role, "content": content})
    payload = {
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if want_logprobs:
        payload["logprobs"] = True
    return payload


def parse_chat_payload(data: dict) -> ChatResponse:
    """Decode the de-facto chat-completion HTTP response body."""
    try:
        choice = data["choices"][0]
        text = choice["message"]["content"]
        if not isinstance(text, str):
            raise KeyError("content")
        finish = choice.get("finish_reason") or "stop"
        if finish not in FINISH_REASONS:
            finish = "stop"
        tokens = None
        logprobs = choice.get("logprobs")
        if logprobs and logprobs.get("content"):
            tokens = tuple(
                TokenInfo(t["token"], float(t["logprob"])) for t in logprobs["content"]
            )
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"unparsable chat payload: {exc}") from exc
    return ChatResponse(text=text, finish_reason=finish, tokens=tokens)


class HttpBackend:
    """Live chat-completion endpoint client."""

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        model: Optional[str] = None,
        timeout: float = 60.0,
        want_logprobs: bool = False,
        session=None,
    ):
        import requests

        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.want_logprobs = want_logprobs
        self._session = session or requests.Session()

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        if self.model is not None:
            request = ChatRequest(
                messages=request.messages,
                temperature=request.temperature,
                max_tokens=request.max_tokens,
                model=self.model,
            )
        payload = build_chat_payload(request, want_logprobs=self.want_logprobs)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = self.base_url + "/chat/completions"
        try:
            resp = self._session.post(url, json=payload, headers=headers, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientTransportError(str(exc)) from exc
        if resp.status_code in (408, 429) or resp.status_code >= 500:
            raise TransientTransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise MalformedResponseError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise MalformedResponseError("response body is not JSON") from exc
        return parse_chat_payload(data)


def complete(
    request: ChatRequest,
    backend: BackendHandle,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
    attempt_log: Optional[list[int]] = None,
) -> ChatResponse:
    """Issue one completion, retrying transient transport failures.

    At most (1 + retries) transport attempts are made, with exponential
    backoff between them. Script misses and malformed payloads are
    definitive failures and never retried.
    """
    attempts = 0
    last_error: Optional[Exception] = None
    while attempts < 1 + retries:
        attempts += 1
        if attempt_log is not None:
            attempt_log.append(attempts)
        try:
            return backend.complete(request)
        except TransientTransportError as exc:
            last_error = exc
            if attempts < 1 + retries:
                sleep(backoff * (2 ** (attempts - 1)))
    raise TransportExhaustedError(
        f"transport failed after {attempts} attempts: {last_error}", attempts=attempts
    )


class Gateway:
    """Stateful wrapper around a backend: retries, counters, caption cache.

    Safe for concurrent use; the caption cache admits one writer at a time.
    """

    def __init__(
        self,
        backend: BackendHandle,
        retries: int = DEFAULT_RETRIES,
        backoff: float = DEFAULT_BACKOFF,
        sleep: Callable[[float], None] = time.sleep,
        model: str = "default",
        temperature: float = 0.0,
        max_tokens: int = 1024,
    ):
        self.backend = backend
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.calls_by_purpose: dict[str, int] = {}
        self.attempt_count = 0
        self.transcript: list[tuple[str, ChatRequest, ChatResponse]] = []
        self._caption_cache: dict[str, str] = {}
        self._lock = threading.Lock()
        self._caption_lock = threading.Lock()

    def calls(self, purpose: Optional[str] = None) -> int:
        with self._lock:
            if purpose is None:
                return sum(self.calls_by_purpose.values())
            return self.calls_by_purpose.get(purpose, 0)

    def complete(self, request: ChatRequest, purpose: str = "generic") -> ChatResponse:
        attempt_log: list[int] = []
        try:
            response = complete(
                request,
                self.backend,
                retries=self.retries,
                backoff=self.backoff,
                sleep=self.sleep,
                attempt_log=attempt_log,
            )
        finally:
            with self._lock:
                self.attempt_count += len(attempt_log)
                self.calls_by_purpose[purpose] = self.calls_by_purpose.get(purpose, 0) + 1
        with self._lock:
            self.transcript.append((purpose, request, response))
        return response

    def chat(
        self,
        messages: list[ChatMessage],
        purpose: str = "generic",
        temperature: Optional[float] = None,
    ) -> ChatResponse:
        request = ChatRequest.make(
            messages,
            temperature=self.temperature if temperature is None else temperature,
            max_tokens=self.max_tokens,
            model=self.model,
        )
        return self.complete(request, purpose=purpose)

    def caption_image(self, image: ImageRef, prompt: str) -> str:
        """Caption an image, caching by content hash.

        N calls with the same image bytes produce exactly one backend call.
        """
        key = image.content_hash()
        cached = self._caption_cache.get(key)
        if cached is not None:
            return cached
        with self._caption_lock:
            cached = self._caption_cache.get(key)
            if cached is not None:
                return cached
            response = self.chat(
                [ChatMessage(role="user", content=prompt, image=image)], purpose="caption"
            )
            caption = response.text.strip() or "(no caption)"
            self._caption_cache[key] = caption
            return caption


def caption_image(image: ImageRef, gateway: Gateway, prompt: str) -> str:
    """Module-level convenience mirroring Gateway.caption_image."""
    return gateway.caption_image(image, prompt)


@dataclass
class Backends:
    """Per-role gateways: planning model, executing model, manager model.

    The manager gateway serves captioning, judging, compression, routing,
    category classification, and peer review. A single gateway may be shared
    across all three roles.
    """

    planner: Gateway
    executor: Gateway
    manager: Gateway

    @classmethod
    def single(cls, gateway: Gateway) -> "Backends":
        return cls(planner=gateway, executor=gateway, manager=gateway)
