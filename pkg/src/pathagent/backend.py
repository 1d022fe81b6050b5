"""Multimodal chat-completion backends.

Two implementations share one call signature, ``complete(request,
conversation_id=..., stage=...) -> str``:

* :class:`HttpBackend` speaks the OpenAI-compatible chat-completions wire
  format, with images sent as base64 PNG data URLs.
* :class:`ScriptedBackend` replays canned responses for tests and demos.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import random
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence, Union

import httpx
import numpy as np
from PIL import Image

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml

from .errors import (
    ApiError,
    BackendError,
    BackendTimeout,
    RateLimited,
    ScriptExhausted,
    TooManyImages,
)

log = logging.getLogger(__name__)

API_KEY_ENV = "PATHAGENT_API_KEY"
EVAL_TEMPERATURE = 0.0
GENERATION_TEMPERATURE = 0.8


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    pixels: np.ndarray = field(repr=False, compare=False)
    encoding: str = "png"

    def png_bytes(self) -> bytes:
        return encode_png(self.pixels)

    def digest(self) -> str:
        return "sha256:" + hashlib.sha256(self.png_bytes()).hexdigest()


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad role {self.role!r}")
        if not self.parts:
            raise ValueError("a message needs at least one part")
        if self.role != "user" and any(isinstance(p, ImagePart) for p in self.parts):
            raise ValueError("images are only allowed in user messages")

    @classmethod
    def system(cls, text: str) -> "ChatMessage":
        return cls("system", (TextPart(text),))

    @classmethod
    def user(cls, *parts: str | np.ndarray | Part) -> "ChatMessage":
        return cls("user", tuple(_coerce_part(p) for p in parts))

    @classmethod
    def assistant(cls, text: str) -> "ChatMessage":
        return cls("assistant", (TextPart(text),))

    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    @property
    def n_images(self) -> int:
        return sum(isinstance(p, ImagePart) for p in self.parts)


def _coerce_part(p: str | np.ndarray | Part) -> Part:
    if isinstance(p, (TextPart, ImagePart)):
        return p
    if isinstance(p, str):
        return TextPart(p)
    return ImagePart(np.asarray(p, dtype=np.uint8))


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = EVAL_TEMPERATURE
    max_tokens: int = 4096
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must lie in [0, 2]")

    @property
    def n_images(self) -> int:
        return sum(m.n_images for m in self.messages)

    def text(self) -> str:
        return "\n".join(m.text() for m in self.messages)


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def to_wire(req: CompletionRequest, model: str) -> dict:
    """OpenAI-compatible chat-completions body."""
    messages = []
    for m in req.messages:
        if all(isinstance(p, TextPart) for p in m.parts):
            messages.append({"role": m.role, "content": m.text()})
            continue
        content = []
        for p in m.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                b64 = base64.b64encode(p.png_bytes()).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        messages.append({"role": m.role, "content": content})
    body: dict[str, Any] = {
        "model": model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    if req.seed is not None:
        body["seed"] = req.seed
    return body


def transcript_messages(req: CompletionRequest) -> list[dict]:
    """Messages with images replaced by PNG content hashes."""
    out = []
    for m in req.messages:
        parts = []
        for p in m.parts:
            if isinstance(p, TextPart):
                parts.append({"text": p.text})
            else:
                parts.append({"image": p.digest()})
        out.append({"role": m.role, "parts": parts})
    return out


# --------------------------------------------------------------------------
# profiles and the HTTP client


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    base_backoff_s: float = 1.0
    max_backoff_s: float = 30.0

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Exponential backoff with up to one base interval of jitter."""
        d = self.base_backoff_s * (2 ** attempt) + rng.uniform(0, self.base_backoff_s)
        return min(d, self.max_backoff_s)

    def max_total_backoff(self, retries: int) -> float:
        return sum(min(self.base_backoff_s * (2 ** a + 1), self.max_backoff_s) for a in range(retries))


@dataclass(frozen=True)
class BackendProfile:
    name: str
    base_url: str = ""
    model: str = ""
    max_images_per_request: int = 16
    timeout_s: float = 120.0
    retry: RetryPolicy = RetryPolicy()
    max_in_flight: int = 4
    requests_per_minute: int | None = None

    def __post_init__(self):
        if self.max_images_per_request < 1:
            raise ValueError("max_images_per_request must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BackendProfile":
        retry = d.get("retries", 3)
        return cls(
            name=str(d["name"]),
            base_url=str(d.get("base_url", "")),
            model=str(d.get("model", "")),
            max_images_per_request=int(d.get("max_images", 16)),
            timeout_s=float(d.get("timeout_s", 120.0)),
            retry=RetryPolicy(
                max_retries=int(retry),
                base_backoff_s=float(d.get("backoff_s", 1.0)),
                max_backoff_s=float(d.get("max_backoff_s", 30.0)),
            ),
            max_in_flight=int(d.get("max_in_flight", 4)),
            requests_per_minute=d.get("requests_per_minute"),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_url": self.base_url,
            "model": self.model,
            "max_images": self.max_images_per_request,
            "timeout_s": self.timeout_s,
            "retries": self.retry.max_retries,
            "backoff_s": self.retry.base_backoff_s,
            "max_backoff_s": self.retry.max_backoff_s,
            "max_in_flight": self.max_in_flight,
            "requests_per_minute": self.requests_per_minute,
        }


def load_profile(path: str | Path) -> BackendProfile:
    """Read a profile from JSON or TOML."""
    path = Path(path)
    if path.suffix == ".toml":
        data = _toml.loads(path.read_text())
    else:
        data = json.loads(path.read_text())
    return BackendProfile.from_dict(data)


class Backend(Protocol):
    profile: BackendProfile

    def complete(self, request: CompletionRequest, *, conversation_id: str = "default",
                 stage: str | None = None) -> str: ...


@dataclass
class CallRecord:
    call_id: str
    conversation_id: str
    stage: str | None
    status: int | None
    retries: int
    backoff_s: float
    response_id: str | None = None


class _MinuteBudget:
    def __init__(self, per_minute: int | None, clock=time.monotonic, sleep=time.sleep):
        self.per_minute = per_minute
        self.clock = clock
        self.sleep = sleep
        self.stamps: deque[float] = deque()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        if not self.per_minute:
            return
        while True:
            with self.lock:
                now = self.clock()
                while self.stamps and now - self.stamps[0] >= 60.0:
                    self.stamps.popleft()
                if len(self.stamps) < self.per_minute:
                    self.stamps.append(now)
                    return
                wait = 60.0 - (now - self.stamps[0])
            self.sleep(wait)


class HttpBackend:
    """OpenAI-compatible client with retries, an in-flight cap and a per-minute budget.

    429, 5xx and transport errors are retried per the profile's policy. Every
    logical call appends one :class:`CallRecord` to :attr:`calls`.
    """

    def __init__(self, profile: BackendProfile, api_key: str | None = None,
                 client: httpx.Client | None = None, sleep=time.sleep, seed: int | None = None):
        self.profile = profile
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self._client = client or httpx.Client(timeout=profile.timeout_s)
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._gate = threading.BoundedSemaphore(max(1, profile.max_in_flight))
        self._budget = _MinuteBudget(profile.requests_per_minute, sleep=sleep)
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    @property
    def url(self) -> str:
        return self.profile.base_url.rstrip("/") + "/chat/completions"

    def close(self) -> None:
        self._client.close()

    def complete(self, request: CompletionRequest, *, conversation_id: str = "default",
                 stage: str | None = None) -> str:
        if request.n_images > self.profile.max_images_per_request:
            raise TooManyImages(
                f"{request.n_images} images > limit {self.profile.max_images_per_request}"
            )
        body = to_wire(request, self.profile.model)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        call_id = uuid.uuid4().hex[:12]
        policy = self.profile.retry
        retries, waited = 0, 0.0
        last_error: BackendError | None = None
        with self._gate:
            while True:
                self._budget.acquire()
                status = None
                try:
                    resp = self._client.post(self.url, json=body, headers=headers,
                                             timeout=self.profile.timeout_s)
                    status = resp.status_code
                except httpx.TimeoutException as exc:
                    last_error = BackendTimeout(f"{self.url}: {exc}")
                except httpx.TransportError as exc:
                    last_error = BackendError(f"{self.url}: {exc}")
                else:
                    if status == 200:
                        text, response_id = _parse_completion(resp)
                        self._record(CallRecord(call_id, conversation_id, stage, status, retries, waited, response_id))
                        log.info("call %s conv=%s stage=%s response=%s retries=%d",
                                 call_id, conversation_id, stage, response_id, retries)
                        return text
                    if status == 429:
                        last_error = RateLimited(f"HTTP 429 after {retries} retries")
                    elif status >= 500:
                        last_error = ApiError(status, resp.text)
                    else:
                        self._record(CallRecord(call_id, conversation_id, stage, status, retries, waited))
                        raise ApiError(status, resp.text)
                if retries >= policy.max_retries:
                    self._record(CallRecord(call_id, conversation_id, stage, status, retries, waited))
                    raise last_error
                delay = policy.delay(retries, self._rng)
                log.warning("call %s: %s; retry %d in %.2fs", call_id, last_error, retries + 1, delay)
                self._sleep(delay)
                waited += delay
                retries += 1

    def _record(self, rec: CallRecord) -> None:
        with self._lock:
            self.calls.append(rec)


def _parse_completion(resp: httpx.Response) -> tuple[str, str | None]:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ApiError(resp.status_code, f"malformed completion: {resp.text}") from exc
    if isinstance(content, list):
        content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
    return str(content), data.get("id")


def complete(profile: BackendProfile, request: CompletionRequest, **kwargs) -> str:
    """One-shot call through a fresh :class:`HttpBackend`."""
    backend = HttpBackend(profile)
    try:
        return backend.complete(request, **kwargs)
    finally:
        backend.close()


# --------------------------------------------------------------------------
# scripted test double


@dataclass(frozen=True)
class Matcher:
    kind: str  # "always" | "stage" | "contains"
    value: str = ""

    def matches(self, request: CompletionRequest, stage: str | None) -> bool:
        if self.kind == "always":
            return True
        if self.kind == "stage":
            return stage == self.value
        if self.kind == "contains":
            return self.value in request.text()
        raise ValueError(f"unknown matcher kind {self.kind!r}")


def always() -> Matcher:
    return Matcher("always")


def on_stage(tag: str) -> Matcher:
    return Matcher("stage", tag)


def contains(text: str) -> Matcher:
    return Matcher("contains", text)


Response = Union[str, BaseException]
ScriptEntry = tuple[Matcher, Response]


def _matcher_from_json(d: Any) -> Matcher:
    if d in (None, "always"):
        return always()
    if isinstance(d, dict):
        if "stage" in d:
            return on_stage(d["stage"])
        if "contains" in d:
            return contains(d["contains"])
    raise ValueError(f"bad matcher {d!r}")


_ERRORS = {"timeout": BackendTimeout, "rate_limited": RateLimited, "error": BackendError}


def script_from_json(data: Any) -> list[ScriptEntry] | dict[str, list[ScriptEntry]]:
    """Script file: a list of ``{"match": ..., "response": str}`` or ``{"raise": kind}``
    entries, or an object mapping conversation ids to such lists."""

    def entries(items: Iterable[dict]) -> list[ScriptEntry]:
        out = []
        for it in items:
            m = _matcher_from_json(it.get("match"))
            if "raise" in it:
                out.append((m, _ERRORS[it["raise"]](it.get("message", "scripted failure"))))
            else:
                out.append((m, str(it["response"])))
        return out

    if isinstance(data, dict):
        return {conv: entries(items) for conv, items in data.items()}
    return entries(data)


class ScriptedBackend:
    """Deterministic backend replaying ``(matcher, response)`` entries.

    ``script`` is either one list, which every conversation consumes
    independently, or a mapping from conversation id to its own list. A call
    takes the first unconsumed entry of its conversation whose matcher fires;
    a response that is an exception instance is raised instead of returned.
    """

    def __init__(self, script: Sequence[ScriptEntry] | Mapping[str, Sequence[ScriptEntry]],
                 profile: BackendProfile | None = None):
        if not script:
            raise ValueError("script must be nonempty")
        self.profile = profile or BackendProfile(name="scripted", max_images_per_request=64)
        self._shared = None if isinstance(script, Mapping) else list(script)
        self._per_conv = dict(script) if isinstance(script, Mapping) else {}
        self._used: dict[str, set[int]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        self.calls: list[dict] = []

    @classmethod
    def from_file(cls, path: str | Path, profile: BackendProfile | None = None) -> "ScriptedBackend":
        return cls(script_from_json(json.loads(Path(path).read_text())), profile)

    def _entries(self, conversation_id: str) -> Sequence[ScriptEntry]:
        if self._shared is not None:
            return self._shared
        return self._per_conv.get(conversation_id, ())

    def complete(self, request: CompletionRequest, *, conversation_id: str = "default",
                 stage: str | None = None) -> str:
        if request.n_images > self.profile.max_images_per_request:
            raise TooManyImages(
                f"{request.n_images} images > limit {self.profile.max_images_per_request}"
            )
        with self._lock:
            conv_lock = self._locks.setdefault(conversation_id, threading.Lock())
            used = self._used.setdefault(conversation_id, set())
        with conv_lock:
            for i, (matcher, response) in enumerate(self._entries(conversation_id)):
                if i in used or not matcher.matches(request, stage):
                    continue
                used.add(i)
                with self._lock:
                    self.calls.append({"conversation_id": conversation_id, "stage": stage, "entry": i})
                if isinstance(response, BaseException):
                    raise response
                return response
        raise ScriptExhausted(f"no unconsumed script entry for conversation {conversation_id!r} "
                              f"stage {stage!r}")


def scripted_backend(script, profile: BackendProfile | None = None) -> ScriptedBackend:
    return ScriptedBackend(script, profile)


# --------------------------------------------------------------------------
# transcripts


def transcript_entry(conversation_id: str, stage: str | None, seq: int,
                     request: CompletionRequest, response: str | None,
                     error: str | None = None) -> dict:
    return {
        "conversation_id": conversation_id,
        "stage": stage,
        "seq": seq,
        "temperature": request.temperature,
        "messages": transcript_messages(request),
        "response": response,
        "error": error,
    }


def write_transcript(path: str | Path, entries: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n")
