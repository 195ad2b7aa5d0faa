"""Text-generation backends, transcript recording and response-format parsing.

Three backends share one interface:

- LiveBackend speaks the OpenAI-compatible chat-completions HTTP API.
- ScriptedBackend serves fixture responses in call order (deterministic runs, tests).
- ReplayBackend re-serves a recorded transcript by request sequence number.

LLMGateway wraps a backend, assigns sequence numbers, rejects empty or oversized
responses and records every completed call in the Transcript.
"""

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Protocol, Union

import requests
from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

from .db import TranscriptEntry, TranscriptStore
from .errors import (
    BackendUnavailable,
    MissingMathBlock,
    ResponseRejected,
    TranscriptDivergence,
    TranscriptExhausted,
)
from .solution import RawGeneration
from .usage_logger import usage_logger

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

Role = Literal["system", "user", "assistant"]
Tag = Literal["init", "inspire", "think", "solve", "crossover", "mutation", "summarize"]

DEFAULT_API_KEY_ENV = "COEVO_API_KEY"
GENERATION_TEMPERATURE = 0.9
SUMMARY_TEMPERATURE = 0.2
TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatMessage(BaseModel):
    role: Role
    content: str


class ChatRequest(BaseModel):
    messages: List[ChatMessage]
    temperature: float = Field(default=GENERATION_TEMPERATURE, ge=0.0, le=2.0)
    max_tokens: int = Field(default=2048, ge=1)
    tag: Tag

    @model_validator(mode="after")
    def _needs_user_message(self) -> "ChatRequest":
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a chat request needs at least one user message")
        return self

    @property
    def prompt_text(self) -> str:
        return "\n\n".join(f"[{m.role}]\n{m.content}" for m in self.messages)

    @property
    def prompt_sha256(self) -> str:
        payload = json.dumps([m.model_dump() for m in self.messages], sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def contains(self, text: str) -> bool:
        return any(text in m.content for m in self.messages)


class TranscriptRecord(BaseModel):
    sequence: int
    request: ChatRequest
    response: str
    latency_ms: float = 0.0
    backend_id: str = ""

    def to_entry(self) -> TranscriptEntry:
        return TranscriptEntry(
            sequence=self.sequence,
            tag=self.request.tag,
            messages=json.dumps([m.model_dump() for m in self.request.messages]),
            temperature=self.request.temperature,
            max_tokens=self.request.max_tokens,
            prompt_sha256=self.request.prompt_sha256,
            response=self.response,
            latency_ms=self.latency_ms,
            backend_id=self.backend_id,
        )

    @classmethod
    def from_entry(cls, entry: TranscriptEntry) -> "TranscriptRecord":
        request = ChatRequest(
            messages=[ChatMessage(**m) for m in json.loads(entry.messages)],
            temperature=entry.temperature,
            max_tokens=entry.max_tokens,
            tag=entry.tag,
        )
        return cls(
            sequence=entry.sequence,
            request=request,
            response=entry.response,
            latency_ms=entry.latency_ms,
            backend_id=entry.backend_id,
        )


class Transcript:
    """Append-only record of completed calls, buffered and flushed to a store."""

    def __init__(self, store: Optional[TranscriptStore] = None):
        self.store = store
        self.entries: List[TranscriptRecord] = []
        self._flushed = 0
        self._lock = threading.Lock()
        if store is not None:
            self.entries = [TranscriptRecord.from_entry(e) for e in store.get_entries()]
            self._flushed = len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, record: TranscriptRecord):
        with self._lock:
            self.entries.append(record)

    def flush(self):
        if self.store is None:
            return
        with self._lock:
            pending = self.entries[self._flushed:]
            self._flushed = len(self.entries)
        self.store.add_entries([r.to_entry() for r in pending])

    def truncate(self, length: int):
        """Forget entries from `length` on, in memory and in the store."""
        with self._lock:
            self.entries = self.entries[:length]
            self._flushed = min(self._flushed, length)
        if self.store is not None:
            self.store.truncate(length)


# Backends

class Backend(Protocol):
    backend_id: str

    def complete(self, request: ChatRequest, sequence: int) -> str: ...

    def state(self) -> Dict[str, Any]: ...

    def restore(self, state: Dict[str, Any]) -> None: ...


class HttpClient:
    """JSON POST client with bounded concurrency and retry on transient failures."""

    def __init__(
        self,
        base_url: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 60.0,
        retries: int = 3,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        max_inflight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.sleep = sleep
        self._inflight = threading.BoundedSemaphore(max_inflight)
        self._jitter = random.Random()
        self.last_attempts = 0

        self.session = requests.Session()
        adapter = requests.adapters.HTTPAdapter(
            pool_connections=max_inflight,
            pool_maxsize=max_inflight * 2,
        )
        self.session.mount('http://', adapter)
        self.session.mount('https://', adapter)
        self.session.headers.update({"Content-Type": "application/json"})
        api_key = os.getenv(api_key_env)
        if api_key:
            self.session.headers["Authorization"] = f"Bearer {api_key}"
        else:
            logger.warning(f"No API key in {api_key_env}; sending unauthenticated requests")

    def _backoff(self, attempt: int) -> float:
        delay = self.backoff_base * self.backoff_factor ** attempt
        return delay + self._jitter.uniform(0, self.backoff_base)

    def post_json(self, path: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        """POST and decode the JSON body; BackendUnavailable once retries run out."""
        url = f"{self.base_url}/{path.lstrip('/')}"
        last_error = None
        with self._inflight:
            for attempt in range(self.retries + 1):
                self.last_attempts = attempt + 1
                try:
                    response = self.session.post(url, json=payload, timeout=self.timeout)
                    if response.status_code in TRANSIENT_STATUS:
                        last_error = f"HTTP {response.status_code}"
                    elif response.status_code >= 400:
                        raise BackendUnavailable(
                            f"HTTP {response.status_code} from {url}: {response.text[:500]}"
                        )
                    else:
                        return response.json()
                except (requests.ConnectionError, requests.Timeout) as error:
                    last_error = f"{type(error).__name__}: {error}"
                except ValueError as error:
                    raise BackendUnavailable(f"invalid JSON from {url}: {error}") from error

                if attempt < self.retries:
                    delay = self._backoff(attempt)
                    logger.warning(f"Transient failure on {url} ({last_error}); retrying in {delay:.2f}s")
                    self.sleep(delay)
        raise BackendUnavailable(f"{url} failed after {self.retries + 1} attempts: {last_error}")


class LiveBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(self, client: HttpClient, model: str):
        self.client = client
        self.model = model
        self.backend_id = f"live:{model}"

    def complete(self, request: ChatRequest, sequence: int) -> str:
        payload = {
            "model": self.model,
            "messages": [m.model_dump() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        body = self.client.post_json("chat/completions", payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as error:
            raise BackendUnavailable(f"unexpected chat-completions body: {str(body)[:300]}") from error
        return content or ""

    def state(self) -> Dict[str, Any]:
        return {}

    def restore(self, state: Dict[str, Any]) -> None:
        pass


ScriptEntry = Union[str, Dict[str, Any]]
Responder = Callable[[ChatRequest], str]


class ScriptedBackend:
    """Serves fixture responses in call order.

    A fixture is a list of entries, or a mapping with `responses` (one shared queue)
    and/or `by_tag` (one queue per request tag, `*` as fallback) and an optional
    `cycle` flag. An entry is a string or a mapping with `response`, optional
    `prompt_sha256` (checked in strict mode), and optional `when_prompt_contains` /
    `otherwise` for prompt-conditional answers.
    """

    def __init__(
        self,
        fixture: Union[List[ScriptEntry], Dict[str, Any], Responder],
        strict: bool = False,
    ):
        self.strict = strict
        self.responder: Optional[Responder] = None
        self.queues: Dict[str, List[ScriptEntry]] = {}
        self.cycle = False
        if callable(fixture):
            self.responder = fixture
        elif isinstance(fixture, list):
            self.queues["*"] = list(fixture)
        else:
            self.cycle = bool(fixture.get("cycle", False))
            if "responses" in fixture:
                self.queues["*"] = list(fixture["responses"])
            for tag, entries in fixture.get("by_tag", {}).items():
                self.queues[tag] = list(entries)
        self.cursor: Dict[str, int] = {name: 0 for name in self.queues}
        self._lock = threading.Lock()
        self.backend_id = "scripted"

    @classmethod
    def from_file(cls, path: Union[str, Path], strict: bool = False) -> "ScriptedBackend":
        with open(path, 'r', encoding='utf-8') as f:
            return cls(json.load(f), strict=strict)

    def _queue_for(self, tag: str) -> str:
        if tag in self.queues:
            return tag
        if "*" in self.queues:
            return "*"
        raise BackendUnavailable(f"scripted fixture has no responses for tag {tag!r}")

    def complete(self, request: ChatRequest, sequence: int) -> str:
        if self.responder is not None:
            return self.responder(request)
        name = self._queue_for(request.tag)
        queue = self.queues[name]
        with self._lock:
            index = self.cursor[name]
            if index >= len(queue):
                if not self.cycle or not queue:
                    raise BackendUnavailable(f"scripted queue {name!r} exhausted after {index} responses")
                index = index % len(queue)
            self.cursor[name] += 1
        return self._resolve(queue[index], request)

    def _resolve(self, entry: ScriptEntry, request: ChatRequest) -> str:
        if isinstance(entry, str):
            return entry
        expected = entry.get("prompt_sha256")
        if self.strict and expected and expected != request.prompt_sha256:
            raise TranscriptDivergence(
                f"prompt hash mismatch for {request.tag}: expected {expected[:12]}, got {request.prompt_sha256[:12]}"
            )
        condition = entry.get("when_prompt_contains")
        if condition is not None and not request.contains(condition):
            return entry.get("otherwise", "")
        return entry.get("response", "")

    def state(self) -> Dict[str, Any]:
        with self._lock:
            return {"cursor": dict(self.cursor)}

    def restore(self, state: Dict[str, Any]) -> None:
        with self._lock:
            self.cursor.update(state.get("cursor", {}))


class ReplayBackend:
    """Re-serves recorded responses matched by request sequence number."""

    def __init__(self, records: List[TranscriptRecord], strict: bool = False):
        self.records = {r.sequence: r for r in records}
        self.length = len(records)
        self.strict = strict
        self.backend_id = "replay"

    def complete(self, request: ChatRequest, sequence: int) -> str:
        record = self.records.get(sequence)
        if record is None:
            raise TranscriptExhausted(f"transcript has no entry {sequence} (length {self.length})")
        if record.request.tag != request.tag:
            raise TranscriptDivergence(
                f"request {sequence}: recorded tag {record.request.tag!r}, replayed {request.tag!r}"
            )
        if self.strict and record.request.prompt_sha256 != request.prompt_sha256:
            raise TranscriptDivergence(f"request {sequence}: prompt differs from the recording")
        return record.response

    def state(self) -> Dict[str, Any]:
        return {}

    def restore(self, state: Dict[str, Any]) -> None:
        pass


class LLMGateway:
    """Single entry point for model calls: sequencing, validation, recording, logging."""

    def __init__(
        self,
        backend: Backend,
        transcript: Optional[Transcript] = None,
        max_response_chars: int = 20000,
    ):
        self.backend = backend
        self.transcript = transcript if transcript is not None else Transcript()
        self.max_response_chars = max_response_chars
        self.sequence = len(self.transcript)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            sequence = self.sequence
            self.sequence += 1

        started = time.perf_counter()
        try:
            response = self.backend.complete(request, sequence)
        except BackendUnavailable as error:
            latency = (time.perf_counter() - started) * 1000
            usage_logger.log_llm_call(request.tag, self.backend.backend_id, sequence,
                                      request.prompt_text, "", latency, error=str(error))
            raise
        latency = (time.perf_counter() - started) * 1000
        attempts = getattr(getattr(self.backend, "client", None), "last_attempts", 1)

        self.transcript.append(TranscriptRecord(
            sequence=sequence,
            request=request,
            response=response,
            latency_ms=latency,
            backend_id=self.backend.backend_id,
        ))
        usage_logger.log_llm_call(request.tag, self.backend.backend_id, sequence,
                                  request.prompt_text, response, latency, attempts)

        if not response.strip():
            raise ResponseRejected(f"empty response to request {sequence} ({request.tag})")
        if len(response) > self.max_response_chars:
            raise ResponseRejected(
                f"response to request {sequence} has {len(response)} chars (limit {self.max_response_chars})"
            )
        return response

    def state(self) -> Dict[str, Any]:
        return {"sequence": self.sequence, "backend": self.backend.state()}

    def restore(self, state: Dict[str, Any]) -> None:
        self.sequence = int(state.get("sequence", self.sequence))
        self.backend.restore(state.get("backend", {}))


# Response format

FENCE_OPEN = re.compile(r"^\s*```\s*([A-Za-z_][\w-]*)\s*$")
FENCE_CLOSE = re.compile(r"^\s*```\s*$")


def parse_fences(response: str) -> Dict[str, str]:
    """Map fence label (lowercased) to body. The first block per label wins."""
    blocks: Dict[str, str] = {}
    label: Optional[str] = None
    body: List[str] = []
    for line in response.splitlines():
        if label is None:
            opened = FENCE_OPEN.match(line)
            if opened:
                label, body = opened.group(1).lower(), []
        elif FENCE_CLOSE.match(line):
            blocks.setdefault(label, "\n".join(body).strip())
            label = None
        else:
            body.append(line)
    if label is not None:
        blocks.setdefault(label, "\n".join(body).strip())
    return blocks


def extract_blocks(response: str) -> RawGeneration:
    """Pull the idea/math/code fences out of a generation response."""
    blocks = parse_fences(response)
    if not blocks.get("math"):
        raise MissingMathBlock("response has no ```math block")
    return RawGeneration(
        idea_text=blocks.get("idea", ""),
        math_text=blocks["math"],
        program_text=blocks.get("code", blocks.get("python", "")),
    )


def render_prompt(template: str, **values: str) -> str:
    """Exact `{name}` substitution; other braces are left alone."""
    text = template
    for name, value in values.items():
        text = text.replace("{" + name + "}", value)
    return text


def user_request(prompt: str, tag: str, system: Optional[str] = None,
                 temperature: float = GENERATION_TEMPERATURE, max_tokens: int = 2048) -> ChatRequest:
    messages = []
    if system:
        messages.append(ChatMessage(role="system", content=system))
    messages.append(ChatMessage(role="user", content=prompt))
    return ChatRequest(messages=messages, temperature=temperature, max_tokens=max_tokens, tag=tag)
