"""LLM backends, the response cache and the retrying ``invoke`` wrapper.

Three backends share one interface: ``LiveBackend`` talks HTTP to an
Anthropic- or OpenAI-style endpoint, ``ReplayBackend`` serves recorded
responses and fails loudly on a miss, ``MockBackend`` answers from a script.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol

import httpx

from .errors import BackendError, BackendExhausted, CacheMissInReplayMode, TransientBackendError
from .judges import PromptBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendRequest:
    system_text: str
    user_text: str
    model_id: str
    run_index: int
    content_hash: str
    temperature: float | None = None
    reasoning_effort: str | None = "high"
    # routing metadata for scripted backends; not part of the cache key
    judge_id: str = ""
    trace_id: str = ""


@dataclass(frozen=True)
class Completion:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass(frozen=True)
class BackendResponse:
    text: str
    latency_ms: float
    input_tokens: int
    output_tokens: int
    attempts: int
    cached: bool = False


class Backend(Protocol):
    def complete(self, request: BackendRequest) -> Completion: ...


@dataclass
class BackendSettings:
    model_id: str = "claude-sonnet-4"
    temperature: float | None = None
    reasoning_effort: str | None = "high"
    retry_cap: int = 3
    backoff_base_ms: float = 500.0
    backoff_max_ms: float = 30_000.0


def cache_key(content_hash: str, model_id: str, run_index: int) -> str:
    return f"{content_hash}:{model_id}:{run_index}"


class ResponseCache:
    """Thread-safe response store, optionally persisted as append-only JSON Lines.

    Later lines win when a key repeats.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[str, dict[str, Any]] = {}
        if self.path is not None and self.path.exists():
            for rec in read_jsonl(self.path):
                self._entries[rec["key"]] = rec

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._entries

    def get(self, key: str) -> dict[str, Any] | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, record: dict[str, Any]) -> None:
        rec = {"key": key, **record}
        with self._lock:
            self._entries[key] = rec
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    def texts(self) -> dict[str, str]:
        with self._lock:
            return {k: v["text"] for k, v in self._entries.items()}


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def invoke(
    backend: Backend,
    bundle: PromptBundle,
    run_index: int,
    settings: BackendSettings | None = None,
    cache: ResponseCache | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> BackendResponse:
    """Call the backend once per (prompt, model, run), retrying transient failures."""
    settings = settings or BackendSettings()
    key = cache_key(bundle.content_hash, settings.model_id, run_index)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return BackendResponse(
                text=hit["text"],
                latency_ms=0.0,
                input_tokens=hit.get("input_tokens", 0),
                output_tokens=hit.get("output_tokens", 0),
                attempts=0,
                cached=True,
            )
    request = BackendRequest(
        system_text=bundle.system_text,
        user_text=bundle.user_text,
        model_id=settings.model_id,
        run_index=run_index,
        content_hash=bundle.content_hash,
        temperature=settings.temperature,
        reasoning_effort=settings.reasoning_effort,
        judge_id=bundle.judge_id,
        trace_id=bundle.trace_id,
    )
    cap = max(1, settings.retry_cap)
    last_exc: Exception | None = None
    for attempt in range(1, cap + 1):
        started = time.perf_counter()
        try:
            completion = backend.complete(request)
        except TransientBackendError as exc:
            last_exc = exc
            log.warning("%s/%s run %d attempt %d failed: %s", bundle.judge_id, bundle.trace_id, run_index, attempt, exc)
            if attempt < cap:
                delay = min(settings.backoff_base_ms * 2 ** (attempt - 1), settings.backoff_max_ms)
                sleep(delay / 1000.0)
            continue
        latency = (time.perf_counter() - started) * 1000.0
        response = BackendResponse(
            text=completion.text,
            latency_ms=latency,
            input_tokens=completion.input_tokens,
            output_tokens=completion.output_tokens,
            attempts=attempt,
        )
        if cache is not None:
            cache.put(
                key,
                {
                    "content_hash": bundle.content_hash,
                    "model_id": settings.model_id,
                    "run_index": run_index,
                    "judge_id": bundle.judge_id,
                    "trace_id": bundle.trace_id,
                    "text": completion.text,
                    "input_tokens": completion.input_tokens,
                    "output_tokens": completion.output_tokens,
                },
            )
        return response
    raise BackendExhausted(f"gave up after {cap} attempts: {last_exc}", attempts=cap)


# ---------------------------------------------------------------------------
# backends


class MockBackend:
    """Scripted backend. ``fail_first`` transient failures precede every success."""

    def __init__(
        self,
        responder: str | Callable[[BackendRequest], str],
        fail_first: int = 0,
    ):
        self.responder = responder
        self.fail_first = fail_first
        self.calls = 0
        self._failures: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, request: BackendRequest) -> Completion:
        key = cache_key(request.content_hash, request.model_id, request.run_index)
        with self._lock:
            self.calls += 1
            failed = self._failures.get(key, 0)
            if failed < self.fail_first:
                self._failures[key] = failed + 1
                raise TransientBackendError(f"scripted failure {failed + 1}/{self.fail_first}")
        text = self.responder if isinstance(self.responder, str) else self.responder(request)
        return Completion(text=text, input_tokens=len(request.user_text) // 4, output_tokens=len(text) // 4)


@dataclass
class ScriptedResponses:
    """Responses keyed by (trace_id, judge_id, run_index); run_index None matches any run."""

    entries: dict[tuple[str, str, int | None], str] = field(default_factory=dict)
    default: str | None = None

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]], default: str | None = None) -> "ScriptedResponses":
        entries = {}
        for rec in records:
            run = rec.get("run_index")
            entries[(rec["trace_id"], rec["judge_id"], None if run is None else int(run))] = rec["text"]
        return cls(entries, default)

    @classmethod
    def from_file(cls, path: str | Path, default: str | None = None) -> "ScriptedResponses":
        return cls.from_records(read_jsonl(path), default)

    def __call__(self, request: BackendRequest) -> str:
        for key in (
            (request.trace_id, request.judge_id, request.run_index),
            (request.trace_id, request.judge_id, None),
        ):
            if key in self.entries:
                return self.entries[key]
        if self.default is not None:
            return self.default
        raise BackendError(f"no scripted response for {request.trace_id}/{request.judge_id}/{request.run_index}")


class ReplayBackend:
    """Serves responses recorded in a cache file; a miss means the fixture is incomplete."""

    def __init__(self, recordings: Mapping[str, str]):
        self.recordings = dict(recordings)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        return cls({rec["key"]: rec["text"] for rec in read_jsonl(path)})

    def complete(self, request: BackendRequest) -> Completion:
        self.calls += 1
        key = cache_key(request.content_hash, request.model_id, request.run_index)
        try:
            return Completion(text=self.recordings[key])
        except KeyError:
            raise CacheMissInReplayMode(
                f"no recorded response for {request.judge_id}/{request.trace_id} run {request.run_index}"
            ) from None


_EFFORT_BUDGET = {"low": 2048, "medium": 8192, "high": 16384}


@dataclass
class LiveSettings:
    endpoint: str = "https://api.anthropic.com/v1/messages"
    api_format: str = "anthropic"  # or "openai"
    api_key_env: str = "ANTHROPIC_API_KEY"
    timeout_s: float = 600.0
    max_output_tokens: int = 8192
    anthropic_version: str = "2023-06-01"


class LiveBackend:
    def __init__(self, settings: LiveSettings, client: httpx.Client | None = None):
        self.settings = settings
        self.client = client or httpx.Client(timeout=settings.timeout_s)
        self.calls = 0

    def _api_key(self) -> str:
        key = os.environ.get(self.settings.api_key_env)
        if not key:
            raise BackendError(f"environment variable {self.settings.api_key_env} is not set")
        return key

    def _payload(self, request: BackendRequest) -> tuple[dict[str, str], dict[str, Any]]:
        s = self.settings
        if s.api_format == "anthropic":
            headers = {
                "x-api-key": self._api_key(),
                "anthropic-version": s.anthropic_version,
                "content-type": "application/json",
            }
            body: dict[str, Any] = {
                "model": request.model_id,
                "max_tokens": s.max_output_tokens,
                "messages": [{"role": "user", "content": request.user_text}],
            }
            if request.system_text:
                body["system"] = request.system_text
            budget = _EFFORT_BUDGET.get(request.reasoning_effort or "")
            if budget:
                body["thinking"] = {"type": "enabled", "budget_tokens": budget}
                body["max_tokens"] = s.max_output_tokens + budget
            elif request.temperature is not None:
                body["temperature"] = request.temperature
            return headers, body
        if s.api_format == "openai":
            headers = {"authorization": f"Bearer {self._api_key()}", "content-type": "application/json"}
            messages = []
            if request.system_text:
                messages.append({"role": "system", "content": request.system_text})
            messages.append({"role": "user", "content": request.user_text})
            body = {"model": request.model_id, "messages": messages}
            if request.temperature is not None:
                body["temperature"] = request.temperature
            if request.reasoning_effort:
                body["reasoning_effort"] = request.reasoning_effort
            return headers, body
        raise BackendError(f"unsupported api_format {s.api_format!r}")

    def complete(self, request: BackendRequest) -> Completion:
        self.calls += 1
        headers, body = self._payload(request)
        try:
            resp = self.client.post(self.settings.endpoint, headers=headers, json=body)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise TransientBackendError("response body is not JSON") from exc
        if self.settings.api_format == "anthropic":
            text = "".join(b.get("text", "") for b in data.get("content", []) if b.get("type") == "text")
            usage = data.get("usage", {})
            return Completion(text, usage.get("input_tokens", 0), usage.get("output_tokens", 0))
        choice = (data.get("choices") or [{}])[0]
        usage = data.get("usage", {})
        return Completion(
            choice.get("message", {}).get("content") or "",
            usage.get("prompt_tokens", 0),
            usage.get("completion_tokens", 0),
        )


def response_to_dict(r: BackendResponse) -> dict[str, Any]:
    return asdict(r)
