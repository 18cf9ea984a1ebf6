"""Language-model access: providers, a content-addressed response cache, retries, token accounting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Protocol

import httpx
import jsonschema

from .errors import BackendUnavailableError, MissingFixtureError, ParseError, StorageError
from .prompts import SCHEMAS, PromptKind
from .state import DEFAULT_TEMPERATURE, ModelCall, TraceRecord

logger = logging.getLogger(__name__)

API_KEY_ENV = "ABDUCTOR_API_KEY"
WILDCARD = "*"


class SchemaViolation(ValueError):
    """Raised by payload checks; the client treats it like a schema failure and retries."""


@dataclass(frozen=True)
class ModelRequest:
    kind: PromptKind
    rendered_prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    case_id: str = ""
    round: int = 0
    # item the call is about (event id, obstacle id, query id); part of the mock fixture key only
    discriminator: str = ""


@dataclass(frozen=True)
class ModelResponse:
    raw_text: str
    parsed: Any
    prompt_tokens: int
    completion_tokens: int
    cache_hit: bool = False
    latency_ms: float = 0.0
    retries: int = 0
    # one entry per attempt actually billed, including failed schema attempts
    calls: tuple[ModelCall, ...] = ()


@dataclass(frozen=True)
class ProviderReply:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class TransportFailure(Exception):
    """Retryable provider failure (timeouts, 429, 5xx)."""


class Provider(Protocol):
    model_name: str

    def generate(self, request: ModelRequest) -> ProviderReply: ...


def estimate_tokens(text: str) -> int:
    """Whitespace token estimator, used when the provider reports no usage."""
    return len(text.split())


def cache_key(kind: PromptKind | str, rendered_prompt: str, temperature: float, model_name: str) -> str:
    identity = json.dumps(
        [PromptKind(kind).value, rendered_prompt, float(temperature), model_name],
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(identity.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class MockProvider:
    """Scripted provider backed by fixture files.

    A fixture file holds one case's script::

        {"case_id": "c1",
         "responses": [{"kind": "Aware", "round": 0, "key": "", "response": {...}},
                       {"kind": "Verify", "round": 0, "key": "ev1", "attempts": ["bad", {...}]},
                       {"kind": "Aware", "round": "*", "key": "*", "response": {...}}]}

    Entries are looked up by (case_id, kind, round, key); ``"*"`` in round or key
    matches anything, exact entries win. ``attempts`` is consumed one element per
    call and the last element repeats. Missing keys raise :class:`MissingFixtureError`.
    """

    model_name = "mock"

    def __init__(self, scripts: dict[tuple[str, str, str, str], dict[str, Any]] | None = None):
        self.scripts = dict(scripts or {})
        self._counters: dict[tuple[str, str, str, str], int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_fixture_data(cls, documents: Iterable[dict[str, Any]]) -> "MockProvider":
        provider = cls()
        for doc in documents:
            provider.add_script(doc)
        return provider

    @classmethod
    def from_path(cls, path: str | Path) -> "MockProvider":
        path = Path(path)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        return cls.from_fixture_data(json.loads(f.read_text(encoding="utf-8")) for f in files)

    def add_script(self, doc: dict[str, Any]) -> None:
        case_id = str(doc["case_id"])
        for entry in doc["responses"]:
            key = (case_id, PromptKind(entry["kind"]).value, str(entry.get("round", 0)), str(entry.get("key", "")))
            self.scripts[key] = entry

    def _lookup(self, request: ModelRequest) -> tuple[tuple[str, str, str, str], dict[str, Any]]:
        kind = PromptKind(request.kind).value
        for rnd in (str(request.round), WILDCARD):
            for disc in (request.discriminator, WILDCARD):
                key = (request.case_id, kind, rnd, disc)
                if key in self.scripts:
                    return key, self.scripts[key]
        raise MissingFixtureError(f"{request.case_id}/{kind}/round={request.round}/key={request.discriminator}")

    def generate(self, request: ModelRequest) -> ProviderReply:
        key, entry = self._lookup(request)
        with self._lock:
            self.calls += 1
            if "attempts" in entry:
                index = self._counters.get(key, 0)
                self._counters[key] = index + 1
                attempts = entry["attempts"]
                body = attempts[min(index, len(attempts) - 1)]
            else:
                body = entry["response"]
        if isinstance(body, dict) and body.get("__transport_error__"):
            raise TransportFailure(f"scripted transport failure for {key}")
        text = body if isinstance(body, str) else json.dumps(body, ensure_ascii=False, sort_keys=True)
        usage = entry.get("usage") or {}
        return ProviderReply(text, usage.get("prompt_tokens"), usage.get("completion_tokens"))


class HttpProvider:
    """Chat-completion provider speaking the common ``/chat/completions`` JSON shape.

    Request: ``{"model", "messages": [{"role": "user", "content": prompt}], "temperature",
    "response_format": {"type": "json_object"}}``. Response: ``choices[0].message.content``
    and ``usage.prompt_tokens`` / ``usage.completion_tokens``.
    """

    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        json_mode: bool = True,
    ):
        self.model_name = model_name
        self.json_mode = json_mode
        token = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def generate(self, request: ModelRequest) -> ProviderReply:
        body: dict[str, Any] = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": request.temperature,
        }
        if self.json_mode:
            body["response_format"] = {"type": "json_object"}
        try:
            resp = self._client.post("/chat/completions", json=body)
        except httpx.TransportError as exc:
            raise TransportFailure(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportFailure(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendUnavailableError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailableError(f"unexpected completion payload: {str(data)[:200]}") from exc
        usage = data.get("usage") or {}
        return ProviderReply(text or "", usage.get("prompt_tokens"), usage.get("completion_tokens"))

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class ResponseCache:
    """Content-addressed store of validated responses, optionally persisted to a directory."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self.hits = 0
        self.misses = 0

    def key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def _path(self, key: str) -> Path:
        assert self.directory is not None
        return self.directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        with self._lock:
            entry = self._memory.get(key)
        if entry is None and self.directory is not None:
            path = self._path(key)
            if path.exists():
                try:
                    entry = json.loads(path.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    logger.warning("ignoring corrupt cache entry %s", path)
                    entry = None
                if entry is not None:
                    with self._lock:
                        self._memory[key] = entry
        with self._lock:
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
        return entry

    def put(self, key: str, entry: dict[str, Any]) -> None:
        with self._lock:
            self._memory[key] = entry
        if self.directory is None:
            return
        path = self._path(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(entry, handle, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageError(f"cannot write cache entry {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


def parse_json_payload(text: str) -> Any:
    stripped = text.strip()
    match = _FENCE.match(stripped)
    if match:
        stripped = match.group(1)
    return json.loads(stripped)


class ModelClient:
    """Schema-validated, cached, retrying access to one provider."""

    def __init__(
        self,
        provider: Provider,
        cache: ResponseCache | None = None,
        retry_budget: int = 3,
        transport_retries: int = 3,
        backoff_seconds: float = 0.0,
    ):
        self.provider = provider
        self.cache = cache
        self.retry_budget = retry_budget
        self.transport_retries = transport_retries
        self.backoff_seconds = backoff_seconds

    @property
    def model_name(self) -> str:
        return self.provider.model_name

    def _generate(self, request: ModelRequest) -> tuple[ProviderReply, int]:
        failures = 0
        while True:
            try:
                return self.provider.generate(request), failures
            except TransportFailure as exc:
                failures += 1
                if failures > self.transport_retries:
                    raise BackendUnavailableError(
                        f"{request.kind.value} call failed after {failures} attempts: {exc}"
                    ) from exc
                logger.warning("retrying %s after transport failure (%d): %s", request.kind.value, failures, exc)
                if self.backoff_seconds:
                    time.sleep(self.backoff_seconds * 2 ** (failures - 1))

    def complete(
        self,
        request: ModelRequest,
        check: Callable[[Any], None] | None = None,
    ) -> ModelResponse:
        """Run ``request`` and return a response whose payload passed the kind's schema and ``check``.

        Raises ParseError carrying every raw attempt once the retry budget is spent.
        """
        key = cache_key(request.kind, request.rendered_prompt, request.temperature, self.model_name)
        if self.cache is None:
            return self._fresh(request, check)
        with self.cache.key_lock(key):
            entry = self.cache.get(key)
            if entry is not None:
                call = ModelCall(
                    prompt_kind=request.kind.value,
                    prompt_tokens=entry["prompt_tokens"],
                    completion_tokens=entry["completion_tokens"],
                    cache_hit=True,
                    token_source=entry.get("token_source", "provider"),
                )
                return ModelResponse(
                    raw_text=entry["raw_text"],
                    parsed=entry["parsed"],
                    prompt_tokens=entry["prompt_tokens"],
                    completion_tokens=entry["completion_tokens"],
                    cache_hit=True,
                    calls=(call,),
                )
            response = self._fresh(request, check)
            self.cache.put(
                key,
                {
                    "kind": request.kind.value,
                    "model": self.model_name,
                    "raw_text": response.raw_text,
                    "parsed": response.parsed,
                    "prompt_tokens": response.prompt_tokens,
                    "completion_tokens": response.completion_tokens,
                    "token_source": response.calls[-1].token_source,
                },
            )
            return response

    def _fresh(self, request: ModelRequest, check: Callable[[Any], None] | None) -> ModelResponse:
        schema = SCHEMAS[request.kind]
        raw_attempts: list[str] = []
        calls: list[ModelCall] = []
        retries = 0
        last_error = ""
        for _ in range(self.retry_budget):
            started = time.perf_counter()
            reply, transport_failures = self._generate(request)
            retries += transport_failures
            latency = (time.perf_counter() - started) * 1000.0
            if reply.prompt_tokens is None or reply.completion_tokens is None:
                prompt_tokens = estimate_tokens(request.rendered_prompt)
                completion_tokens = estimate_tokens(reply.text)
                source = "whitespace"
            else:
                prompt_tokens, completion_tokens, source = reply.prompt_tokens, reply.completion_tokens, "provider"
            calls.append(ModelCall(request.kind.value, prompt_tokens, completion_tokens, False, source, latency))
            raw_attempts.append(reply.text)
            try:
                payload = parse_json_payload(reply.text)
                jsonschema.validate(payload, schema)
                if check is not None:
                    check(payload)
            except (json.JSONDecodeError, jsonschema.ValidationError, SchemaViolation) as exc:
                last_error = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
                logger.warning("%s response rejected: %s", request.kind.value, last_error)
                retries += 1
                continue
            return ModelResponse(
                raw_text=reply.text,
                parsed=payload,
                prompt_tokens=prompt_tokens,
                completion_tokens=completion_tokens,
                latency_ms=latency,
                retries=retries,
                calls=tuple(calls),
            )
        raise ParseError(
            f"{request.kind.value} response failed validation {self.retry_budget} times: {last_error}",
            raw_attempts,
        )


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


class CostSummary(NamedTuple):
    prompt_tokens: int
    completion_tokens: int
    calls: int
    cache_hits: int

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def cost_summary(trace: Iterable[TraceRecord], strict_spend: bool = False) -> CostSummary:
    """Sum the model calls of a trace.

    Cache hits keep their original token counts unless ``strict_spend`` is set,
    in which case only freshly generated tokens are counted.
    """
    prompt = completion = calls = hits = 0
    for record in trace:
        for call in record.model_calls:
            calls += 1
            if call.cache_hit:
                hits += 1
                if strict_spend:
                    continue
            prompt += call.prompt_tokens
            completion += call.completion_tokens
    return CostSummary(prompt, completion, calls, hits)


def run_cost(trace: Iterable[TraceRecord], basis: str = "tokens", strict_spend: bool = False) -> float:
    """Scalar cost of one run under ``basis`` in {tokens, calls, latency}."""
    trace = list(trace)
    if basis == "tokens":
        return float(cost_summary(trace, strict_spend).total_tokens)
    if basis == "calls":
        return float(cost_summary(trace, strict_spend).calls)
    if basis == "latency":
        return sum(c.latency_ms for r in trace for c in r.model_calls)
    raise ValueError(f"unknown cost basis {basis!r}")


@dataclass
class CallLog:
    """Thread-safe accumulator for the model calls made during one round."""

    _calls: list[ModelCall] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def extend(self, calls: Iterable[ModelCall]) -> None:
        with self._lock:
            self._calls.extend(calls)

    def drain(self) -> tuple[ModelCall, ...]:
        with self._lock:
            calls, self._calls = tuple(self._calls), []
        return calls
