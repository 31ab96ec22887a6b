"""OpenAI-compatible chat/embedding client with retries, disk cache and mock mode."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import (
    BackendError,
    ConfigError,
    EmptyResponseError,
    MockMissError,
    RequestError,
    TransportError,
    ValidationError,
)
from .prompting import find_delimited

logger = logging.getLogger(__name__)

STUB_DIM = 256
DEFAULT_API_KEY_ENV = "LLHKG_API_KEY"
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:11434/v1"
    model: str = "llama3.1:8b"
    api_key: Optional[str] = field(default=None, repr=False)
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 120.0
    max_retries: int = 3
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: Optional[int] = 0
    mock: bool = False
    batch_size: int = 32

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError(f"temperature must lie in [0, 2], got {self.temperature}")
        if self.max_tokens < 1 or self.batch_size < 1:
            raise ConfigError("max_tokens and batch_size must be positive")

    def resolved_api_key(self) -> Optional[str]:
        return self.api_key or os.environ.get(self.api_key_env)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("api_key")  # secrets never reach configs, digests or reports
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EndpointConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown endpoint settings: {sorted(unknown)}")
        return cls(**data)


# Role defaults: extraction and correction use different local models.
EXTRACTOR = EndpointConfig(model="llama3.1:8b")
CORRECTOR = EndpointConfig(model="qwen2.5:7b")
EMBEDDER = EndpointConfig(model="nomic-embed-text")


@dataclass(frozen=True)
class ChatRequest:
    config: EndpointConfig
    system: str
    user: str

    def __post_init__(self):
        if not self.user:
            raise ValidationError("chat request needs a non-empty user message")

    @property
    def key(self) -> str:
        return cache_key(self.config, self.system, self.user)


def cache_key(config: EndpointConfig, system: str, user: str) -> str:
    """SHA-256 hex digest of the keyed request fields.

    Byte layout: the UTF-8 encoding of the compact JSON array
    ``[model, system, user, temperature, max_tokens, seed]`` (no spaces,
    non-ASCII kept literal).
    """
    payload = [config.model, system, user, float(config.temperature), config.max_tokens, config.seed]
    blob = json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class ResponseCache:
    """One JSON file per entry, named by the request digest."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[str]:
        path = self._path(key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, OSError):
            logger.warning("ignoring unreadable cache entry %s", path)
            return None
        return entry.get("response")

    def put(self, key: str, text: str, model: str = "") -> None:
        entry = {
            "key": key,
            "model": model,
            "response": text,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            tmp = self._path(key).with_suffix(".tmp")
            tmp.write_text(json.dumps(entry, ensure_ascii=False, indent=2), encoding="utf-8")
            os.replace(tmp, self._path(key))


class MockFixtures:
    """Canned responses for offline runs.

    Lookup order: exact request digest (``responses``), then the delimited
    source text per model (``by_document``; a list value is consumed one item
    per request, repeating the last), then the sequential ``script``.
    """

    def __init__(self, responses=None, by_document=None, script=None):
        self.responses = dict(responses or {})
        self.by_document = {m: dict(v) for m, v in (by_document or {}).items()}
        self.script = list(script or [])
        self._lock = threading.Lock()
        self._doc_hits = {}
        self._script_pos = 0

    @classmethod
    def load(cls, path) -> "MockFixtures":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read mock fixtures {path}: {exc}") from None
        return cls(data.get("responses"), data.get("by_document"), data.get("script"))

    def resolve(self, request: ChatRequest) -> str:
        key = request.key
        if key in self.responses:
            return self.responses[key]
        with self._lock:
            per_model = self.by_document.get(request.config.model, {})
            doc_text = find_delimited(request.user)
            if doc_text is not None and doc_text in per_model:
                value = per_model[doc_text]
                if isinstance(value, list):
                    n = self._doc_hits.get((request.config.model, doc_text), 0)
                    self._doc_hits[(request.config.model, doc_text)] = n + 1
                    return value[min(n, len(value) - 1)]
                return value
            if self._script_pos < len(self.script):
                self._script_pos += 1
                return self.script[self._script_pos - 1]
        raise MockMissError(f"no mock fixture for request {key[:12]} (model {request.config.model})")


class HttpxTransport:
    """POST JSON and return ``(status, decoded body)``; network faults raise TransportError."""

    def __init__(self):
        import httpx

        self._httpx = httpx
        self._client = httpx.Client()

    def __call__(self, url, payload, headers, timeout):
        try:
            resp = self._client.post(url, json=payload, headers=headers, timeout=timeout)
        except self._httpx.HTTPError as exc:
            raise TransportError(f"{url}: {exc.__class__.__name__}: {exc}") from exc
        try:
            body = resp.json()
        except ValueError:
            body = {"error": resp.text[:200]}
        return resp.status_code, body


class ScriptedTransport:
    """Replays a fixed list of ``(status, body)`` pairs or exceptions; for tests."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def __call__(self, url, payload, headers, timeout):
        self.calls.append((url, payload))
        if not self.script:
            raise TransportError("scripted transport exhausted")
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def chat_reply(text: str) -> dict:
    """Minimal chat-completions response body carrying ``text``."""
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


class LLMGateway:
    """Uniform entry point for chat and embedding calls.

    Mock mode is selected per endpoint (``EndpointConfig.mock``). Live calls go
    through ``transport`` with at most ``max_in_flight`` concurrent requests;
    successful chat responses are written to the cache before being returned.
    """

    def __init__(self, cache_dir=None, fixtures: Optional[MockFixtures] = None, transport=None,
                 max_in_flight: int = 4, sleep: Callable[[float], None] = time.sleep, jitter_seed=None):
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.fixtures = fixtures
        self._transport = transport
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self._rng = random.Random(jitter_seed)
        self._count_lock = threading.Lock()
        self.chat_calls = 0
        self.network_calls = 0
        self.cache_hits = 0

    def __deepcopy__(self, memo):
        # a gateway is a shared resource (cache, in-flight limit, counters)
        return self

    @property
    def transport(self):
        if self._transport is None:
            self._transport = HttpxTransport()
        return self._transport

    def _bump(self, name):
        with self._count_lock:
            setattr(self, name, getattr(self, name) + 1)

    def _post(self, config: EndpointConfig, path: str, payload: dict) -> dict:
        url = config.base_url.rstrip("/") + path
        headers = {"Content-Type": "application/json"}
        api_key = config.resolved_api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last = None
        for attempt in range(config.max_retries + 1):
            if attempt:
                delay = BACKOFF_BASE * BACKOFF_FACTOR ** (attempt - 1)
                self._sleep(delay + self._rng.uniform(0, BACKOFF_BASE))
            self._bump("network_calls")
            try:
                with self._slots:
                    status, body = self.transport(url, payload, headers, config.timeout)
            except TransportError as exc:
                last = str(exc)
                logger.warning("attempt %d to %s failed: %s", attempt + 1, url, exc)
                continue
            if status == 429 or status >= 500:
                last = f"HTTP {status}"
                logger.warning("attempt %d to %s got HTTP %d", attempt + 1, url, status)
                continue
            if status >= 400:
                raise RequestError(f"{url}: HTTP {status}: {body}", status)
            if not isinstance(body, dict):
                raise BackendError(f"{url}: response body is not a JSON object")
            return body
        raise TransportError(f"{url}: giving up after {config.max_retries + 1} attempts ({last})")

    def chat(self, request: ChatRequest) -> str:
        self._bump("chat_calls")
        config = request.config
        if config.mock:
            if self.fixtures is None:
                raise MockMissError("mock mode requested but no fixtures are loaded")
            text = self.fixtures.resolve(request)
            if not isinstance(text, str) or not text.strip():
                raise EmptyResponseError(f"empty mock response for model {config.model}")
            return text
        key = request.key
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                self._bump("cache_hits")
                return cached
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        payload = {
            "model": config.model,
            "messages": messages,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        if config.seed is not None:
            payload["seed"] = config.seed
        body = self._post(config, "/chat/completions", payload)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendError(f"malformed chat response from {config.model}") from None
        if not isinstance(text, str) or not text.strip():
            raise EmptyResponseError(f"model {config.model} returned an empty message")
        if self.cache is not None:
            self.cache.put(key, text, config.model)
        return text

    def embed(self, texts, config: EndpointConfig) -> np.ndarray:
        """Return one L2-normalized row per text, in input order."""
        texts = list(texts)
        for i, t in enumerate(texts):
            if not isinstance(t, str) or not t:
                raise ValidationError(f"embedding input {i} must be a non-empty string")
        if not texts:
            return np.zeros((0, STUB_DIM))
        if config.mock:
            return np.vstack([stub_embed(t) for t in texts])
        rows = []
        for start in range(0, len(texts), config.batch_size):
            batch = texts[start:start + config.batch_size]
            body = self._post(config, "/embeddings", {"model": config.model, "input": batch})
            try:
                data = sorted(body["data"], key=lambda d: d.get("index", 0))
                vectors = [d["embedding"] for d in data]
            except (KeyError, TypeError, AttributeError):
                raise BackendError(f"malformed embedding response from {config.model}") from None
            if len(vectors) != len(batch):
                raise BackendError(f"{config.model} returned {len(vectors)} vectors for {len(batch)} inputs")
            if len({len(v) for v in vectors}) != 1:
                raise BackendError(f"{config.model} returned vectors of mixed dimension")
            rows.extend(vectors)
        mat = np.asarray(rows, dtype=float)
        if mat.ndim != 2:
            raise BackendError(f"{config.model} returned vectors of mixed dimension")
        return normalize_rows(mat)

    def embedder(self, config: EndpointConfig):
        """Batch callable ``texts -> matrix`` bound to ``config``."""
        return lambda texts: self.embed(texts, config)


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def stub_embed(text: str) -> np.ndarray:
    """Hashed bag-of-words unit vector (256 dims); the all-zero vector when there are no tokens."""
    vec = np.zeros(STUB_DIM)
    for token in text.lower().split():
        vec[fnv1a_64(token.encode("utf-8")) % STUB_DIM] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def stub_embedder(texts) -> np.ndarray:
    texts = list(texts)
    if not texts:
        return np.zeros((0, STUB_DIM))
    return np.vstack([stub_embed(t) for t in texts])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors; 0.0 if either is degenerate (all zeros)."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def with_overrides(config: EndpointConfig, **changes) -> EndpointConfig:
    return replace(config, **changes)
