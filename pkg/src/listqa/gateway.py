"""Chat-completion and embedding access behind one small interface.

Providers implement ``complete(request)`` and ``embed(texts)``. The
``Gateway`` wraps a provider, validates requests before anything leaves the
process, bounds in-flight calls and L2-normalizes embeddings. Only
``HttpProvider`` opens network connections.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

log = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    pass


class PreconditionError(GatewayError, ValueError):
    pass


class ProviderExhausted(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class MalformedProviderResponse(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    pass


class ReplayMiss(GatewayError):
    def __init__(self, tag: str, digest: str):
        self.tag = tag
        self.digest = digest
        super().__init__(f"no recorded response for stage {tag!r} (digest {digest[:12]})")


class CorruptSession(GatewayError):
    pass


GENERATION_TEMPERATURE = 0.7
DETERMINISTIC_TEMPERATURE = 0.0


@dataclass(frozen=True)
class CompletionRequest:
    user_text: str
    model_name: str = "default"
    system_text: str | None = None
    max_output_tokens: int = 512
    temperature: float = DETERMINISTIC_TEMPERATURE
    stop_sequences: tuple[str, ...] = ()
    request_tag: str = ""

    def validate(self) -> CompletionRequest:
        if not self.user_text or not self.user_text.strip():
            raise PreconditionError(f"[{self.request_tag}] user_text must be non-empty")
        if self.max_output_tokens < 1:
            raise PreconditionError("max_output_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise PreconditionError("temperature must be in [0, 2]")
        return self

    def messages(self) -> list[dict]:
        out = []
        if self.system_text:
            out.append({"role": "system", "content": self.system_text})
        out.append({"role": "user", "content": self.user_text})
        return out

    def digest(self) -> str:
        return digest_of(asdict(self))


@dataclass(frozen=True)
class CompletionResult:
    text: str
    provider_id: str = ""
    latency_ms: int = 0
    prompt_tokens: int = 0
    output_tokens: int = 0
    finish_reason: str | None = None


def digest_of(payload) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Provider(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResult: ...

    def embed(self, texts: list[str]) -> list[list[float]]: ...


@dataclass
class ProviderConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key_env_var: str = "OPENAI_API_KEY"
    model: str = "default"
    embedding_model: str = "default"
    max_concurrent: int = 4
    max_retries: int = 3
    backoff_base_ms: int = 500
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        if self.max_concurrent < 1:
            raise PreconditionError("max_concurrent must be >= 1")
        if self.max_retries < 0:
            raise PreconditionError("max_retries must be >= 0")


RETRYABLE_STATUS = {408, 409, 425, 429}


class HttpProvider:
    """OpenAI-style ``/chat/completions`` and ``/embeddings`` over HTTP.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff; 401/403 raise AuthError immediately.
    """

    def __init__(self, config: ProviderConfig, *, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.sleep = sleep
        self.attempts = 0
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"), timeout=config.timeout_s, transport=transport
        )

    @property
    def provider_id(self) -> str:
        return self.config.base_url

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env_var)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff_base_ms * 2 ** (attempt - 1) / 1000)
            self.attempts += 1
            try:
                response = self._client.post(path, json=payload, headers=self._headers())
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s attempt %d failed: %s", path, attempt + 1, exc)
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"HTTP {response.status_code} from {path}: {response.text[:300]}")
            if response.status_code in RETRYABLE_STATUS or response.status_code >= 500:
                last = GatewayError(f"HTTP {response.status_code}: {response.text[:300]}")
                log.warning("%s attempt %d got HTTP %d", path, attempt + 1, response.status_code)
                continue
            if response.status_code >= 400:
                raise GatewayError(f"HTTP {response.status_code} from {path}: {response.text[:300]}")
            try:
                return response.json()
            except ValueError as exc:
                raise MalformedProviderResponse(f"non-JSON body from {path}") from exc
        raise ProviderExhausted(f"{path} failed after {self.config.max_retries + 1} attempts: {last}")

    def complete(self, request: CompletionRequest) -> CompletionResult:
        payload = {
            "model": request.model_name if request.model_name != "default" else self.config.model,
            "messages": request.messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        started = time.monotonic()
        data = self._post("/chat/completions", payload)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedProviderResponse(f"unexpected completion shape: {str(data)[:200]}") from exc
        if not isinstance(text, str):
            raise MalformedProviderResponse("completion content is not a string")
        usage = data.get("usage") or {}
        return CompletionResult(
            text=text,
            provider_id=self.provider_id,
            latency_ms=int((time.monotonic() - started) * 1000),
            prompt_tokens=int(usage.get("prompt_tokens") or 0),
            output_tokens=int(usage.get("completion_tokens") or 0),
            finish_reason=finish,
        )

    def embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.config.embedding_model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda row: row.get("index", 0))
            return [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedProviderResponse("unexpected embedding shape") from exc


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def hash_bag_vector(text: str, dimension: int) -> list[float]:
    """Token-hash bag-of-words vector (unnormalized)."""
    vector = [0.0] * dimension
    for token in _TOKEN_RE.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "big")
        vector[h % dimension] += 1.0 if (h >> 32) & 1 else -1.0
    return vector


Responder = Callable[[CompletionRequest], str]


class MockProvider:
    """Scripted offline provider.

    ``script`` maps a request tag to a fixed string, to a callable taking the
    request, or to a list of ``{"contains": ..., "text": ...}`` rules where
    the first rule whose substring occurs in the user text wins. ``default``
    answers tags the script does not mention. A rule's ``contains`` may be a
    list, in which case every substring must occur.
    """

    provider_id = "mock"

    def __init__(self, script: dict | None = None, *, default: str | Responder | None = None,
                 embedding_dimension: int = 64):
        self.script = dict(script or {})
        self.default = default
        self.embedding_dimension = embedding_dimension
        self.calls: list[CompletionRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script_file(cls, path: str | Path, **kwargs) -> MockProvider:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("script", {}), default=data.get("default"),
                   embedding_dimension=int(data.get("embedding_dimension", 64)), **kwargs)

    def _resolve(self, entry, request: CompletionRequest) -> str | None:
        if entry is None:
            return None
        if callable(entry):
            return entry(request)
        if isinstance(entry, str):
            return entry
        for rule in entry:
            needles = rule.get("contains", "")
            if isinstance(needles, str):
                needles = [needles]
            if all(n in request.user_text for n in needles):
                return rule["text"]
        return None

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.calls.append(request)
        text = self._resolve(self.script.get(request.request_tag), request)
        if text is None:
            text = self._resolve(self.default, request)
        if text is None:
            raise ProviderExhausted(f"mock has no script for tag {request.request_tag!r}")
        return CompletionResult(text=text, provider_id=self.provider_id, finish_reason="stop")

    def embed(self, texts: list[str]) -> list[list[float]]:
        return [hash_bag_vector(t, self.embedding_dimension) for t in texts]


class RecordReplayProvider:
    """Record provider traffic to a JSON-lines session, or serve it back.

    Each line is ``{"digest", "request", "response"}``. In replay mode an
    unseen request raises ReplayMiss naming its stage tag.
    """

    def __init__(self, session_path: str | Path, inner: Provider | None = None):
        self.path = Path(session_path)
        self.inner = inner
        self.mode = "record" if inner is not None else "replay"
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            self._load()
        elif self.mode == "replay":
            raise CorruptSession(f"replay session not found: {self.path}")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    @property
    def provider_id(self) -> str:
        return f"{self.mode}:{self.path.name}"

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for number, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    self._entries[row["digest"]] = row
                except (ValueError, KeyError) as exc:
                    raise CorruptSession(f"{self.path}:{number}: {exc}") from None

    def _store(self, digest: str, request: dict, response) -> None:
        row = {"digest": digest, "request": request, "response": response}
        with self._lock:
            if digest in self._entries:
                return
            self._entries[digest] = row
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

    def complete(self, request: CompletionRequest) -> CompletionResult:
        digest = request.digest()
        row = self._entries.get(digest)
        if row is not None:
            return CompletionResult(text=row["response"]["text"], provider_id=self.provider_id,
                                    finish_reason=row["response"].get("finish_reason"))
        if self.inner is None:
            raise ReplayMiss(request.request_tag, digest)
        result = self.inner.complete(request)
        self._store(digest, asdict(request), {"text": result.text, "finish_reason": result.finish_reason})
        return result

    def embed(self, texts: list[str]) -> list[list[float]]:
        request = {"embed": list(texts)}
        digest = digest_of(request)
        row = self._entries.get(digest)
        if row is not None:
            return row["response"]["vectors"]
        if self.inner is None:
            raise ReplayMiss("embed", digest)
        vectors = self.inner.embed(texts)
        self._store(digest, request, {"vectors": vectors})
        return vectors


def record_replay(session_path: str | Path, inner: Provider | None = None) -> RecordReplayProvider:
    """Record through ``inner`` when given, otherwise replay the session."""
    return RecordReplayProvider(session_path, inner)


@dataclass
class Gateway:
    """Shared entry point for every model call in the pipeline."""

    provider: Provider
    max_concurrent: int = 4
    model_name: str = "default"
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.max_concurrent < 1:
            raise PreconditionError("max_concurrent must be >= 1")
        self._slots = threading.BoundedSemaphore(self.max_concurrent)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        request.validate()
        with self._slots:
            result = self.provider.complete(request)
        text = result.text.rstrip()
        if not text and result.finish_reason not in ("stop", "length", "content_filter"):
            raise MalformedProviderResponse(f"[{request.request_tag}] empty completion without a stop reason")
        if text != result.text:
            result = CompletionResult(text, result.provider_id, result.latency_ms,
                                      result.prompt_tokens, result.output_tokens, result.finish_reason)
        return result

    def ask(self, prompt: str, *, tag: str, temperature: float = DETERMINISTIC_TEMPERATURE,
            max_output_tokens: int = 512, system: str | None = None) -> str:
        return self.complete(CompletionRequest(
            user_text=prompt, model_name=self.model_name, system_text=system,
            max_output_tokens=max_output_tokens, temperature=temperature, request_tag=tag,
        )).text

    def embed(self, texts: list[str]) -> list[list[float]]:
        texts = list(texts)
        if not texts or any(not t or not t.strip() for t in texts):
            raise PreconditionError("embed needs a non-empty list of non-empty texts")
        with self._slots:
            vectors = self.provider.embed(texts)
        if len(vectors) != len(texts):
            raise DimensionMismatch(f"{len(texts)} texts but {len(vectors)} vectors")
        dims = {len(v) for v in vectors}
        if len(dims) != 1 or 0 in dims:
            raise DimensionMismatch(f"inconsistent embedding dimensions: {sorted(dims)}")
        out = []
        for vector in vectors:
            norm = math.sqrt(sum(x * x for x in vector))
            out.append([x / norm for x in vector] if norm > 0 else list(vector))
        return out
