"""Chat, vision-chat and embedding access over an OpenAI-compatible wire protocol.

Two backends share one interface: ``remote`` talks HTTP via httpx, ``mock``
answers from a rule table so whole pipelines run offline and deterministically.
Embeddings default to a hashed bag-of-tokens model that needs no server.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import math
import mimetypes
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np
import yaml

from vla_kitchen.errors import ParseError, VlaKitchenError

log = logging.getLogger(__name__)

EMBED_DIM = 2048
SCENE_REF_PREFIX = "scene:"

_STOPWORDS = frozenset(
    "a an and are as at be but by can could do for from have i i'm in into is it it's its let's me my of on or please "
    "some that the this to up us want we with would you your".split()
)
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


class GatewayError(VlaKitchenError):
    """Base class for backend failures."""


class GatewayTimeout(GatewayError):
    pass


class HttpError(GatewayError):
    def __init__(self, status: int, body: str = "") -> None:
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}" + (f": {body[:200]}" if body else ""))


class MalformedResponse(GatewayError):
    pass


class MissingImage(GatewayError):
    pass


class ConnectionFailed(GatewayError):
    pass


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str
    image: str | None = None  # file path or "scene:<id>"

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if not isinstance(self.content, str):
            raise TypeError("message content must be text")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    model: str = ""
    temperature: float = 0.0
    max_tokens: int | None = None
    seed: int | None = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if not (self.temperature >= 0):
            raise ValueError("temperature must be >= 0")
        if self.max_tokens is not None and self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def simple(cls, user: str, system: str | None = None, image: str | None = None, **kw) -> "ChatRequest":
        msgs = [ChatMessage(Role.SYSTEM, system)] if system else []
        msgs.append(ChatMessage(Role.USER, user, image))
        return cls(tuple(msgs), **kw)

    def last_user(self) -> ChatMessage | None:
        for m in reversed(self.messages):
            if m.role is Role.USER:
                return m
        return None

    def image_ref(self) -> str | None:
        for m in reversed(self.messages):
            if m.image:
                return m.image
        return None


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)


# -- mock scenarios ------------------------------------------------------------


@dataclass(frozen=True)
class MockRule:
    response: str
    contains: str | None = None
    pattern: str | None = None
    image: str | None = None

    def __post_init__(self) -> None:
        if self.contains is None and self.pattern is None and self.image is None:
            raise ValueError("a mock rule needs at least one matcher")
        if self.pattern is not None:
            re.compile(self.pattern)

    def matches(self, text: str, image_key: str | None) -> bool:
        if self.contains is not None and self.contains.lower() not in text.lower():
            return False
        if self.pattern is not None and not re.search(self.pattern, text, re.IGNORECASE | re.MULTILINE):
            return False
        if self.image is not None and self.image != image_key:
            return False
        return True


@dataclass(frozen=True)
class MockScenario:
    rules: tuple[MockRule, ...]
    default: str = ""
    name: str = "mock"

    def respond(self, text: str, image_key: str | None = None) -> str:
        for rule in self.rules:
            if rule.matches(text, image_key):
                return rule.response
        return self.default

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], source: str | None = None) -> "MockScenario":
        if not isinstance(doc, Mapping):
            raise ParseError("scenario must be a mapping", source)
        unknown = set(doc) - {"name", "rules", "default"}
        if unknown:
            raise ParseError(f"unknown scenario keys: {sorted(unknown)}", source)
        rules = []
        for i, raw in enumerate(doc.get("rules") or []):
            if not isinstance(raw, Mapping) or "response" not in raw:
                raise ParseError(f"rule {i}: needs a 'response'", source)
            extra = set(raw) - {"response", "contains", "pattern", "image"}
            if extra:
                raise ParseError(f"rule {i}: unknown keys {sorted(extra)}", source)
            try:
                rules.append(MockRule(str(raw["response"]), raw.get("contains"), raw.get("pattern"), raw.get("image")))
            except (ValueError, re.error) as exc:
                raise ParseError(f"rule {i}: {exc}", source) from None
        return cls(tuple(rules), str(doc.get("default", "")), str(doc.get("name", source or "mock")))

    def merged(self, other: "MockScenario") -> "MockScenario":
        """Rules of ``self`` first, then ``other``; ``self``'s default wins when set."""
        return MockScenario(self.rules + other.rules, self.default or other.default, self.name)


def load_scenario(path: str | Path) -> MockScenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}", str(path)) from None
    return MockScenario.from_dict(doc or {}, str(path))


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    base_url: str | None = None
    model: str = ""
    api_key_env: str | None = None
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 0.5
    scenario: MockScenario | None = None
    embedding: str = "hashed"  # or "remote"
    embedding_model: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "remote"):
            raise ValueError(f"backend kind must be 'mock' or 'remote', got {self.kind!r}")
        if self.kind == "remote" and not self.base_url:
            raise ValueError("a remote backend requires base_url")
        if self.kind == "mock" and self.scenario is None:
            raise ValueError("a mock backend requires a scenario")
        if self.embedding not in ("hashed", "remote"):
            raise ValueError("embedding must be 'hashed' or 'remote'")
        if self.embedding == "remote" and self.kind != "remote":
            raise ValueError("remote embeddings need a remote backend")
        if self.retries < 0 or self.timeout <= 0 or self.backoff < 0:
            raise ValueError("retries, timeout and backoff must be non-negative (timeout positive)")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base_dir: Path | None = None, source: str | None = None) -> "BackendConfig":
        doc = dict(doc)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - allowed
        if unknown:
            raise ParseError(f"unknown backend keys: {sorted(unknown)}", source)
        scen = doc.get("scenario")
        if isinstance(scen, (list, tuple)):
            scenarios = [_resolve_scenario(s, base_dir, source) for s in scen]
            merged = scenarios[0]
            for s in scenarios[1:]:
                merged = merged.merged(s)
            doc["scenario"] = merged
        elif scen is not None:
            doc["scenario"] = _resolve_scenario(scen, base_dir, source)
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ParseError(str(exc), source) from None


def _resolve_scenario(spec: Any, base_dir: Path | None, source: str | None) -> MockScenario:
    if isinstance(spec, Mapping):
        return MockScenario.from_dict(spec, source)
    path = Path(spec)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return load_scenario(path)


# -- transcript ----------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    kind: str  # chat | chat_image | embed
    purpose: str
    backend: str
    request: Mapping[str, Any]
    response: str | None
    error: str | None
    attempts: int
    elapsed_s: float

    def to_dict(self) -> dict:
        return asdict(self)


class Transcript:
    """Append-only, thread-safe record of backend invocations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[TranscriptEntry] = []

    def append(self, entry: TranscriptEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def count(self, kind: str | None = None, purpose: str | None = None) -> int:
        return sum(
            1 for e in self.entries if (kind is None or e.kind == kind) and (purpose is None or e.purpose == purpose)
        )


# -- embeddings ----------------------------------------------------------------


def _tokens(text: str) -> list[str]:
    out = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if tok in _STOPWORDS or len(tok) < 2:
            continue
        if len(tok) > 3 and tok.endswith("s") and not tok.endswith("ss"):
            tok = tok[:-1]
        out.append(tok)
    return out


def _bucket(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=b"vla-kitchen").digest()
    return int.from_bytes(digest, "little") % EMBED_DIM


def hashed_embedding(text: str) -> np.ndarray:
    """Unit-norm bag-of-tokens vector: sublinear term counts hashed into ``EMBED_DIM`` buckets."""
    toks = _tokens(text)
    if not toks:
        # still deterministic and nonzero: hash the raw text as a single token
        toks = ["\x00" + text.strip().lower()]
    counts: dict[int, int] = {}
    for tok in toks:
        b = _bucket(tok)
        counts[b] = counts.get(b, 0) + 1
    v = np.zeros(EMBED_DIM)
    for b, c in counts.items():
        v[b] = 1.0 + math.log(c)
    return v / np.linalg.norm(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# -- client --------------------------------------------------------------------


def _scene_key(ref: str) -> str:
    if ref.startswith(SCENE_REF_PREFIX):
        return ref[len(SCENE_REF_PREFIX):]
    return Path(ref).stem


def _default_image_loader(ref: str) -> bytes:
    if ref.startswith(SCENE_REF_PREFIX):
        raise MissingImage(f"no renderer available for {ref!r}")
    path = Path(ref)
    if not path.is_file():
        raise MissingImage(f"image not found: {ref}")
    return path.read_bytes()


def _data_url(ref: str, data: bytes) -> str:
    mime = mimetypes.guess_type(ref)[0] or "image/png"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def _request_summary(request: ChatRequest) -> dict:
    return {
        "model": request.model,
        "temperature": request.temperature,
        "seed": request.seed,
        "messages": [
            {"role": m.role.value, "content": m.content, **({"image": m.image} if m.image else {})}
            for m in request.messages
        ],
    }


class LlmClient:
    """A backend handle; safe to share between threads."""

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        image_loader: Callable[[str], bytes] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self._image_loader = image_loader or _default_image_loader
        self._sleep = sleep
        self._http: httpx.Client | None = None
        if config.kind == "remote":
            headers = {}
            if config.api_key_env:
                token = os.environ.get(config.api_key_env)
                if token:
                    headers["Authorization"] = f"Bearer {token}"
                else:
                    log.warning("environment variable %s is not set; sending no auth header", config.api_key_env)
            self._http = httpx.Client(
                base_url=config.base_url.rstrip("/"), timeout=config.timeout, headers=headers, transport=transport
            )

    def close(self) -> None:
        if self._http is not None:
            self._http.close()

    def __enter__(self) -> "LlmClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # public operations

    def chat(self, request: ChatRequest, *, purpose: str = "", transcript: Transcript | None = None) -> ChatResponse:
        return self._recorded("chat", purpose, _request_summary(request), transcript, lambda: self._chat(request, False))

    def chat_with_image(
        self, request: ChatRequest, *, purpose: str = "", transcript: Transcript | None = None
    ) -> ChatResponse:
        return self._recorded(
            "chat_image", purpose, _request_summary(request), transcript, lambda: self._chat(request, True)
        )

    def embed(
        self, texts: Sequence[str], *, purpose: str = "", transcript: Transcript | None = None
    ) -> list[np.ndarray]:
        texts = list(texts)

        def run():
            if not texts:
                raise ValueError("embed needs at least one text")
            if self.config.embedding == "hashed":
                return [hashed_embedding(t) for t in texts], 1
            return self._remote_embed(texts)

        summary = {"texts": texts, "embedding": self.config.embedding}
        return self._recorded("embed", purpose, summary, transcript, run, render=lambda vs: f"{len(vs)} vectors")

    # plumbing

    def _recorded(self, kind, purpose, summary, transcript, fn, render=None):
        start = time.perf_counter()
        attempts, response_text, error = 1, None, None
        try:
            result, attempts = fn()
            if render is not None:
                response_text = render(result)
            else:
                response_text = result.content
            return result
        except Exception as exc:
            attempts = getattr(exc, "attempts", attempts)
            error = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            if transcript is not None:
                transcript.append(
                    TranscriptEntry(
                        kind, purpose, self.config.kind, summary, response_text, error, attempts, time.perf_counter() - start
                    )
                )

    def _chat(self, request: ChatRequest, needs_image: bool) -> tuple[ChatResponse, int]:
        ref = request.image_ref()
        if needs_image and not ref:
            raise MissingImage("the request carries no image attachment")
        if self.config.kind == "mock":
            key = None
            if ref is not None:
                if not ref.startswith(SCENE_REF_PREFIX) and not Path(ref).is_file():
                    raise MissingImage(f"image not found: {ref}")
                key = _scene_key(ref)
            last = request.last_user()
            text = self.config.scenario.respond(last.content if last else "", key)
            usage = {"prompt_tokens": sum(len(m.content.split()) for m in request.messages), "completion_tokens": len(text.split())}
            return ChatResponse(text, "stop", usage), 1
        return self._remote_chat(request)

    def _remote_chat(self, request: ChatRequest) -> tuple[ChatResponse, int]:
        messages = []
        for m in request.messages:
            if m.image:
                url = _data_url(m.image, self._image_loader(m.image))
                content: Any = [{"type": "text", "text": m.content}, {"type": "image_url", "image_url": {"url": url}}]
            else:
                content = m.content
            messages.append({"role": m.role.value, "content": content})
        payload: dict[str, Any] = {
            "model": request.model or self.config.model,
            "messages": messages,
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        if request.seed is not None:
            payload["seed"] = request.seed
        data, attempts = self._post("/chat/completions", payload)
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("response has no choices[0].message.content") from None
        if not isinstance(content, str):
            raise MalformedResponse("choices[0].message.content is not text")
        usage = data.get("usage") if isinstance(data.get("usage"), dict) else {}
        return ChatResponse(content, str(choice.get("finish_reason") or "stop"), usage), attempts

    def _remote_embed(self, texts: list[str]) -> tuple[list[np.ndarray], int]:
        payload = {"model": self.config.embedding_model or self.config.model, "input": texts}
        data, attempts = self._post("/embeddings", payload)
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            vectors = [np.asarray(d["embedding"], dtype=float) for d in items]
        except (KeyError, TypeError, ValueError):
            raise MalformedResponse("response has no data[].embedding") from None
        if len(vectors) != len(texts):
            raise MalformedResponse(f"expected {len(texts)} embeddings, got {len(vectors)}")
        out = []
        for v in vectors:
            n = float(np.linalg.norm(v)) if v.ndim == 1 and v.size else 0.0
            if not math.isfinite(n) or n == 0:
                raise MalformedResponse("embedding vector is empty, zero or non-finite")
            out.append(v / n)
        return out, attempts

    def _post(self, path: str, payload: dict) -> tuple[Any, int]:
        assert self._http is not None
        attempts_allowed = self.config.retries + 1
        last: GatewayError | None = None
        for attempt in range(1, attempts_allowed + 1):
            try:
                resp = self._http.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"request timed out after {self.config.timeout}s: {exc}")
            except httpx.TransportError as exc:
                last = ConnectionFailed(str(exc))
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json(), attempt
                    except ValueError:
                        err = MalformedResponse("response body is not JSON")
                        err.attempts = attempt
                        raise err from None
                last = HttpError(resp.status_code, resp.text)
                if not (resp.status_code >= 500 or resp.status_code == 429):
                    last.attempts = attempt
                    raise last
            if attempt < attempts_allowed:
                delay = self.config.backoff * (2 ** (attempt - 1))
                log.info("transient failure on %s (%s); retry %d in %.2fs", path, last, attempt, delay)
                self._sleep(delay)
        last.attempts = attempts_allowed
        raise last


def chat(client: LlmClient, request: ChatRequest, **kw) -> ChatResponse:
    return client.chat(request, **kw)


def chat_with_image(client: LlmClient, request: ChatRequest, **kw) -> ChatResponse:
    return client.chat_with_image(request, **kw)


def embed(client: LlmClient, texts: Iterable[str], **kw) -> list[np.ndarray]:
    return client.embed(list(texts), **kw)
