"""Model backends: wire client for chat-completions endpoints, a scripted
player for tests and replays, and a digest-keyed response cache.

Wire format (HTTP POST to ``base_url + path``)::

    {"model": "<model_id>",
     "messages": [{"role": "user",
                   "content": [{"type": "text", "text": "..."},
                               {"type": "image_url", "image_url": {"url": "<http(s) URL or data: URI>"}}]}],
     "max_tokens": 2048,
     "temperature": 0.0,
     "repetition_penalty": 1.05}

Bearer token is read from the environment variable named by ``token_env``
(default ``OMNIEGO_API_KEY``). The reply's ``choices[0].message.content`` and
``choices[0].finish_reason`` are used, plus ``usage`` when present.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence, Union

import httpx

from ._util import canonical_json, sha256_text

log = logging.getLogger(__name__)

MAX_NEW_TOKENS_DEFAULT = 2048
MAX_NEW_TOKENS_CEILING = 32768
PENALTY_RANGE = (1.05, 1.1)
PENALTY_HARD_LIMITS = (1.0, 2.0)
DEFAULT_MAX_PIXELS = 360_000
# no value is given for the small-object budget; this is the common 1280 * 28 * 28 ceiling
DEFAULT_HIGH_RES_PIXELS = 1_003_520


# -- errors ---------------------------------------------------------------

class BackendError(Exception):
    retryable = False


class Transport(BackendError):
    retryable = True


class RateLimited(BackendError):
    retryable = True

    def __init__(self, message: str = "rate limited", retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedRequest(BackendError):
    pass


class Overflow(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class InvalidParams(ValueError):
    pass


class InvalidBudget(ValueError):
    pass


# -- generation parameters ------------------------------------------------

@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = MAX_NEW_TOKENS_DEFAULT
    repetition_penalty: float = PENALTY_RANGE[0]
    temperature: float = 0.0
    penalty_range: tuple[float, float] = PENALTY_RANGE


def default_generation_params(
    max_new_tokens: int | None = None,
    repetition_penalty: float | None = None,
    temperature: float = 0.0,
    *,
    force: bool = False,
) -> GenerationParams:
    """Recommended defaults (2048 new tokens, penalty in [1.05, 1.1]) with validated overrides.

    A penalty outside the admissible interval is rejected unless ``force`` is
    set; even then it must stay inside the hard limits [1.0, 2.0].
    """
    tokens = MAX_NEW_TOKENS_DEFAULT if max_new_tokens is None else max_new_tokens
    if not isinstance(tokens, int) or isinstance(tokens, bool) or not 1 <= tokens <= MAX_NEW_TOKENS_CEILING:
        raise InvalidParams(f"max_new_tokens must be in [1, {MAX_NEW_TOKENS_CEILING}], got {tokens!r}")
    penalty = PENALTY_RANGE[0] if repetition_penalty is None else float(repetition_penalty)
    lo, hi = PENALTY_RANGE
    if not lo <= penalty <= hi:
        if not force:
            raise InvalidParams(f"repetition_penalty {penalty} outside admissible [{lo}, {hi}]")
        if not PENALTY_HARD_LIMITS[0] <= penalty <= PENALTY_HARD_LIMITS[1]:
            raise InvalidParams(f"repetition_penalty {penalty} outside hard limits {PENALTY_HARD_LIMITS}")
    if temperature < 0:
        raise InvalidParams("temperature must be non-negative")
    return GenerationParams(tokens, penalty, float(temperature))


# -- visual budget --------------------------------------------------------

@dataclass(frozen=True)
class VisualBudget:
    max_pixels: int = DEFAULT_MAX_PIXELS
    high_res_pixels: int = DEFAULT_HIGH_RES_PIXELS

    def __post_init__(self):
        if self.high_res_pixels < self.max_pixels:
            raise InvalidBudget("high_res_pixels must be >= max_pixels")


def _floor_even(x: int) -> int:
    return x - (x % 2)


def apply_visual_budget(width: int, height: int, budget: VisualBudget | int, high_res: bool = False) -> tuple[int, int]:
    """Downscale ``width x height`` so the area fits the pixel budget.

    Under-budget inputs come back unchanged. Otherwise both sides are scaled by
    ``sqrt(budget / area)`` and snapped to even integers with the area kept at
    or under the budget; the output never exceeds the input on either side.
    """
    limit = budget if isinstance(budget, int) else (budget.high_res_pixels if high_res else budget.max_pixels)
    if limit < 1:
        raise InvalidBudget(f"pixel budget must be >= 1, got {limit}")
    if width < 1 or height < 1:
        raise ValueError("width and height must be positive")
    if width * height <= limit:
        return width, height
    # exact side lengths: w*s = sqrt(w*B/h), h*s = sqrt(h*B/w); isqrt keeps it integral
    tw_floor = _floor_even(math.isqrt(width * limit // height))
    th_floor = _floor_even(math.isqrt(height * limit // width))
    aspect = width / height
    best = None
    for tw in (tw_floor, tw_floor + 2):
        for th in (th_floor, th_floor + 2):
            if not (1 <= tw <= width and 1 <= th <= height) or tw * th > limit:
                continue
            key = (abs(tw / th - aspect) / aspect, -(tw * th))
            if best is None or key < best[0]:
                best = (key, tw, th)
    if best is None:
        # degenerate aspect: one side would round to zero; keep it minimal and fill the rest
        if width >= height:
            th = min(height, 2, limit)
            tw = min(width, max(1, limit // th))
        else:
            tw = min(width, 2, limit)
            th = min(height, max(1, limit // tw))
        return tw, th
    return best[1], best[2]


# -- request / response ---------------------------------------------------

@dataclass(frozen=True)
class TextPart:
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"type": "text", "text": self.text}


@dataclass(frozen=True)
class ImagePart:
    uri: str
    width: int | None = None  # target size after budget application
    height: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"type": "image", "uri": self.uri, "width": self.width, "height": self.height}


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    parts: tuple[Part, ...]
    max_new_tokens: int = MAX_NEW_TOKENS_DEFAULT
    repetition_penalty: float = PENALTY_RANGE[0]
    temperature: float = 0.0

    def __post_init__(self):
        if not 1 <= self.max_new_tokens <= MAX_NEW_TOKENS_CEILING:
            raise InvalidParams(f"max_new_tokens {self.max_new_tokens} exceeds ceiling {MAX_NEW_TOKENS_CEILING}")
        if not PENALTY_HARD_LIMITS[0] <= self.repetition_penalty <= PENALTY_HARD_LIMITS[1]:
            raise InvalidParams(f"repetition_penalty {self.repetition_penalty} outside {PENALTY_HARD_LIMITS}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "parts": [p.to_dict() for p in self.parts],
            "max_new_tokens": self.max_new_tokens,
            "repetition_penalty": self.repetition_penalty,
            "temperature": self.temperature,
        }

    @property
    def digest(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))

    def rendered_text(self) -> str:
        """Flat text view of the request: text parts verbatim, images as placeholders."""
        return render_parts(self.parts)


def render_parts(parts: Sequence[Part]) -> str:
    out = []
    for p in parts:
        if isinstance(p, TextPart):
            out.append(p.text)
        else:
            out.append(f"<image {p.uri}>\n")
    return "".join(out)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"  # stop | length | error
    usage: Mapping[str, int] = field(default_factory=dict)
    latency_ms: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason,
            "usage": dict(self.usage),
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChatResponse":
        return cls(d["text"], d.get("finish_reason", "stop"), dict(d.get("usage") or {}), d.get("latency_ms", 0.0))


class Backend(Protocol):
    model_id: str

    def complete(self, req: ChatRequest) -> ChatResponse: ...


def complete(backend: Backend, req: ChatRequest) -> ChatResponse:
    return backend.complete(req)


# -- scripted player ------------------------------------------------------

ScriptEntry = Union[str, ChatResponse, BaseException, Mapping[str, Any]]


def _entry_to_response(entry: ScriptEntry) -> ChatResponse:
    if isinstance(entry, BaseException):
        raise entry
    if isinstance(entry, ChatResponse):
        return entry
    if isinstance(entry, str):
        return ChatResponse(entry)
    return ChatResponse.from_dict(entry)


class ScriptedBackend:
    """Deterministic stand-in for a model.

    ``script`` may be a list (replies consumed in order), a dict keyed by
    request digest, or a callable ``request -> reply``. A reply is a string,
    a :class:`ChatResponse`, a mapping, or an exception instance to raise.
    """

    def __init__(
        self,
        script: Sequence[ScriptEntry] | Mapping[str, ScriptEntry] | Callable[[ChatRequest], ScriptEntry],
        *,
        model_id: str = "scripted",
        default: ScriptEntry | None = None,
    ):
        self.model_id = model_id
        self._lock = threading.Lock()
        self._ordered = None
        self._keyed = None
        self._fn = None
        if callable(script):
            self._fn = script
        elif isinstance(script, Mapping):
            self._keyed = dict(script)
        else:
            self._ordered = list(script)
        self._pos = 0
        self._default = default
        self.calls = 0
        self.requests: list[ChatRequest] = []

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
            self.requests.append(req)
            if self._fn is not None:
                entry = self._fn(req)
            elif self._keyed is not None:
                entry = self._keyed.get(req.digest, self._default)
                if entry is None:
                    raise ScriptExhausted(f"no scripted reply for digest {req.digest[:12]}")
            else:
                if self._pos >= len(self._ordered):
                    if self._default is None:
                        raise ScriptExhausted("ordered script exhausted")
                    entry = self._default
                else:
                    entry = self._ordered[self._pos]
                    self._pos += 1
        return _entry_to_response(entry)

    @classmethod
    def from_file(cls, path: str | Path, model_id: str = "scripted") -> "ScriptedBackend":
        """Load a script file.

        Accepted shapes: a bare list or ``{"replies": [...]}`` (ordered),
        ``{"by_digest": {...}}``, or ``{"rules": [{"pattern": regex, "reply": ...}]}``
        where the first pattern found in the request's rendered text picks the reply.
        All but the bare list may carry a ``"default"`` reply.
        """
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, list):
            return cls(doc, model_id=model_id)
        default = doc.get("default")
        if "by_digest" in doc:
            return cls(doc["by_digest"], model_id=model_id, default=default)
        if "rules" in doc:
            rules = [(re.compile(r["pattern"]), r["reply"]) for r in doc["rules"]]

            def reply(req: ChatRequest) -> ScriptEntry:
                text = req.rendered_text()
                for rx, entry in rules:
                    if rx.search(text):
                        return entry
                if default is None:
                    raise ScriptExhausted("no scripted rule matched")
                return default

            return cls(reply, model_id=model_id)
        return cls(doc.get("replies", []), model_id=model_id, default=default)


# -- cache ----------------------------------------------------------------

class CachingBackend:
    """Serves repeated requests from memory and, optionally, a cache directory.

    Entries live at ``<cache_dir>/<digest[:2]>/<digest>.json``. Errors are
    never cached.
    """

    def __init__(self, inner: Backend, cache_dir: str | Path | None = None):
        self.inner = inner
        self.model_id = inner.model_id
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._mem: dict[str, ChatResponse] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, digest: str) -> Path:
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def lookup(self, digest: str) -> ChatResponse | None:
        with self._lock:
            if digest in self._mem:
                return self._mem[digest]
        if self.cache_dir is not None:
            p = self._path(digest)
            if p.exists():
                resp = ChatResponse.from_dict(json.loads(p.read_text(encoding="utf-8")))
                with self._lock:
                    self._mem[digest] = resp
                return resp
        return None

    def complete(self, req: ChatRequest) -> ChatResponse:
        digest = req.digest
        cached = self.lookup(digest)
        if cached is not None:
            with self._lock:
                self.hits += 1
            return cached
        resp = self.inner.complete(req)
        with self._lock:
            self.misses += 1
        if resp.finish_reason != "error":
            with self._lock:
                self._mem[digest] = resp
            if self.cache_dir is not None:
                p = self._path(digest)
                p.parent.mkdir(parents=True, exist_ok=True)
                tmp = p.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
                tmp.write_text(json.dumps(resp.to_dict(), sort_keys=True), encoding="utf-8")
                os.replace(tmp, p)
        return resp


# -- remote client --------------------------------------------------------

def _image_url(part: ImagePart) -> str:
    uri = part.uri
    if uri.startswith(("http://", "https://", "data:")):
        return uri
    path = Path(uri)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise MalformedRequest(f"cannot read image {uri}: {exc}") from exc
    mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
    if part.width and part.height:
        from PIL import Image

        with Image.open(io.BytesIO(data)) as img:
            if img.size != (part.width, part.height):
                fmt = "PNG" if mime == "image/png" else "JPEG"
                resized = img.convert("RGB").resize((part.width, part.height), Image.BILINEAR)
                buf = io.BytesIO()
                resized.save(buf, format=fmt)
                data = buf.getvalue()
                mime = "image/png" if fmt == "PNG" else "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def build_payload(req: ChatRequest) -> dict[str, Any]:
    content = []
    for p in req.parts:
        if isinstance(p, TextPart):
            content.append({"type": "text", "text": p.text})
        else:
            content.append({"type": "image_url", "image_url": {"url": _image_url(p)}})
    return {
        "model": req.model_id,
        "messages": [{"role": "user", "content": content}],
        "max_tokens": req.max_new_tokens,
        "temperature": req.temperature,
        "repetition_penalty": req.repetition_penalty,
    }


class RemoteBackend:
    def __init__(
        self,
        base_url: str,
        model_id: str,
        *,
        path: str = "/v1/chat/completions",
        token_env: str = "OMNIEGO_API_KEY",
        timeout: float = 120.0,
        max_in_flight: int = 4,
        overflow_is_error: bool = False,
        client: httpx.Client | None = None,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.url = base_url.rstrip("/") + "/" + path.lstrip("/")
        self.model_id = model_id
        self.token_env = token_env
        self.overflow_is_error = overflow_is_error
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self.calls = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, req: ChatRequest) -> ChatResponse:
        payload = build_payload(req)
        with self._lock:
            self.calls += 1
        start = time.perf_counter()
        with self._slots:
            try:
                resp = self._client.post(self.url, json=payload, headers=self._headers())
            except httpx.TransportError as exc:
                raise Transport(f"{type(exc).__name__}: {exc}") from exc
        latency = (time.perf_counter() - start) * 1000.0

        if resp.status_code == 429:
            raise RateLimited(f"HTTP 429 from {self.url}", _retry_after(resp.headers.get("retry-after")))
        if resp.status_code in (400, 404, 413, 422):
            raise MalformedRequest(f"HTTP {resp.status_code}: {resp.text[:500]}")
        if resp.status_code >= 400:
            raise Transport(f"HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
            raise Transport(f"unexpected response body: {resp.text[:500]}") from exc
        if isinstance(text, list):
            text = "".join(c.get("text", "") for c in text if isinstance(c, dict))
        finish = choice.get("finish_reason") or "stop"
        if finish not in ("stop", "length"):
            finish = "stop" if finish in ("eos", "end_turn") else "error"
        if finish == "length" and (self.overflow_is_error or not text):
            raise Overflow("response truncated at max_new_tokens")
        usage = {k: int(v) for k, v in (body.get("usage") or {}).items() if isinstance(v, int)}
        return ChatResponse(text, finish, usage, latency)

    def close(self) -> None:
        self._client.close()


def _retry_after(value: str | None) -> float | None:
    if not value:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None
