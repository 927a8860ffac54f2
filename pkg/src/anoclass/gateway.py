"""Multimodal chat-completions gateway with deterministic response caching.

Requests go over an OpenAI-compatible wire format (one user message holding a
text part plus ordered image parts as base64 PNG data URIs) or to an
in-process mock with the same interface. Responses are cached on disk keyed
by a cryptographic hash of (model, temperature, prompt text, ordered
post-resize image bytes), so replays never touch the network.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import requests
from PIL import Image

from .errors import ConfigError, GatewayError
from .metrics import UNPARSED
from .prompting import ClassificationRequest

TARGET_RESOLUTION = 448


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "openai"  # "openai" or "echo"
    endpoint: str = ""
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 64
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    retry_delays: tuple[float, ...] = (1.0, 4.0, 16.0)
    parallelism: int = 1

    def __post_init__(self):
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.max_retries < 1:
            raise ConfigError(f"max_retries must be >= 1, got {self.max_retries}")


def load_backend_config(path: str | Path) -> BackendConfig:
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    try:
        if "retry_delays" in data:
            data["retry_delays"] = tuple(data["retry_delays"])
        return BackendConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid backend config {path}: {exc}") from exc


@dataclass(frozen=True)
class Prediction:
    sample_id: str | None
    predicted_class: str
    raw_text: str
    cached: bool
    latency_ms: float
    cache_key: str | None = None


def resize_and_encode(image: np.ndarray, size: int = TARGET_RESOLUTION) -> bytes:
    """Bilinear resize to ``size`` x ``size`` and return PNG bytes. An input
    already at the target resolution passes through pixel-identically."""
    arr = np.asarray(image, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("image has a zero dimension")
    pil = Image.fromarray(arr, mode="RGB")
    if pil.size != (size, size):
        pil = pil.resize((size, size), Image.BILINEAR)
    buffer = io.BytesIO()
    # fixed low compression level: byte-deterministic and much faster to encode
    pil.save(buffer, format="PNG", compress_level=1)
    return buffer.getvalue()


def png_data_uri(png_bytes: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes).decode("ascii")


def request_digest(
    model: str, temperature: float, text_prompt: str, image_bytes: list[bytes]
) -> str:
    digest = hashlib.sha256()
    digest.update(model.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(repr(float(temperature)).encode("ascii"))
    digest.update(b"\x00")
    digest.update(text_prompt.encode("utf-8"))
    for blob in image_bytes:
        digest.update(b"\x00" + len(blob).to_bytes(8, "little"))
        digest.update(blob)
    return digest.hexdigest()


class ResponseCache:
    """Directory-backed response store with atomic writes and per-key locks."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise GatewayError(f"corrupt cache entry {path}: {exc}") from exc

    def put(self, key: str, record: dict) -> None:
        path = self._path(key)
        tmp = path.with_name(f".{key}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    @contextmanager
    def lock(self, key: str):
        with self._locks_guard:
            key_lock = self._locks[key]
        with key_lock:
            yield


class HttpBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(self, config: BackendConfig, session: requests.Session | None = None):
        if not config.endpoint:
            raise ConfigError("backend config has no endpoint URL")
        self.config = config
        self.session = session or requests.Session()

    def complete(self, body: dict) -> str:
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        response = self.session.post(
            url, json=body, headers=headers, timeout=self.config.timeout
        )
        if response.status_code != 200:
            raise GatewayError(
                f"backend returned HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise GatewayError(f"malformed backend response: {exc}") from exc


class MockBackend:
    """Deterministic in-process backend; the responder maps a wire body to text."""

    def __init__(self, responder: Callable[[dict], str]):
        self.responder = responder
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, body: dict) -> str:
        with self._lock:
            self.calls += 1
        return self.responder(body)


def build_wire_body(
    request: ClassificationRequest, config: BackendConfig, image_bytes: list[bytes]
) -> dict:
    content: list[dict] = [{"type": "text", "text": request.text_prompt}]
    for blob in image_bytes:
        content.append(
            {"type": "image_url", "image_url": {"url": png_data_uri(blob)}}
        )
    return {
        "model": config.model,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
        "messages": [{"role": "user", "content": content}],
    }


def classify(
    request: ClassificationRequest,
    backend,
    config: BackendConfig,
    cache: ResponseCache | None = None,
    sample_id: str | None = None,
    sleep=time.sleep,
) -> Prediction:
    """Send one classification request, consulting and filling the cache."""
    started = time.perf_counter()
    image_bytes = [resize_and_encode(img) for _, img in request.images]
    key = request_digest(config.model, config.temperature, request.text_prompt, image_bytes)

    def finish(raw_text: str, cached: bool) -> Prediction:
        return Prediction(
            sample_id=sample_id,
            predicted_class=parse_class_label(raw_text, request.class_names),
            raw_text=raw_text,
            cached=cached,
            latency_ms=(time.perf_counter() - started) * 1000.0,
            cache_key=key,
        )

    def call_backend() -> str:
        body = build_wire_body(request, config, image_bytes)
        last_error: Exception | None = None
        for attempt in range(config.max_retries):
            try:
                return backend.complete(body)
            except GatewayError as exc:
                last_error = exc
            except requests.RequestException as exc:
                last_error = exc
            if attempt + 1 < config.max_retries:
                delays = config.retry_delays
                sleep(delays[min(attempt, len(delays) - 1)] if delays else 0.0)
        raise GatewayError(
            f"backend call failed after {config.max_retries} attempts: {last_error}",
            sample_id=sample_id,
        )

    if cache is None:
        return finish(call_backend(), cached=False)

    with cache.lock(key):
        stored = cache.get(key)
        if stored is not None:
            return finish(stored["raw_text"], cached=True)
        raw_text = call_backend()
        cache.put(
            key,
            {
                "request_digest": key,
                "raw_text": raw_text,
                "model": config.model,
                "timestamp": time.time(),
            },
        )
        return finish(raw_text, cached=False)


_NORMALIZE_RE = re.compile(r"[^a-z0-9]+")


def _normalize(text: str) -> str:
    return _NORMALIZE_RE.sub("_", text.lower()).strip("_")


def parse_class_label(raw_text: str, class_names) -> str:
    """Map free-form model output to a canonical class name.

    Cascade: exact normalized equality; otherwise substring matches of
    normalized class names in the normalized text, longest match winning and
    ties broken by class-list order; otherwise the reserved ``Unparsed``.
    """
    class_names = tuple(class_names)
    if not class_names:
        raise ValueError("class_names must be non-empty")
    text = _normalize(raw_text)
    pairs = [(name, _normalize(name)) for name in class_names]
    for name, normalized in pairs:
        if normalized == text:
            return name
    matches = [(name, normalized) for name, normalized in pairs if normalized and normalized in text]
    if not matches:
        return UNPARSED
    best_length = max(len(normalized) for _, normalized in matches)
    for name, normalized in matches:
        if len(normalized) == best_length:
            return name
    return UNPARSED  # pragma: no cover
