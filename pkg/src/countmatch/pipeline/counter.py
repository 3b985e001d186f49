"""Client for a chat-completions style counting endpoint, response parsing
and an offline replay counter backed by audit records."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol, Union
from urllib.parse import quote

from ..core.coco import read_json, write_json
from ..core.types import CountPrediction
from ..errors import CounterError, CountValueError, FormatError, InputError, ParseError

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class CounterClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "gpt-4o"
    temperature: float = 0.01
    top_p: float = 1.0
    timeout: float = 60.0
    max_retries: int = 3
    api_key_env: Optional[str] = "OPENAI_API_KEY"
    backoff: float = 0.5
    max_concurrent: int = 4

    def __post_init__(self) -> None:
        if self.max_retries < 1:
            raise InputError(f"max_retries must be at least 1, got {self.max_retries}")
        if self.max_concurrent < 1:
            raise InputError(f"max_concurrent must be at least 1, got {self.max_concurrent}")

    def metadata(self) -> dict[str, Any]:
        """Request settings safe to persist (the credential itself never is)."""
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "temperature": self.temperature,
            "top_p": self.top_p,
        }


@dataclass
class CounterReply:
    text: str
    usage: dict[str, Optional[int]] = field(default_factory=lambda: {"prompt_tokens": None, "completion_tokens": None})
    latency_ms: float = 0.0
    request: dict[str, Any] = field(default_factory=dict)


class Counter(Protocol):
    def complete(self, image_id: str, prompt: str, image: Union[str, Path, None]) -> CounterReply: ...


def audit_path(audit_dir: Union[str, Path], image_id: str) -> Path:
    return Path(audit_dir) / f"{quote(str(image_id), safe='')}.json"


def encode_image(image: Union[str, Path, bytes], mime: Optional[str] = None) -> tuple[str, str]:
    """Return ``(data_url, sha256)`` for an image file or raw bytes."""
    if isinstance(image, (str, Path)):
        path = Path(image)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise InputError(f"image not found: {path}") from None
        mime = mime or mimetypes.guess_type(path.name)[0]
    else:
        data = bytes(image)
    mime = mime or "image/png"
    digest = hashlib.sha256(data).hexdigest()
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}", digest


class HttpCounter:
    """Sends one image plus prompt per request and returns the reply text.

    Transport errors and 5xx responses are retried with exponential
    backoff; 4xx responses fail immediately.
    """

    def __init__(self, config: CounterClientConfig, client=None):
        import httpx

        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_concurrent)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        env = self.config.api_key_env
        if env:
            key = os.environ.get(env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
            else:
                log.debug("environment variable %s is unset; sending no credential", env)
        return headers

    def complete(self, image_id: str, prompt: str, image: Union[str, Path, bytes, None]) -> CounterReply:
        import httpx

        cfg = self.config
        if image is None:
            raise InputError(f"no image given for {image_id}")
        data_url, digest = encode_image(image)
        body = {
            "model": cfg.model,
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ],
        }
        request = dict(cfg.metadata(), image_sha256=digest)
        if isinstance(image, (str, Path)):
            request["image"] = Path(image).name
        last: Optional[str] = None
        with self._slots:
            for attempt in range(cfg.max_retries):
                if attempt:
                    time.sleep(cfg.backoff * 2 ** (attempt - 1))
                start = time.perf_counter()
                try:
                    resp = self._client.post(cfg.endpoint, json=body, headers=self._headers())
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    log.warning("counter %s attempt %d failed: %s", cfg.endpoint, attempt + 1, last)
                    if isinstance(exc, httpx.UnsupportedProtocol):
                        break
                    continue
                except httpx.InvalidURL as exc:
                    raise CounterError(f"invalid counter endpoint {cfg.endpoint}: {exc}") from None
                latency = (time.perf_counter() - start) * 1000.0
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    log.warning("counter %s attempt %d returned %s", cfg.endpoint, attempt + 1, last)
                    continue
                if resp.status_code >= 400:
                    raise CounterError(f"counter endpoint {cfg.endpoint} rejected the request: HTTP {resp.status_code}")
                text, usage = _read_completion(resp, cfg.endpoint)
                request["attempts"] = attempt + 1
                return CounterReply(text=text, usage=usage, latency_ms=latency, request=request)
        raise CounterError(f"counter endpoint {cfg.endpoint} failed after {cfg.max_retries} attempts ({last})")


def _read_completion(resp, endpoint: str) -> tuple[str, dict[str, Optional[int]]]:
    try:
        payload = resp.json()
        content = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise CounterError(f"counter endpoint {endpoint} returned an unexpected payload") from None
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    usage = payload.get("usage") or {}
    return str(content), {
        "prompt_tokens": usage.get("prompt_tokens"),
        "completion_tokens": usage.get("completion_tokens"),
    }


class ReplayCounter:
    """Serves replies from previously written audit records; never touches the network."""

    def __init__(self, audit_dir: Union[str, Path]):
        self.audit_dir = Path(audit_dir)
        if not self.audit_dir.is_dir():
            raise InputError(f"replay directory not found: {self.audit_dir}")

    def record(self, image_id: str) -> dict[str, Any]:
        path = audit_path(self.audit_dir, image_id)
        rec = read_json(path)
        if not isinstance(rec, dict) or "raw_response" not in rec:
            raise FormatError(f"{path}: audit record lacks raw_response")
        return rec

    def complete(self, image_id: str, prompt: str, image=None) -> CounterReply:
        rec = self.record(image_id)
        usage = rec.get("usage") or {}
        return CounterReply(
            text=str(rec["raw_response"]),
            usage={"prompt_tokens": usage.get("prompt_tokens"), "completion_tokens": usage.get("completion_tokens")},
            latency_ms=float(rec.get("latency_ms") or 0.0),
            request=dict(rec.get("request") or {}),
        )


def _first_object(text: str) -> Optional[dict]:
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def parse_count_response(text: str) -> dict[str, int]:
    """Extract ``{category: count}`` from a model reply.

    Code fences and surrounding prose are ignored and the first JSON object
    is used. Keys are trimmed and lowercased. Zero counts are kept; use
    :meth:`CountPrediction.positive` for matcher input.
    """
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    obj = None
    for chunk in candidates:
        obj = _first_object(chunk)
        if obj is not None:
            break
    if obj is None:
        raise ParseError("no JSON object found in counter response", raw_text=text)
    counts: dict[str, int] = {}
    for raw_key, value in obj.items():
        key = str(raw_key).strip().lower()
        if not key:
            raise ParseError("empty category name in counter response", raw_text=text)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CountValueError(key, value, raw_text=text)
        if isinstance(value, float) and not value.is_integer():
            raise CountValueError(key, value, raw_text=text)
        if value < 0:
            raise CountValueError(key, value, raw_text=text)
        if key in counts:
            raise ParseError(f"category {key!r} appears more than once", raw_text=text)
        counts[key] = int(value)
    return counts


def count_objects(
    client: Counter,
    image_id: str,
    image: Union[str, Path, None],
    prompt: str,
    audit_dir: Union[str, Path, None] = None,
) -> tuple[CountPrediction, CounterReply]:
    """Query the counter for one image; the audit record is written even when parsing fails."""
    reply = client.complete(image_id, prompt, image)
    record: dict[str, Any] = {
        "image_id": image_id,
        "prompt": prompt,
        "raw_response": reply.text,
        "parsed": None,
        "usage": reply.usage,
        "latency_ms": reply.latency_ms,
        "request": reply.request,
    }
    try:
        parsed = parse_count_response(reply.text)
        record["parsed"] = parsed
    except ParseError as exc:
        record["error"] = str(exc)
        raise
    finally:
        if audit_dir is not None:
            write_json(audit_path(audit_dir, image_id), record)
    return CountPrediction(image_id, parsed), reply
