"""Shared plumbing for external model clients: rate limiting, retries, HTTP chat calls."""

from __future__ import annotations

import base64
import io
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


class TransportError(RuntimeError):
    """A request failed for reasons unrelated to the content (network, HTTP status, timeout)."""


class RateLimiter:
    """Token bucket allowing ``per_minute`` requests per minute with a burst of ``burst``."""

    def __init__(
        self,
        per_minute: float = 20.0,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if per_minute <= 0:
            raise ValueError("per_minute must be positive")
        self.rate = per_minute / 60.0
        self.capacity = float(max(burst, 1))
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a token is available; return the time waited."""
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return waited
                delay = (1.0 - self._tokens) / self.rate
            self._sleep(delay)
            waited += delay


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    backoff: float = 1.0
    factor: float = 2.0
    max_total: float = 120.0

    def delays(self) -> list[float]:
        """Sleeps between attempts, truncated so their sum stays within ``max_total``."""
        out, total = [], 0.0
        for i in range(self.max_attempts - 1):
            d = self.backoff * self.factor**i
            if total + d > self.max_total:
                break
            out.append(d)
            total += d
        return out


def with_retries(
    fn: Callable[[], T],
    policy: RetryPolicy,
    limiter: RateLimiter | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Call ``fn`` until it stops raising TransportError or the policy is exhausted."""
    delays = policy.delays()
    for attempt in range(len(delays) + 1):
        if limiter is not None:
            limiter.acquire()
        try:
            return fn()
        except TransportError:
            if attempt == len(delays):
                raise
            sleep(delays[attempt])
    raise AssertionError("unreachable")


def encode_png(image: np.ndarray) -> str:
    from PIL import Image

    arr = (np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


class ChatClient:
    """Minimal client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Credentials and endpoint come from ``TACTALIGN_API_KEY``,
    ``TACTALIGN_API_BASE`` and ``TACTALIGN_MODEL`` unless given explicitly.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        transport=None,
    ):
        import httpx

        self.base_url = (base_url or os.environ.get("TACTALIGN_API_BASE") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key or os.environ.get("TACTALIGN_API_KEY")
        self.model = model or os.environ.get("TACTALIGN_MODEL") or "gpt-4o"
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, prompt: str, images: Sequence[np.ndarray] = (), max_tokens: int = 300) -> str:
        import httpx

        content: list[dict] = [{"type": "text", "text": prompt}]
        for image in images:
            content.append({"type": "image_url", "image_url": {"url": encode_png(image)}})
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": max_tokens,
            "temperature": 0,
        }
        try:
            resp = self._http.post(f"{self.base_url}/chat/completions", json=body)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"malformed response: {exc}") from exc
