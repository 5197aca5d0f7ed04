"""Backend interfaces and the call wrappers the engine goes through."""

from __future__ import annotations

import logging
import random
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol, TypeVar, runtime_checkable

from ..core import GeneratedImage, Prompt, prompt_digest
from ..errors import AttachmentLimitExceeded, BackendError, BadResponse
from ..templates import VlmMessage

log = logging.getLogger(__name__)

T = TypeVar("T")

BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2


@dataclass(frozen=True)
class VlmCapabilities:
    id: str
    supports_images: bool = True
    max_attachments: int = 3


@runtime_checkable
class VlmBackend(Protocol):
    capabilities: VlmCapabilities

    def chat(self, messages: Sequence[VlmMessage], temperature: float, call_tag: str) -> str: ...


@runtime_checkable
class T2IBackend(Protocol):
    id: str
    image_size: str

    def generate_one(self, prompt: Prompt, seed: int) -> bytes: ...


@runtime_checkable
class ScorerBackend(Protocol):
    id: str
    score_range: tuple[float, float]

    def score(self, a: bytes, b: bytes) -> float: ...


@dataclass
class CallLog:
    """Thread-safe record of backend calls, keyed by call tag."""

    entries: list[tuple[str, str, str]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, service: str, call_tag: str, outcome: str) -> None:
        with self._lock:
            self.entries.append((service, call_tag, outcome))

    def count(self, service: str, outcome: str = "ok") -> int:
        with self._lock:
            return sum(1 for s, _, o in self.entries if s == service and o == outcome)


def backoff_delay(attempt: int, rng: random.Random | None = None) -> float:
    """Delay before retry number ``attempt`` (0-based): 0.5 s * 2**attempt, +/-20%."""
    rng = rng or random
    return BACKOFF_BASE_S * BACKOFF_FACTOR**attempt * (1.0 + rng.uniform(-BACKOFF_JITTER, BACKOFF_JITTER))


def call_with_retries(
    fn: Callable[[], T],
    *,
    max_retries: int = 3,
    sleep: Callable[[float], None] = time.sleep,
    what: str = "backend call",
) -> T:
    attempt = 0
    while True:
        try:
            return fn()
        except BackendError as exc:
            if not exc.retryable or attempt >= max_retries:
                raise
            delay = backoff_delay(attempt)
            log.warning("%s failed (%s); retry %d/%d in %.2fs", what, exc, attempt + 1, max_retries, delay)
            sleep(delay)
            attempt += 1


def vlm_chat(
    backend: VlmBackend,
    messages: Sequence[VlmMessage],
    temperature: float,
    call_tag: str,
    *,
    max_retries: int = 3,
    call_log: CallLog | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    if not messages:
        raise ValueError("vlm_chat needs at least one message")
    n_images = sum(len(m.image_attachments) for m in messages)
    caps = backend.capabilities
    if n_images and not caps.supports_images:
        raise AttachmentLimitExceeded(f"{caps.id} does not accept images")
    if n_images > caps.max_attachments:
        raise AttachmentLimitExceeded(f"{n_images} images > {caps.id} limit of {caps.max_attachments}")
    try:
        text = call_with_retries(
            lambda: backend.chat(messages, temperature, call_tag),
            max_retries=max_retries,
            sleep=sleep,
            what=f"vlm {call_tag}",
        )
    except BackendError:
        if call_log is not None:
            call_log.record("vlm", call_tag, "error")
        raise
    if call_log is not None:
        call_log.record("vlm", call_tag, "ok")
    return text


def t2i_generate(
    backend: T2IBackend,
    prompt: Prompt,
    k: int,
    base_seed: int,
    *,
    max_retries: int = 3,
    call_log: CallLog | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[GeneratedImage]:
    """Generate ``k`` images; image ``i`` uses seed ``base_seed + i``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    digest = prompt_digest(prompt.text)
    images = []
    for i in range(k):
        seed = base_seed + i
        tag = f"{digest}/{seed}"
        data = call_with_retries(
            lambda: backend.generate_one(prompt, seed), max_retries=max_retries, sleep=sleep, what=f"t2i {tag}"
        )
        try:
            images.append(GeneratedImage(data, seed, digest))
        except ValueError as exc:
            raise BadResponse(f"t2i backend returned an invalid image: {exc}") from exc
        if call_log is not None:
            call_log.record("t2i", tag, "ok")
    return images


def score_pair(
    backend: ScorerBackend,
    a: bytes,
    b: bytes,
    *,
    max_retries: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> float:
    value = call_with_retries(lambda: backend.score(a, b), max_retries=max_retries, sleep=sleep, what="score")
    lo, hi = backend.score_range
    if not (lo <= value <= hi):
        raise BadResponse(f"score {value} outside {backend.id} range [{lo}, {hi}]")
    return float(value)


@dataclass
class Backends:
    vlm: VlmBackend
    t2i: T2IBackend
    scorer: ScorerBackend
    max_retries: int = 3
