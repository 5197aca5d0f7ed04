"""HTTP clients for hosted VLM, text-to-image and scorer services.

Wire formats:

* VLM: OpenAI-compatible ``POST {url}/chat/completions``; images travel as
  base64 ``data:`` URLs inside ``image_url`` content parts.
* T2I: ``POST {url}/images/generations`` with ``prompt``, ``n``, ``size`` and
  ``seed``; the response carries ``data[0].b64_json``.
* Scorer: ``POST {url}`` with ``{"image_a": b64, "image_b": b64, "metric": id}``
  returning ``{"score": float}``.
"""

from __future__ import annotations

import base64
import threading
from collections.abc import Sequence
from typing import Any

import httpx

from ..core import Prompt, image_format
from ..errors import BadResponse, GenerationRefused, RateLimited, Transport
from ..templates import Role, VlmMessage
from .base import VlmCapabilities

_REFUSAL_CODES = {"content_policy_violation", "generation_refused", "safety"}


def data_url(image: bytes) -> str:
    mime = "image/png" if image_format(image) == "PNG" else "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(image).decode('ascii')}"


def _b64(image: bytes) -> str:
    return base64.b64encode(image).decode("ascii")


class _JsonClient:
    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        timeout_s: float = 120.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(headers=headers, timeout=timeout_s, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def post(self, url: str, body: dict[str, Any]) -> dict[str, Any]:
        with self._slots:
            try:
                resp = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                raise Transport(f"{url}: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimited(f"{url}: rate limited")
        if resp.status_code >= 500:
            raise Transport(f"{url}: server error {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise BadResponse(f"{url}: response is not JSON") from exc
        if resp.status_code >= 400:
            err = payload.get("error") if isinstance(payload, dict) else None
            code = err.get("code") or err.get("type") if isinstance(err, dict) else None
            if code in _REFUSAL_CODES:
                raise GenerationRefused(f"{url}: {code}")
            raise BadResponse(f"{url}: HTTP {resp.status_code}: {err or payload}")
        if not isinstance(payload, dict):
            raise BadResponse(f"{url}: expected a JSON object")
        return payload

    def close(self) -> None:
        self._client.close()


class HttpVlm(_JsonClient):
    def __init__(self, base_url: str, api_key: str | None = None, model: str = "default", **kw: Any) -> None:
        super().__init__(base_url, api_key, **kw)
        self.model = model
        self.capabilities = VlmCapabilities(id=f"http-vlm:{model}", supports_images=True, max_attachments=3)

    @staticmethod
    def encode_messages(messages: Sequence[VlmMessage]) -> list[dict[str, Any]]:
        out = []
        for m in messages:
            if m.role is Role.SYSTEM or not m.image_attachments:
                out.append({"role": m.role.value, "content": m.text})
                continue
            parts: list[dict[str, Any]] = [{"type": "text", "text": m.text}]
            parts += [{"type": "image_url", "image_url": {"url": data_url(img)}} for img in m.image_attachments]
            out.append({"role": m.role.value, "content": parts})
        return out

    def chat(self, messages: Sequence[VlmMessage], temperature: float, call_tag: str) -> str:
        body = {
            "model": self.model,
            "messages": self.encode_messages(messages),
            "temperature": temperature,
            "stream": False,
            "user": call_tag,
        }
        payload = self.post(f"{self.base_url}/chat/completions", body)
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BadResponse("chat completion without choices[0].message.content") from exc
        if not isinstance(content, str):
            raise BadResponse("chat completion content is not a string")
        return content


class HttpT2I(_JsonClient):
    def __init__(
        self, base_url: str, api_key: str | None = None, model: str = "default", image_size: str = "512x512", **kw: Any
    ) -> None:
        super().__init__(base_url, api_key, **kw)
        self.model = model
        self.id = f"http-t2i:{model}"
        self.image_size = image_size

    def generate_one(self, prompt: Prompt, seed: int) -> bytes:
        body = {
            "model": self.model,
            "prompt": prompt.text,
            "n": 1,
            "size": self.image_size,
            "seed": seed,
            "response_format": "b64_json",
        }
        payload = self.post(f"{self.base_url}/images/generations", body)
        try:
            return base64.b64decode(payload["data"][0]["b64_json"], validate=True)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BadResponse("image response without data[0].b64_json") from exc


class HttpScorer(_JsonClient):
    def __init__(self, url: str, metric: str, score_range: tuple[float, float] = (-1.0, 1.0), **kw: Any) -> None:
        super().__init__(url, None, **kw)
        self.id = metric
        self.score_range = score_range

    def score(self, a: bytes, b: bytes) -> float:
        payload = self.post(self.base_url, {"image_a": _b64(a), "image_b": _b64(b), "metric": self.id})
        value = payload.get("score")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadResponse("scorer response without a numeric 'score'")
        return float(value)
