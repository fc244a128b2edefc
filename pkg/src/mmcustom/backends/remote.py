"""Thin HTTP adapters for hosted captioning, language-model and embedding services.

Each adapter is configured by an endpoint URL, a model id and the name of an
environment variable holding a bearer token. Transport failures and 5xx/429
responses are retried three times with jittered exponential backoff before
surfacing as ``BackendUnavailable``.
"""

from __future__ import annotations

import base64
import io
import os

import httpx
import numpy as np
from PIL import Image
from tenacity import RetryError, retry, retry_if_exception, stop_after_attempt, wait_random_exponential

from ..errors import BackendUnavailable
from ..evalkit import EmbeddingVector, Space
from ..images import tensor_to_pil

RETRIES = 3


def _retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code == 429 or exc.response.status_code >= 500
    return False


class _RemoteClient:
    def __init__(
        self,
        endpoint: str,
        model_id: str,
        *,
        auth_env: str | None = None,
        timeout: float = 60.0,
        max_wait: float = 8.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model_id = model_id
        headers = {}
        if auth_env:
            token = os.environ.get(auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._post = retry(
            retry=retry_if_exception(_retryable),
            stop=stop_after_attempt(RETRIES + 1),
            wait=wait_random_exponential(multiplier=0.5, max=max_wait),
        )(self._post_once)

    @property
    def backend_id(self) -> str:
        return f"{type(self).__name__.lower()}:{self.model_id}"

    def _post_once(self, payload: dict) -> dict:
        response = self._client.post(self.endpoint, json=payload)
        response.raise_for_status()
        return response.json()

    def post(self, payload: dict) -> dict:
        try:
            return self._post(payload)
        except RetryError as exc:
            raise BackendUnavailable(f"{self.endpoint}: retries exhausted") from exc
        except (httpx.HTTPError, ValueError) as exc:
            raise BackendUnavailable(f"{self.endpoint}: {exc}") from exc


def _png_b64(image: Image.Image) -> str:
    buf = io.BytesIO()
    image.convert("RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RemoteLLM(_RemoteClient):
    """Chat-completions style endpoint (``choices[0].message.content``)."""

    concurrency_safe = True

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        data = self.post(
            {
                "model": self.model_id,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": temperature,
                "seed": seed,
            }
        )
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"unexpected completion payload: {data!r}") from exc


class RemoteCaptioner(_RemoteClient):
    """POST ``{"model", "image"}`` (base64 PNG), expects ``{"caption": str}``."""

    def caption(self, image: Image.Image) -> str:
        data = self.post({"model": self.model_id, "image": _png_b64(image)})
        caption = data.get("caption") if isinstance(data, dict) else None
        if not isinstance(caption, str):
            raise BackendUnavailable(f"unexpected caption payload: {data!r}")
        return caption


class RemoteEmbedder(_RemoteClient):
    """POST ``{"model", "space", "image"|"text"}``, expects ``{"embedding": [float]}``."""

    def __init__(self, *args, dims: dict[str, int] | None = None, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self._dims = dict(dims or {})

    def dimension(self, space: Space) -> int:
        if space not in self._dims:
            raise KeyError(f"dimension of {space!r} unknown until first embedding")
        return self._dims[space]

    def _embed(self, payload: dict, space: Space) -> EmbeddingVector:
        data = self.post({"model": self.model_id, "space": space, **payload})
        try:
            vec = EmbeddingVector(np.asarray(data["embedding"], dtype=np.float64), space)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"unexpected embedding payload: {exc}") from exc
        known = self._dims.setdefault(space, vec.values.size)
        if known != vec.values.size:
            raise BackendUnavailable(f"{space} dimension changed from {known} to {vec.values.size}")
        return vec

    def embed_image(self, image, space: Space) -> EmbeddingVector:
        if not isinstance(image, Image.Image):
            image = tensor_to_pil(image)
        return self._embed({"image": _png_b64(image)}, space)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._embed({"text": text}, "clip-text")
