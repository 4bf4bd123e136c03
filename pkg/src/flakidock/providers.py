"""Pluggable embedding and text-generation providers.

Two embedding roles exist: a sentence-similarity provider (failure matching
and clustering) and a query-embedding provider (demonstration retrieval).
Both share one interface. The deterministic offline provider backs every
test; the HTTP providers talk to OpenAI-compatible endpoints.
"""

from __future__ import annotations

import hashlib
import json
import os
from abc import ABC, abstractmethod

import numpy as np

from .errors import ProviderUnavailable

OFFLINE_DIM = 256
_NGRAM = 3


class EmbeddingProvider(ABC):
    """Stateless handle producing fixed-dimension embeddings."""

    provider_id: str
    dim: int
    token_limit: int | None = None

    @abstractmethod
    def embed_values(self, text: str) -> list[float]:
        """Return the raw embedding values for text already within limits."""


class HashingEmbeddingProvider(EmbeddingProvider):
    """Deterministic offline embedding: hashed character n-grams, L2-normalized.

    Every call with the same text yields the same vector, on any host,
    which makes downstream behavior fully replayable without a network.
    """

    _CACHE_LIMIT = 4096

    def __init__(self, dim: int = OFFLINE_DIM):
        self.dim = dim
        self.provider_id = f"offline-hash-{dim}"
        self.token_limit = None
        self._cache: dict[str, tuple[float, ...]] = {}

    def embed_values(self, text: str) -> list[float]:
        cached = self._cache.get(text)
        if cached is not None:
            return list(cached)
        values = self._compute(text)
        if len(self._cache) >= self._CACHE_LIMIT:
            self._cache.clear()
        self._cache[text] = tuple(values)
        return values

    def _compute(self, text: str) -> list[float]:
        lowered = text.lower()
        grams = (
            [lowered[i : i + _NGRAM] for i in range(len(lowered) - _NGRAM + 1)]
            if len(lowered) >= _NGRAM
            else [lowered]
        )
        acc = np.zeros(self.dim, dtype=np.float64)
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "big")
            sign = 1.0 if h & (1 << 63) else -1.0
            acc[h % self.dim] += sign
        norm = float(np.linalg.norm(acc))
        if norm > 0.0:
            acc /= norm
        # Quantize to the on-disk float32 grid so in-memory and persisted
        # vectors rank identically.
        return [float(v) for v in acc.astype(np.float32)]


class HttpEmbeddingProvider(EmbeddingProvider):
    """OpenAI-style /embeddings endpoint driver."""

    def __init__(
        self,
        base_url: str,
        model: str,
        auth_env: str,
        dim: int = 1536,
        token_limit: int | None = 8191,
        timeout: float = 30.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.auth_env = auth_env
        self.dim = dim
        self.token_limit = token_limit
        self.timeout = timeout
        self.provider_id = f"http:{model}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def embed_values(self, text: str) -> list[float]:
        import requests

        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": text},
                headers=self._headers(),
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"embedding request failed: {exc}") from exc
        try:
            values = payload["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"unexpected embedding response shape: {exc}") from exc
        if len(values) != self.dim:
            raise ProviderUnavailable(
                f"provider returned dim {len(values)}, declared {self.dim}"
            )
        return [float(v) for v in np.asarray(values, dtype=np.float32)]


class TextGenerationProvider(ABC):
    """Handle for repair-candidate (and label) generation."""

    provider_id: str

    @abstractmethod
    def generate(self, prompt: str) -> str:
        """Return the raw model response for one prompt."""


class ScriptedTextProvider(TextGenerationProvider):
    """Canned responses consumed in order; the last one repeats.

    Records every prompt it receives, which is how tests assert on the
    exact prompt contents of a given attempt.
    """

    def __init__(self, responses: list[str]):
        if not responses:
            raise ValueError("scripted provider needs at least one response")
        self.responses = list(responses)
        self.prompts: list[str] = []
        self.provider_id = "scripted"

    @classmethod
    def from_file(cls, path) -> "ScriptedTextProvider":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        responses = payload.get("responses")
        if not isinstance(responses, list) or not responses:
            raise ValueError(f"{path}: scenario file has no 'responses' list")
        return cls([str(r) for r in responses])

    def generate(self, prompt: str) -> str:
        self.prompts.append(prompt)
        index = min(len(self.prompts) - 1, len(self.responses) - 1)
        return self.responses[index]


class HttpChatProvider(TextGenerationProvider):
    """OpenAI-style /chat/completions endpoint driver.

    Temperature is pinned to 0 so repeated runs against the same model
    produce stable candidates.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        auth_env: str,
        max_tokens: int = 2000,
        timeout: float = 120.0,
        temperature: float = 0.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.auth_env = auth_env
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.temperature = temperature
        self.provider_id = f"http:{model}"

    def generate(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json={
                    "model": self.model,
                    "messages": [{"role": "user", "content": prompt}],
                    "temperature": self.temperature,
                    "max_tokens": self.max_tokens,
                },
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"generation request failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"unexpected chat response shape: {exc}") from exc


def estimate_tokens(text: str) -> int:
    """Crude token estimate (~4 characters per token), used for budgets."""
    return max(1, (len(text) + 3) // 4)


def truncate_to_tokens(text: str, limit: int) -> str:
    """Tail-truncate text to roughly `limit` tokens (keeps the head)."""
    max_chars = limit * 4
    if len(text) <= max_chars:
        return text
    return text[:max_chars]
