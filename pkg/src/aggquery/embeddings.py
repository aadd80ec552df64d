"""Embedding providers.

The default provider is a deterministic hashing embedder so that every test
and offline run is reproducible without a network.  Its construction is
documented field by field and must not change without a version bump: stored
feature files depend on it.
"""

from __future__ import annotations

import hashlib
import logging
import time
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import TransportError, ValidationError

logger = logging.getLogger(__name__)


@runtime_checkable
class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: list[str]) -> np.ndarray:
        """Return an array of shape (len(texts), dim), one row per text."""
        ...


class HashingEmbedder:
    """Normalized character-trigram hashing embedder.

    For each input text:

    1. casefold the text;
    2. take all character trigrams ``t[i:i+3]``; a text shorter than three
       characters contributes the whole string as its only gram (empty text
       contributes nothing and maps to the zero vector);
    3. bucket each gram at
       ``int.from_bytes(blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big") % dim``
       and count occurrences;
    4. L2-normalize the count vector (zero vectors are left as zeros).

    Equal strings therefore always map to equal vectors.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValidationError(f"dim must be >= 1, got {dim}")
        self.dim = dim

    @staticmethod
    def _grams(text: str) -> list[str]:
        folded = text.casefold()
        if len(folded) < 3:
            return [folded] if folded else []
        return [folded[i : i + 3] for i in range(len(folded) - 2)]

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for gram in self._grams(text):
                out[row, self._bucket(gram)] += 1.0
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        np.divide(out, norms, out=out, where=norms > 0)
        return out


class RemoteEmbedder:
    """HTTP embeddings client speaking the common {"model", "input"} JSON shape.

    Transient failures are retried with exponential backoff; the final
    failure is raised as TransportError with the underlying cause attached.
    """

    def __init__(
        self,
        url: str,
        model: str,
        dim: int,
        timeout: float = 30.0,
        max_retries: int = 3,
        session=None,
    ):
        if session is None:
            import requests

            session = requests.Session()
        self.url = url
        self.model = model
        self.dim = dim
        self.timeout = timeout
        self.max_retries = max_retries
        self._session = session

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        payload = {"model": self.model, "input": list(texts)}
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(self.url, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()["data"]
                matrix = np.asarray([row["embedding"] for row in data], dtype=np.float64)
                if matrix.shape != (len(texts), self.dim):
                    raise ValidationError(
                        f"embedding endpoint returned shape {matrix.shape}, "
                        f"expected {(len(texts), self.dim)}"
                    )
                return matrix
            except ValidationError:
                raise
            except Exception as exc:  # noqa: BLE001 - any transport failure is retryable
                last_exc = exc
                if attempt < self.max_retries:
                    delay = min(2.0**attempt * 0.5, 8.0)
                    logger.warning("embed attempt %d failed (%s); retrying", attempt + 1, exc)
                    time.sleep(delay)
        raise TransportError(f"embedding request failed after {self.max_retries + 1} attempts", last_exc)
