"""Text embedding backends.

Every vector leaving this module is L2-normalized, so a dot product is a
cosine everywhere downstream.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

BACKENDS = ("remote", "hashed-test")
HASH_SEED = b"reges-hashed-test-v1"
EMBED_TOKEN_ENV = "REGES_EMBED_TOKEN"

_STRIP = re.compile(r"^\W+|\W+$")


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, embedded: int = 0):
        super().__init__(message)
        self.status = status
        self.embedded = embedded


@dataclass
class EmbedderConfig:
    backend: str = "hashed-test"
    dim: int = 64
    model_name: str = "hashed-test"
    endpoint: str | None = None
    batch_size: int = 32
    max_in_flight: int = 4
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown embedder backend {self.backend!r}; expected one of {BACKENDS}")
        if self.dim <= 0:
            raise ValueError("dim must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.backend == "remote" and not self.endpoint:
            raise ValueError("remote embedder requires an endpoint")

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "dim": self.dim,
            "model_name": self.model_name,
            "endpoint": self.endpoint,
            "batch_size": self.batch_size,
        }


def _token_hash(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=HASH_SEED).digest()
    return int.from_bytes(digest, "little")


def hashed_tokens(text: str) -> list[str]:
    """Whitespace tokens, lowercased, with surrounding punctuation trimmed."""
    tokens = []
    for raw in text.split():
        tok = _STRIP.sub("", raw.lower())
        if tok:
            tokens.append(tok)
    return tokens or [text.strip().lower()]


def hashed_vector(text: str, dim: int) -> np.ndarray:
    """Signed feature hashing of whitespace tokens, then L2 normalization.

    Bucket is ``h mod dim``; sign is the top bit of ``h``. A text whose
    tokens all cancel falls back to hashing the whole text.
    """
    acc = np.zeros(dim, dtype=np.float64)
    for tok in hashed_tokens(text):
        h = _token_hash(tok)
        acc[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        h = _token_hash("\x00" + text)
        acc[h % dim] = -1.0 if h >> 63 else 1.0
        norm = 1.0
    return acc / norm


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EmbeddingError("backend returned a zero vector")
    return mat / norms


class RemoteEmbedder:
    """Client for an embeddings endpoint speaking ``{model, input}`` JSON."""

    def __init__(self, config: EmbedderConfig, transport=None):
        import httpx

        self.config = config
        token = os.environ.get(EMBED_TOKEN_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def _post(self, batch: list[str], done: int) -> np.ndarray:
        import httpx

        cfg = self.config
        payload = {"model": cfg.model_name, "input": batch}
        status = None
        for attempt in range(cfg.retries):
            try:
                with self._slots:
                    resp = self._client.post(cfg.endpoint, json=payload)
                status = resp.status_code
                if status == 200:
                    body = resp.json()
                    data = sorted(body["data"], key=lambda d: d.get("index", 0))
                    mat = np.asarray([d["embedding"] for d in data], dtype=np.float64)
                    if mat.shape[0] != len(batch):
                        raise EmbeddingError(
                            f"endpoint returned {mat.shape[0]} vectors for {len(batch)} inputs",
                            status, done,
                        )
                    if mat.shape[1] != cfg.dim:
                        raise EmbeddingError(
                            f"dimension mismatch: expected {cfg.dim}, got {mat.shape[1]}", status, done
                        )
                    return mat
                if status < 500 and status != 429:
                    break
            except httpx.TransportError as exc:
                logger.warning("embedding attempt %d failed: %s", attempt + 1, exc)
            if attempt + 1 < cfg.retries:
                time.sleep(cfg.backoff * 2**attempt)
        raise EmbeddingError(f"embedding request failed (last status {status})", status, done)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = []
        done = 0
        for start in range(0, len(texts), self.config.batch_size):
            batch = list(texts[start : start + self.config.batch_size])
            out.append(self._post(batch, done))
            done += len(batch)
        return normalize_rows(np.vstack(out))


def embed_texts(config: EmbedderConfig, texts: Sequence[str], transport=None) -> np.ndarray:
    """Embed ``texts`` into an ``(n, dim)`` array of unit rows, order-aligned."""
    if len(texts) == 0:
        raise ValueError("texts must be non-empty")
    for i, t in enumerate(texts):
        if not t or not t.strip():
            raise ValueError(f"text {i} is empty")
    if config.backend == "hashed-test":
        return np.vstack([hashed_vector(t, config.dim) for t in texts])
    return RemoteEmbedder(config, transport=transport).embed(texts)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    value = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, value))


@dataclass
class Embedder:
    """Config-bound callable with an optional per-text cache."""

    config: EmbedderConfig
    transport: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for t, v in zip(missing, embed_texts(self.config, missing, self.transport)):
                self._cache[t] = v
        return np.vstack([self._cache[t] for t in texts])

    @property
    def dim(self) -> int:
        return self.config.dim
