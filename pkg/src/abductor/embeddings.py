"""Embedding providers. Every vector handed out is unit-normalized."""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .backend import API_KEY_ENV
from .errors import BackendUnavailableError, InputValidationError

_TOKEN = re.compile(r"[a-z0-9]+")
_STOPWORDS = frozenset(
    "a an the of to in on at by for with and or but is was were are be been being it its this that "
    "these those he she they them his her their as from into than then so".split()
)


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def cosine(self, other: "EmbeddingVector") -> float:
        return float(np.dot(self.values, other.values))


def unit_normalize(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise BackendUnavailableError("provider returned a zero embedding")
    return matrix / norms


def _check_texts(texts: Sequence[str]) -> list[str]:
    texts = list(texts)
    if not texts:
        raise InputValidationError("embed() needs at least one text")
    for i, text in enumerate(texts):
        if not isinstance(text, str) or not text.strip():
            raise InputValidationError(f"text {i} is blank")
    return texts


class Embedder(Protocol):
    dimension: int

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


class HashEmbedder:
    """Deterministic bag-of-words hash projection for offline use.

    Content words are hashed into a fixed number of signed buckets, so texts that
    share content words have positive cosine similarity and identical texts
    embed identically. Not a semantic model.
    """

    def __init__(self, dimension: int = 1024, use_bigrams: bool = False):
        self.dimension = dimension
        self.use_bigrams = use_bigrams

    def _features(self, text: str) -> list[str]:
        tokens = _TOKEN.findall(text.lower())
        content = [t for t in tokens if t not in _STOPWORDS] or tokens
        if not content:
            # punctuation-only text still gets a stable vector
            return [text.strip()]
        feats = list(content)
        if self.use_bigrams:
            feats += [f"{a}_{b}" for a, b in zip(content, content[1:])]
        return feats

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension)
        for feat in self._features(text):
            digest = hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            sign = 1.0 if value & 1 else -1.0
            vec[(value >> 1) % self.dimension] += sign
        return vec

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = _check_texts(texts)
        matrix = unit_normalize(np.stack([self._vector(t) for t in texts]))
        return [EmbeddingVector(row) for row in matrix]


class HttpEmbedder:
    """Embedding endpoint using the common ``/embeddings`` JSON shape (``data[i].embedding``)."""

    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        batch_size: int = 64,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model_name = model_name
        self.retries = retries
        self.batch_size = batch_size
        self.dimension = 0
        token = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def _post(self, batch: list[str]) -> list[list[float]]:
        last = ""
        for _ in range(self.retries + 1):
            try:
                resp = self._client.post("/embeddings", json={"model": self.model_name, "input": batch})
            except httpx.TransportError as exc:
                last = str(exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendUnavailableError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
            return [d["embedding"] for d in data]
        raise BackendUnavailableError(f"embedding call failed after retries: {last}")

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = _check_texts(texts)
        rows: list[list[float]] = []
        for start in range(0, len(texts), self.batch_size):
            rows.extend(self._post(texts[start : start + self.batch_size]))
        matrix = unit_normalize(np.array(rows))
        if self.dimension and matrix.shape[1] != self.dimension:
            raise BackendUnavailableError("embedding dimension changed between calls")
        self.dimension = int(matrix.shape[1])
        return [EmbeddingVector(row) for row in matrix]


class SentenceTransformerEmbedder:
    """Local sentence-transformers encoder (optional dependency, loaded lazily)."""

    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self.dimension = int(self._model.get_sentence_embedding_dimension())

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = _check_texts(texts)
        matrix = unit_normalize(self._model.encode(texts, convert_to_numpy=True))
        return [EmbeddingVector(row) for row in matrix]


def similarity_matrix(embedder: Embedder, left: Sequence[str], right: Sequence[str]) -> np.ndarray:
    """Cosine similarities, shape (len(left), len(right)). Empty sides give an empty matrix."""
    if not left or not right:
        return np.zeros((len(left), len(right)))
    vectors = embedder.embed(list(left) + list(right))
    a = np.stack([v.values for v in vectors[: len(left)]])
    b = np.stack([v.values for v in vectors[len(left) :]])
    return np.clip(a @ b.T, -1.0, 1.0)
