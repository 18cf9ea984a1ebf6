from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from abductor.embeddings import HashEmbedder, HttpEmbedder, similarity_matrix, unit_normalize
from abductor.errors import BackendUnavailableError, InputValidationError


def test_hash_embedder_is_deterministic_and_unit_norm():
    embedder = HashEmbedder()
    a, b = embedder.embed(["The butler took the poison.", "The butler took the poison."])
    assert a.dimension == 1024
    assert np.allclose(a.values, b.values)
    assert np.isclose(np.linalg.norm(a.values), 1.0)
    assert np.isclose(a.cosine(b), 1.0)


def test_shared_content_words_raise_similarity():
    sims = similarity_matrix(
        HashEmbedder(),
        ["The butler poisoned the brandy."],
        ["Poisoned brandy killed him, said the butler.", "A storm hit the harbour."],
    )
    assert sims.shape == (1, 2)
    assert sims[0, 0] > 0.5
    assert sims[0, 0] > sims[0, 1]


def test_stopwords_do_not_create_similarity():
    sims = similarity_matrix(HashEmbedder(), ["the cat is on the mat"], ["the dog was in a car"])
    assert sims[0, 0] < 0.5


def test_blank_or_empty_input_is_rejected():
    with pytest.raises(InputValidationError):
        HashEmbedder().embed([])
    with pytest.raises(InputValidationError):
        HashEmbedder().embed(["ok", "   "])


def test_empty_side_gives_empty_matrix():
    assert similarity_matrix(HashEmbedder(), [], ["x"]).shape == (0, 1)


def test_unit_normalize_rejects_zero_rows():
    with pytest.raises(BackendUnavailableError):
        unit_normalize(np.zeros((1, 3)))


def test_http_embedder_batches_retries_and_normalizes():
    requests = []

    def handler(request: httpx.Request) -> httpx.Response:
        payload = request.read()
        requests.append(payload)
        if len(requests) == 1:
            return httpx.Response(503)
        texts = json.loads(payload)["input"]
        data = [{"index": i, "embedding": [float(len(t)), 0.0, 0.0]} for i, t in reversed(list(enumerate(texts)))]
        return httpx.Response(200, json={"data": data})

    embedder = HttpEmbedder("https://emb.invalid/v1", "e1", api_key="k", batch_size=2, transport=httpx.MockTransport(handler))
    vectors = embedder.embed(["a", "bb", "ccc"])
    assert embedder.dimension == 3
    assert all(np.isclose(np.linalg.norm(v.values), 1.0) for v in vectors)
    # one failed attempt, then two batches
    assert len(requests) == 3


def test_http_embedder_gives_up_after_retries():
    embedder = HttpEmbedder(
        "https://emb.invalid/v1", "e1", api_key="k", retries=1, transport=httpx.MockTransport(lambda r: httpx.Response(500))
    )
    with pytest.raises(BackendUnavailableError):
        embedder.embed(["a"])
