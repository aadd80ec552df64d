"""Hashing embedder oracle tests plus remote client retry behavior."""

from __future__ import annotations

import hashlib

import numpy as np
import pytest

from aggquery.embeddings import HashingEmbedder, RemoteEmbedder
from aggquery.errors import TransportError, ValidationError


def hand_bucket(gram: str, dim: int) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def test_abc_matches_hand_computed_buckets():
    # "abc" is a single trigram: one count in its bucket, norm 1 after scaling.
    emb = HashingEmbedder(dim=16)
    vec = emb.embed(["abc"])[0]
    expected = np.zeros(16)
    expected[hand_bucket("abc", 16)] = 1.0
    np.testing.assert_array_equal(vec, expected)


def test_longer_text_counts_every_trigram():
    emb = HashingEmbedder(dim=32)
    text = "Graph QA"
    folded = text.casefold()
    counts = np.zeros(32)
    for i in range(len(folded) - 2):
        counts[hand_bucket(folded[i : i + 3], 32)] += 1.0
    counts /= np.linalg.norm(counts)
    np.testing.assert_allclose(emb.embed([text])[0], counts, atol=0, rtol=0)


def test_short_and_empty_strings():
    emb = HashingEmbedder(dim=8)
    short = emb.embed(["ab"])[0]
    expected = np.zeros(8)
    expected[hand_bucket("ab", 8)] = 1.0
    np.testing.assert_array_equal(short, expected)
    np.testing.assert_array_equal(emb.embed([""])[0], np.zeros(8))


def test_determinism_and_casefold():
    emb = HashingEmbedder()
    a, b = emb.embed(["Hello World", "hello world"])
    np.testing.assert_array_equal(a, b)
    again = emb.embed(["Hello World"])[0]
    np.testing.assert_array_equal(a, again)


def test_rows_are_unit_or_zero():
    emb = HashingEmbedder(dim=64)
    mat = emb.embed(["some text here", "x", ""])
    norms = np.linalg.norm(mat, axis=1)
    np.testing.assert_allclose(norms[:2], [1.0, 1.0], atol=1e-12)
    assert norms[2] == 0.0


def test_bad_dim_rejected():
    with pytest.raises(ValidationError):
        HashingEmbedder(dim=0)


# ---------------------------------------------------------------------------
# Remote client
# ---------------------------------------------------------------------------


class FakeResponse:
    def __init__(self, vectors):
        self._vectors = vectors

    def raise_for_status(self):
        pass

    def json(self):
        return {"data": [{"embedding": v} for v in self._vectors]}


class FlakySession:
    """Fails `failures` times, then returns fixed vectors."""

    def __init__(self, failures: int, vectors):
        self.failures = failures
        self.vectors = vectors
        self.calls = 0

    def post(self, url, json=None, timeout=None):
        self.calls += 1
        if self.calls <= self.failures:
            raise ConnectionError("boom")
        return FakeResponse(self.vectors)


@pytest.fixture(autouse=True)
def no_sleep(monkeypatch):
    monkeypatch.setattr("aggquery.embeddings.time.sleep", lambda _s: None)


def test_remote_embedder_retries_then_succeeds():
    session = FlakySession(failures=2, vectors=[[1.0, 0.0], [0.0, 1.0]])
    emb = RemoteEmbedder("http://x/embed", "m", dim=2, max_retries=3, session=session)
    mat = emb.embed(["a", "b"])
    assert session.calls == 3
    np.testing.assert_array_equal(mat, [[1.0, 0.0], [0.0, 1.0]])


def test_remote_embedder_exhausts_retries():
    session = FlakySession(failures=99, vectors=[])
    emb = RemoteEmbedder("http://x/embed", "m", dim=2, max_retries=2, session=session)
    with pytest.raises(TransportError) as err:
        emb.embed(["a"])
    assert session.calls == 3
    assert isinstance(err.value.cause, ConnectionError)


def test_remote_embedder_shape_check_not_retried():
    session = FlakySession(failures=0, vectors=[[1.0, 0.0, 0.0]])
    emb = RemoteEmbedder("http://x/embed", "m", dim=2, session=session)
    with pytest.raises(ValidationError):
        emb.embed(["a"])
    assert session.calls == 1


def test_remote_embedder_empty_input_no_request():
    session = FlakySession(failures=99, vectors=[])
    emb = RemoteEmbedder("http://x/embed", "m", dim=4, session=session)
    assert emb.embed([]).shape == (0, 4)
    assert session.calls == 0
