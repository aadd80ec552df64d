"""Lexical and vector indexing over chunks.

BM25 here is plain Okapi: idf = ln(1 + (N - df + 0.5) / (df + 0.5)) with
k1=1.2, b=0.75 defaults, document length measured in analyzed terms.  Each
distinct query term contributes once; repeating a word in a question does
not double its weight.  TF-IDF uses raw term counts with smoothed idf
ln((1 + N) / (1 + df)) + 1 and L2-normalized rows.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .corpus import Chunk, CorpusHandle
from .embeddings import EmbeddingProvider
from .errors import NotFoundError, ValidationError
from .tokens import analyze

logger = logging.getLogger(__name__)

INDEX_VERSION = 1


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Dense real-valued feature row tagged with its source space."""

    values: np.ndarray
    kind: str  # "tfidf" | "embedding" | "combined"

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature vector has non-finite entries")


class Bm25Index:
    """Immutable BM25 index; safe for concurrent scoring after construction."""

    def __init__(
        self,
        chunk_ids: Sequence[str],
        postings: dict[str, tuple[np.ndarray, np.ndarray]],
        doclen: np.ndarray,
        k1: float,
        b: float,
    ):
        self.chunk_ids = tuple(chunk_ids)
        self._postings = postings
        self.doclen = doclen
        self.avgdl = float(doclen.mean())
        self.k1 = k1
        self.b = b

    @property
    def n_docs(self) -> int:
        return len(self.chunk_ids)

    def idf(self, term: str) -> float:
        posting = self._postings.get(term)
        df = 0 if posting is None else posting[0].shape[0]
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def scores(self, query_text: str) -> np.ndarray:
        """BM25 score of every chunk against the query, in chunk_ids order."""
        out = np.zeros(self.n_docs, dtype=np.float64)
        for term in sorted(set(analyze(query_text))):
            posting = self._postings.get(term)
            if posting is None:
                continue
            idx, tf = posting
            kernels.bm25_accumulate(out, idx, tf, self.doclen, self.idf(term), self.k1, self.b, self.avgdl)
        return out

    def topk(self, query_text: str, k: int) -> list[tuple[str, float]]:
        """Top-k chunks with positive score, ties broken by ascending chunk_id."""
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        scored = self.scores(query_text)
        hits = [(self.chunk_ids[i], float(s)) for i, s in enumerate(scored) if s > 0.0]
        hits.sort(key=lambda pair: (-pair[1], pair[0]))
        return hits[:k]


def build_bm25(corpus: CorpusHandle | Sequence[Chunk], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Build an index over a corpus or an explicit chunk subset."""
    if k1 <= 0:
        raise ValidationError(f"k1 must be > 0, got {k1}")
    if not 0.0 <= b <= 1.0:
        raise ValidationError(f"b must be in [0, 1], got {b}")
    chunks = list(corpus)
    if not chunks:
        raise ValidationError("cannot index an empty corpus")
    chunks.sort(key=lambda c: c.chunk_id)

    doclen = np.zeros(len(chunks), dtype=np.float64)
    term_hits: dict[str, dict[int, int]] = {}
    for i, chunk in enumerate(chunks):
        terms = analyze(chunk.text)
        doclen[i] = len(terms)
        for term in terms:
            hits = term_hits.setdefault(term, {})
            hits[i] = hits.get(i, 0) + 1
    if doclen.sum() == 0:
        raise ValidationError("corpus has no analyzable terms")

    postings = {
        term: (
            np.fromiter(sorted(hits), dtype=np.int64, count=len(hits)),
            np.asarray([hits[i] for i in sorted(hits)], dtype=np.float64),
        )
        for term, hits in term_hits.items()
    }
    logger.info("bm25 index: %d chunks, %d terms", len(chunks), len(postings))
    return Bm25Index([c.chunk_id for c in chunks], postings, doclen, k1, b)


def save_bm25(index: Bm25Index, out_dir: str | Path) -> Path:
    """Persist to ``bm25.json``; identical indexes produce identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "chunk_ids": list(index.chunk_ids),
        "doclen": index.doclen.tolist(),
        "postings": {
            term: [idx.tolist(), tf.tolist()] for term, (idx, tf) in sorted(index._postings.items())
        },
    }
    (out / "bm25.json").write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )
    return out


def load_bm25(index_dir: str | Path) -> Bm25Index:
    path = Path(index_dir) / "bm25.json"
    if not path.exists():
        raise NotFoundError(f"no index file at {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    postings = {
        term: (np.asarray(idx, dtype=np.int64), np.asarray(tf, dtype=np.float64))
        for term, (idx, tf) in payload["postings"].items()
    }
    return Bm25Index(
        payload["chunk_ids"],
        postings,
        np.asarray(payload["doclen"], dtype=np.float64),
        payload["k1"],
        payload["b"],
    )


# ---------------------------------------------------------------------------
# TF-IDF features
# ---------------------------------------------------------------------------


def tfidf_matrix(texts: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Dense L2-normalized tf-idf rows over the sorted vocabulary of *texts*.

    Rows with no vocabulary terms stay zero vectors.
    """
    if not texts:
        raise ValidationError("tfidf over empty input")
    analyzed = [analyze(t) for t in texts]
    vocab = sorted({term for terms in analyzed for term in terms})
    col = {term: j for j, term in enumerate(vocab)}
    n = len(texts)

    matrix = np.zeros((n, len(vocab)), dtype=np.float64)
    for i, terms in enumerate(analyzed):
        for term in terms:
            matrix[i, col[term]] += 1.0
    df = (matrix > 0).sum(axis=0)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    matrix *= idf
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    np.divide(matrix, norms, out=matrix, where=norms > 0)
    return matrix, vocab


def tfidf_features(chunks: Sequence[Chunk]) -> dict[str, FeatureVector]:
    matrix, _ = tfidf_matrix([c.text for c in chunks])
    return {c.chunk_id: FeatureVector(matrix[i], "tfidf") for i, c in enumerate(chunks)}


def embed_texts(texts: list[str], provider: EmbeddingProvider) -> list[FeatureVector]:
    matrix = provider.embed(texts)
    return [FeatureVector(matrix[i], "embedding") for i in range(len(texts))]


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------


def _values(v) -> np.ndarray:
    if isinstance(v, FeatureVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def cosine_sim(u, v) -> float:
    """Cosine similarity; by convention 0.0 when either vector is zero."""
    a, b = _values(u), _values(v)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-normalize; zero rows stay zero."""
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def pairwise_cosine(matrix: np.ndarray) -> np.ndarray:
    hat = unit_rows(np.asarray(matrix, dtype=np.float64))
    return np.clip(hat @ hat.T, -1.0, 1.0)


def combined_features(
    tfidf_rows: np.ndarray, emb_rows: np.ndarray, w_text: float = 0.5, w_emb: float = 0.5
) -> np.ndarray:
    """Concatenate sqrt-weighted unit rows of both spaces.

    With weights normalized to sum 1, the cosine of two combined rows equals
    w_text * cos_tfidf + w_emb * cos_emb whenever both rows are nonzero in
    both spaces, so one similarity threshold governs the blend.
    """
    if w_text < 0 or w_emb < 0 or w_text + w_emb <= 0:
        raise ValidationError("weights must be non-negative and not both zero")
    if tfidf_rows.shape[0] != emb_rows.shape[0]:
        raise ValidationError("row count mismatch between feature spaces")
    total = w_text + w_emb
    left = math.sqrt(w_text / total) * unit_rows(np.asarray(tfidf_rows, dtype=np.float64))
    right = math.sqrt(w_emb / total) * unit_rows(np.asarray(emb_rows, dtype=np.float64))
    return np.hstack([left, right])


def feature_rows_for_chunks(
    chunks: Sequence[Chunk],
    provider: EmbeddingProvider,
    w_text: float = 0.5,
    w_emb: float = 0.5,
) -> np.ndarray:
    """Combined clustering features for a chunk list, in input order."""
    texts = [c.text for c in chunks]
    tfidf, _ = tfidf_matrix(texts)
    emb = provider.embed(texts)
    return combined_features(tfidf, emb, w_text, w_emb)


def postings_for_term(index: Bm25Index, term: str) -> dict[str, int]:
    """Chunk-id → term frequency for one analyzed term (diagnostics)."""
    posting = index._postings.get(term)
    if posting is None:
        return {}
    idx, tf = posting
    return {index.chunk_ids[int(i)]: int(f) for i, f in zip(idx, tf)}
