"""Corpus ingestion, deterministic chunking, and on-disk persistence.

A corpus directory holds exactly two files:

* ``manifest.json`` -- chunk policy, tokenizer name, counts, and per-document
  metadata, serialized with sorted keys so identical inputs produce identical
  bytes.
* ``chunks.jsonl`` -- one JSON object per chunk, ordered by chunk_id.

Document text is never stored separately: concatenating the non-overlapping
span regions of a document's chunks reconstructs it exactly, and loading
relies on that.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import NotFoundError, ValidationError
from .tokens import count_tokens, token_spans

logger = logging.getLogger(__name__)

TOKENIZER_NAME = "unicode-whitespace"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ChunkPolicy:
    """Sliding-window chunking parameters, in whitespace tokens."""

    max_tokens: int = 512
    overlap: int = 64

    def validate(self) -> None:
        if self.max_tokens < 1:
            raise ValidationError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.overlap < 0:
            raise ValidationError(f"overlap must be >= 0, got {self.overlap}")
        if self.overlap >= self.max_tokens:
            raise ValidationError(
                f"overlap ({self.overlap}) must be smaller than max_tokens ({self.max_tokens})"
            )


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    meta: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Chunk:
    """A contiguous slice of a document.

    ``span`` is the half-open character range into the parent document;
    ``token_count`` is the whitespace-token count of ``text``.
    """

    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    span: tuple[int, int]


def chunk_document(doc: Document, policy: ChunkPolicy) -> list[Chunk]:
    """Split *doc* into deterministic sliding-window chunks.

    Window starts advance by ``max_tokens - overlap`` tokens; the final
    window is the first one reaching the end of the document.  Chunk spans
    are aligned to token boundaries and extended so that consecutive spans
    always touch or overlap: the unshared prefix regions of the chunks
    concatenate back to the exact document text.
    """
    policy.validate()
    if not doc.doc_id:
        raise ValidationError("doc_id must be non-empty")
    spans = token_spans(doc.text)
    n = len(spans)
    if n == 0:
        raise ValidationError(f"document {doc.doc_id!r} is empty")

    stride = policy.max_tokens - policy.overlap
    starts = [0]
    while starts[-1] + policy.max_tokens < n:
        starts.append(starts[-1] + stride)

    width = max(4, len(str(len(starts) - 1)))
    chunks: list[Chunk] = []
    for ordinal, tok_start in enumerate(starts):
        tok_end = min(tok_start + policy.max_tokens, n)
        char_start = 0 if ordinal == 0 else spans[tok_start][0]
        if ordinal == len(starts) - 1:
            char_end = len(doc.text)
        else:
            next_first = spans[starts[ordinal + 1]][0]
            char_end = max(spans[tok_end - 1][1], next_first)
        chunks.append(
            Chunk(
                chunk_id=f"{doc.doc_id}#{ordinal:0{width}d}",
                doc_id=doc.doc_id,
                text=doc.text[char_start:char_end],
                token_count=tok_end - tok_start,
                span=(char_start, char_end),
            )
        )
    return chunks


class CorpusHandle:
    """Immutable chunked corpus with total id lookups.

    Construction is single-writer; once built the handle is safe to share
    across concurrent readers.  Iteration is always in ascending chunk_id
    order.
    """

    def __init__(
        self,
        corpus_id: str,
        documents: Iterable[Document],
        chunks: Iterable[Chunk],
        policy: ChunkPolicy,
    ):
        self.corpus_id = corpus_id
        self.policy = policy
        self._docs: dict[str, Document] = {d.doc_id: d for d in documents}
        self._chunks: dict[str, Chunk] = {c.chunk_id: c for c in chunks}
        self._order: tuple[str, ...] = tuple(sorted(self._chunks))

    def __len__(self) -> int:
        return len(self._chunks)

    def __iter__(self) -> Iterator[Chunk]:
        for cid in self._order:
            yield self._chunks[cid]

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._chunks

    @property
    def chunk_ids(self) -> tuple[str, ...]:
        return self._order

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._docs))

    def document(self, doc_id: str) -> Document:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise NotFoundError(f"unknown doc_id {doc_id!r}") from None

    def chunk(self, chunk_id: str) -> Chunk:
        try:
            return self._chunks[chunk_id]
        except KeyError:
            raise NotFoundError(f"unknown chunk_id {chunk_id!r}") from None

    def get_chunks(self, ids: Iterable[str]) -> list[Chunk]:
        """Chunks in the requested order; unknown ids are rejected."""
        return [self.chunk(cid) for cid in ids]


def ingest_documents(
    records: list[Document],
    policy: ChunkPolicy | None = None,
    corpus_id: str = "corpus",
    out_dir: str | Path | None = None,
) -> CorpusHandle:
    """Chunk *records* into a corpus handle, optionally persisting it.

    Rejects duplicate doc_ids and empty documents before any chunking.
    """
    policy = policy or ChunkPolicy()
    policy.validate()
    seen: set[str] = set()
    for doc in records:
        if doc.doc_id in seen:
            raise ValidationError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        if not count_tokens(doc.text):
            raise ValidationError(f"document {doc.doc_id!r} is empty")

    chunks: list[Chunk] = []
    for doc in records:
        chunks.extend(chunk_document(doc, policy))
    handle = CorpusHandle(corpus_id, records, chunks, policy)
    logger.info("ingested %d documents into %d chunks", len(records), len(chunks))
    if out_dir is not None:
        save_corpus(handle, out_dir)
    return handle


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_corpus(handle: CorpusHandle, out_dir: str | Path) -> Path:
    """Write ``manifest.json`` + ``chunks.jsonl``; byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "corpus_id": handle.corpus_id,
        "tokenizer": TOKENIZER_NAME,
        "policy": {"max_tokens": handle.policy.max_tokens, "overlap": handle.policy.overlap},
        "doc_count": len(handle.doc_ids),
        "chunk_count": len(handle),
        "documents": {
            doc_id: {"meta": dict(handle.document(doc_id).meta)} for doc_id in handle.doc_ids
        },
    }
    (out / "manifest.json").write_text(_dump(manifest) + "\n", encoding="utf-8")
    with (out / "chunks.jsonl").open("w", encoding="utf-8") as fh:
        for chunk in handle:
            fh.write(
                _dump(
                    {
                        "chunk_id": chunk.chunk_id,
                        "doc_id": chunk.doc_id,
                        "text": chunk.text,
                        "token_count": chunk.token_count,
                        "span": list(chunk.span),
                    }
                )
                + "\n"
            )
    return out


def load_corpus(corpus_dir: str | Path) -> CorpusHandle:
    """Load a persisted corpus, reconstructing document text from chunk spans."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise NotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    policy = ChunkPolicy(**manifest["policy"])

    chunks: list[Chunk] = []
    with (root / "chunks.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            chunks.append(
                Chunk(
                    chunk_id=rec["chunk_id"],
                    doc_id=rec["doc_id"],
                    text=rec["text"],
                    token_count=rec["token_count"],
                    span=(rec["span"][0], rec["span"][1]),
                )
            )

    by_doc: dict[str, list[Chunk]] = {}
    for chunk in chunks:
        by_doc.setdefault(chunk.doc_id, []).append(chunk)
    documents = []
    for doc_id, doc_chunks in by_doc.items():
        doc_chunks.sort(key=lambda c: c.span[0])
        parts = []
        for i, chunk in enumerate(doc_chunks):
            if i + 1 < len(doc_chunks):
                cut = doc_chunks[i + 1].span[0] - chunk.span[0]
                parts.append(chunk.text[:cut])
            else:
                parts.append(chunk.text)
        meta = manifest.get("documents", {}).get(doc_id, {}).get("meta", {})
        documents.append(Document(doc_id=doc_id, text="".join(parts), meta=meta))

    return CorpusHandle(manifest["corpus_id"], documents, chunks, policy)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatsReport:
    chunk_count: int
    doc_count: int
    total_tokens: int
    evidence_count: int | None = None
    evidence_density: float | None = None


def density(evidence_count: int, chunk_count: int) -> float:
    """Evidence chunks divided by total chunks."""
    if chunk_count <= 0:
        raise ValidationError("chunk_count must be positive")
    if evidence_count < 0 or evidence_count > chunk_count:
        raise ValidationError("evidence_count must lie in [0, chunk_count]")
    return evidence_count / chunk_count


def corpus_stats(
    corpus: CorpusHandle, evidence_chunk_ids: Iterable[str] | None = None
) -> StatsReport:
    """Corpus size stats, plus evidence density when gold evidence ids are given.

    Every evidence id must exist in the corpus; unknown ids are rejected by
    name so broken gold files fail loudly.
    """
    total_tokens = sum(c.token_count for c in corpus)
    if evidence_chunk_ids is None:
        return StatsReport(len(corpus), len(corpus.doc_ids), total_tokens)
    evidence = set()
    for cid in evidence_chunk_ids:
        if cid not in corpus:
            raise NotFoundError(f"gold evidence chunk {cid!r} not in corpus")
        evidence.add(cid)
    return StatsReport(
        chunk_count=len(corpus),
        doc_count=len(corpus.doc_ids),
        total_tokens=total_tokens,
        evidence_count=len(evidence),
        evidence_density=density(len(evidence), len(corpus)),
    )


def read_documents_jsonl(path: str | Path) -> list[Document]:
    """Read line-delimited JSON documents: {"doc_id", "text", "meta"?}."""
    docs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "doc_id" not in rec or "text" not in rec:
                raise ValidationError(f"{path}:{lineno}: missing doc_id or text")
            docs.append(Document(rec["doc_id"], rec["text"], rec.get("meta", {})))
    return docs
