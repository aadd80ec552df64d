"""Benchmark harness: gold sets, report assembly, the rank-then-read
baseline, and BM25-interval corpus expansion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregation import AnswerSet, align_and_count, judge_batch, make_cluster, new_batch
from .backends import BudgetLedger, LlmBackend
from .corpus import CorpusHandle, Document
from .disambiguation import QuerySpec, parse_query, spec_from_json
from .errors import NotFoundError, ValidationError
from .index import Bm25Index, build_bm25
from .metrics import DEFAULT_EPSILON, ace, chunk_recall, mean, median, micro_chunk_recall, nace
from .pipeline import PipelineConfig, PipelineResult, run_query

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Gold sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoldQuery:
    query_id: str
    question: str
    entity_type: str
    composition_meta: Mapping
    gold_entities: tuple[str, ...]
    gold_evidence_chunk_ids: tuple[str, ...]
    query: QuerySpec | None = None  # full spec; parsed from the question if absent

    @property
    def y(self) -> int:
        return len(self.gold_entities)


@dataclass(frozen=True)
class GoldSet:
    queries: tuple[GoldQuery, ...]

    def __post_init__(self):
        ids = [q.query_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate query_id in gold set")

    def by_id(self, query_id: str) -> GoldQuery:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise NotFoundError(f"no gold query {query_id!r}")


def gold_from_json(obj: dict) -> GoldQuery:
    spec = spec_from_json(obj["query"]) if "query" in obj else None
    return GoldQuery(
        query_id=obj["query_id"],
        question=obj["question"],
        entity_type=obj["entity_type"],
        composition_meta=dict(obj.get("composition", {})),
        gold_entities=tuple(obj["gold_entities"]),
        gold_evidence_chunk_ids=tuple(obj["gold_evidence_chunk_ids"]),
        query=spec,
    )


def load_gold(path: str | Path) -> GoldSet:
    """Line-delimited JSON, one gold query per line."""
    queries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                queries.append(gold_from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{line_no}: bad gold row: {exc}") from exc
    return GoldSet(tuple(queries))


def validate_gold(gold: GoldSet, corpus: CorpusHandle) -> None:
    """Every referenced evidence chunk must exist in the corpus."""
    known = set(corpus.chunk_ids)
    for q in gold.queries:
        for cid in q.gold_evidence_chunk_ids:
            if cid not in known:
                raise NotFoundError(f"gold query {q.query_id}: unknown evidence chunk {cid!r}")


def gold_query_spec(q: GoldQuery) -> QuerySpec:
    if q.query is not None:
        return q.query
    spec = parse_query(q.question)
    # gold rows pin the identity even when the heuristic parser disagrees
    return QuerySpec(
        query_id=q.query_id,
        raw_text=spec.raw_text,
        entity_type=q.entity_type or spec.entity_type,
        conditions=spec.conditions,
        composition=spec.composition,
        scope_notes=spec.scope_notes,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    predicted: int | None
    gold_count: int
    ace: int | None
    nace: float | None
    recall: float | None
    error: str | None = None
    candidate_chunk_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Report:
    rows: tuple[QueryResult, ...]
    mean_nace: float | None
    median_nace: float | None
    mean_ace: float | None
    mean_recall: float | None
    recall_mode: str
    metadata: Mapping

    def to_json(self) -> dict:
        return {
            "rows": [
                {
                    "query_id": r.query_id,
                    "predicted": r.predicted,
                    "gold_count": r.gold_count,
                    "ace": r.ace,
                    "nace": r.nace,
                    "recall": r.recall,
                    "error": r.error,
                }
                for r in self.rows
            ],
            "aggregates": {
                "mean_nace": self.mean_nace,
                "median_nace": self.median_nace,
                "mean_ace": self.mean_ace,
                "mean_recall": self.mean_recall,
                "recall_mode": self.recall_mode,
            },
            "metadata": dict(self.metadata),
        }


def build_report(
    rows: Sequence[QueryResult],
    gold: GoldSet,
    recall_mode: str = "macro",
    metadata: Mapping | None = None,
) -> Report:
    """Aggregate per-query rows; error rows are kept but excluded from means."""
    if recall_mode not in ("macro", "micro"):
        raise ValidationError(f"recall_mode must be 'macro' or 'micro', got {recall_mode!r}")
    ok = [r for r in rows if r.error is None]
    naces = [r.nace for r in ok]
    aces = [float(r.ace) for r in ok]
    if recall_mode == "micro":
        pairs = [
            (r.candidate_chunk_ids, gold.by_id(r.query_id).gold_evidence_chunk_ids) for r in ok
        ]
        recall: float | None = micro_chunk_recall(pairs) if pairs else None
    else:
        recalls = [r.recall for r in ok if r.recall is not None]
        recall = mean(recalls) if recalls else None
    return Report(
        rows=tuple(sorted(rows, key=lambda r: r.query_id)),
        mean_nace=mean(naces) if naces else None,
        median_nace=median(naces) if naces else None,
        mean_ace=mean(aces) if aces else None,
        mean_recall=recall,
        recall_mode=recall_mode,
        metadata=dict(metadata or {}),
    )


def run_benchmark(
    corpus: CorpusHandle,
    gold: GoldSet,
    judge_backend: LlmBackend,
    planner_backend: LlmBackend | None = None,
    config: PipelineConfig | None = None,
    ledger: BudgetLedger | None = None,
    recall_mode: str = "macro",
    epsilon: float = DEFAULT_EPSILON,
) -> Report:
    """One row per gold query; failures become error rows, never aborts."""
    validate_gold(gold, corpus)
    cfg = config or PipelineConfig()
    rows = []
    for q in sorted(gold.queries, key=lambda g: g.query_id):
        try:
            spec = gold_query_spec(q)
            result: PipelineResult = run_query(
                corpus, spec, judge_backend, planner_backend, config=cfg, ledger=ledger
            )
            predicted = result.answer.count
            recall = (
                chunk_recall(result.candidate_chunk_ids, q.gold_evidence_chunk_ids)
                if q.gold_evidence_chunk_ids
                else None
            )
            rows.append(
                QueryResult(
                    query_id=q.query_id,
                    predicted=predicted,
                    gold_count=q.y,
                    ace=ace(predicted, q.y),
                    nace=nace(predicted, q.y, epsilon),
                    recall=recall,
                    candidate_chunk_ids=result.candidate_chunk_ids,
                )
            )
        except Exception as exc:  # per-query isolation is the contract
            logger.exception("query %s failed", q.query_id)
            rows.append(
                QueryResult(
                    query_id=q.query_id,
                    predicted=None,
                    gold_count=q.y,
                    ace=None,
                    nace=None,
                    recall=None,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    metadata = {
        "queries": len(gold.queries),
        "errors": sum(1 for r in rows if r.error),
        "epsilon": epsilon,
        "identity_filter": cfg.identity_filter,
        "lambda": cfg.lam,
        "max_context": cfg.max_context,
    }
    return build_report(rows, gold, recall_mode=recall_mode, metadata=metadata)


# ---------------------------------------------------------------------------
# Rank-then-read baseline
# ---------------------------------------------------------------------------


def naive_rag_baseline(
    corpus: CorpusHandle,
    query: QuerySpec,
    k: int,
    backend: LlmBackend,
    index: Bm25Index | None = None,
    ledger: BudgetLedger | None = None,
) -> AnswerSet:
    """Rank-then-read: judge only the top-k lexical hits, one chunk at a time.

    The per-chunk reader is the same batch judge over singleton batches, so
    with k covering the corpus this reproduces the full union semantics.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    idx = index or build_bm25(corpus)
    hits = idx.topk(query.raw_text, k)
    findings = []
    for rank, (chunk_id, _score) in enumerate(hits):
        chunk = corpus.chunk(chunk_id)
        cluster = make_cluster(f"rag{rank}", [chunk_id], [chunk.token_count], [1.0])
        batch = new_batch(rank, cluster, max(chunk.token_count, 1))
        findings.extend(judge_batch(batch, query, corpus, backend, ledger))
    return align_and_count(findings, query)


# ---------------------------------------------------------------------------
# Corpus expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionReport:
    kept: tuple[Document, ...]
    scores: tuple[tuple[str, float], ...]  # (doc_id, top-1 score) for every pool doc
    lo: float
    hi: float

    def to_json(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "kept_doc_ids": [d.doc_id for d in self.kept],
            "scores": [{"doc_id": d, "top1": s} for d, s in self.scores],
        }


def expand_corpus(
    core: CorpusHandle,
    pool: Sequence[Document],
    lo: float,
    hi: float,
    index: Bm25Index | None = None,
) -> ExpansionReport:
    """Keep pool documents whose top-1 score against the core falls in [lo, hi].

    A score near zero marks an unrelated document; a very high one marks a
    near-duplicate of the core. Both ends are closed.
    """
    if not lo < hi:
        raise ValidationError(f"need lo < hi, got [{lo}, {hi}]")
    idx = index or build_bm25(core)
    kept = []
    scores = []
    for doc in pool:
        top1 = float(idx.scores(doc.text).max()) if idx.n_docs else 0.0
        scores.append((doc.doc_id, top1))
        if lo <= top1 <= hi:
            kept.append(doc)
    return ExpansionReport(tuple(kept), tuple(scores), lo, hi)


def score_histogram(
    scores: Iterable[tuple[str, float]], bins: int = 10
) -> list[tuple[float, float, int]]:
    """(bin_lo, bin_hi, count) rows to help pick expansion interval endpoints."""
    values = np.array([s for _, s in scores], dtype=np.float64)
    if values.size == 0:
        return []
    counts, edges = np.histogram(values, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
