"""End-to-end query execution: filter, cluster, batch, judge, align."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .aggregation import (
    DEFAULT_CLUSTER_THRESHOLD,
    DEFAULT_LAMBDA,
    EFFECTIVE_CONTEXT,
    AnswerSet,
    align_and_count,
    candidate_pairs,
    cluster_candidates,
    greedy_batch,
    judge_batches,
    order_for_batching,
)
from .backends import BudgetLedger, LlmBackend
from .corpus import CorpusHandle
from .disambiguation import QuerySpec
from .embeddings import EmbeddingProvider
from .errors import ValidationError
from .filtering import (
    DEFAULT_BUDGET,
    CandidateSet,
    FilterConfig,
    FilterSession,
    finalize_candidates,
    open_session,
    run_plan_loop,
)


@dataclass(frozen=True)
class PipelineConfig:
    lam: float = DEFAULT_LAMBDA
    max_context: int = EFFECTIVE_CONTEXT
    cluster_threshold: float = DEFAULT_CLUSTER_THRESHOLD
    w_text: float = 0.5
    w_emb: float = 0.5
    filter_budget: int = DEFAULT_BUDGET
    filter_config: FilterConfig = field(default_factory=FilterConfig)
    identity_filter: bool = False  # hand the whole corpus to aggregation
    probe_discards: bool = False  # judge a sample of discarded chunks per step
    max_parallel_judges: int = 4
    seed: int = 0
    aliases: Mapping[str, str] | None = None


@dataclass(frozen=True)
class PipelineResult:
    answer: AnswerSet
    candidate_chunk_ids: tuple[str, ...]
    n_clusters: int
    n_batches: int
    cross_batch_pairs: int
    session: FilterSession | None  # None under the identity filter


def aggregate_candidates(
    corpus: CorpusHandle,
    query: QuerySpec,
    candidates: CandidateSet,
    judge_backend: LlmBackend,
    embedder: EmbeddingProvider | None = None,
    config: PipelineConfig | None = None,
    ledger: BudgetLedger | None = None,
    session: FilterSession | None = None,
) -> PipelineResult:
    """Cluster, batch, judge, and align a finished candidate set."""
    cfg = config or PipelineConfig()
    if not candidates.chunk_ids:
        answer = AnswerSet(query.query_id, (), 0, candidates.trail)
        return PipelineResult(answer, (), 0, 0, 0, session)

    clusters = cluster_candidates(
        corpus,
        candidates.chunk_ids,
        embedder=embedder,
        w_text=cfg.w_text,
        w_emb=cfg.w_emb,
        threshold=cfg.cluster_threshold,
    )
    batches = greedy_batch(order_for_batching(clusters), cfg.max_context, cfg.lam)
    findings = judge_batches(
        batches,
        query,
        corpus,
        judge_backend,
        max_parallel=cfg.max_parallel_judges,
        ledger=ledger,
    )
    answer = align_and_count(
        findings, query, aliases=cfg.aliases, candidate_ids=candidates.chunk_ids
    )
    answer = replace(answer, trail=candidates.trail)
    return PipelineResult(
        answer,
        candidates.chunk_ids,
        len(clusters),
        len(batches),
        candidate_pairs(batches),
        session,
    )


def run_query(
    corpus: CorpusHandle,
    query: QuerySpec,
    judge_backend: LlmBackend,
    planner_backend: LlmBackend | None = None,
    embedder: EmbeddingProvider | None = None,
    config: PipelineConfig | None = None,
    ledger: BudgetLedger | None = None,
) -> PipelineResult:
    """Run one query end to end and return the answer with run statistics.

    With identity_filter the filtering stage is skipped entirely and every
    chunk becomes a candidate, which is the reference configuration for
    union-oracle comparisons.
    """
    cfg = config or PipelineConfig()
    if len(corpus) == 0:
        raise ValidationError("cannot run a query against an empty corpus")

    session: FilterSession | None = None
    if cfg.identity_filter:
        candidates = CandidateSet(tuple(sorted(corpus.chunk_ids)), ())
    else:
        session = open_session(
            corpus,
            query,
            budget=cfg.filter_budget,
            config=cfg.filter_config,
            seed=cfg.seed,
            embedder=embedder,
        )
        run_plan_loop(
            session,
            planner_backend,
            judge_backend=judge_backend if cfg.probe_discards else None,
            ledger=ledger,
        )
        candidates = finalize_candidates(session)

    return aggregate_candidates(
        corpus,
        query,
        candidates,
        judge_backend,
        embedder=embedder,
        config=cfg,
        ledger=ledger,
        session=session,
    )
