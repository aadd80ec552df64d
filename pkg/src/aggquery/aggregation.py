"""Clustering, greedy batching, batch judging, and entity alignment.

The candidate chunks usually exceed one judge context, so they are grouped
into token-bounded batches: similar chunks cluster together, oversized
clusters are split, and small clusters merge into whichever open batch
maximizes a blended similarity/utilization score. Judged findings are then
aligned across batches by canonical surface key and counted.
"""

from __future__ import annotations

import hashlib
import logging
import random
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import BudgetLedger, LlmBackend, complete, loads_first_json, render_prompt, user_request
from .corpus import CorpusHandle
from .disambiguation import QuerySpec
from .embeddings import EmbeddingProvider, HashingEmbedder
from .errors import ResponseFormatError, ValidationError
from .index import cosine_sim, feature_rows_for_chunks, pairwise_cosine

logger = logging.getLogger(__name__)

# Judge context budget in tokens, minus a fixed reserve for the prompt
# scaffolding (instructions, question, condition list).
DEFAULT_MAX_CONTEXT = 8000
PROMPT_OVERHEAD_TOKENS = 400
EFFECTIVE_CONTEXT = DEFAULT_MAX_CONTEXT - PROMPT_OVERHEAD_TOKENS

DEFAULT_LAMBDA = 0.5
DEFAULT_CLUSTER_THRESHOLD = 0.6


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Cluster:
    """A group of chunk ids with a shared centroid and token total.

    member_tokens parallels chunk_ids so splitting and replay never need the
    corpus at hand.
    """

    cluster_id: str
    chunk_ids: tuple[str, ...]
    member_tokens: tuple[int, ...]
    centroid: np.ndarray
    token_total: int

    def __post_init__(self):
        if len(self.chunk_ids) != len(self.member_tokens):
            raise ValidationError("chunk_ids and member_tokens must align")
        if any(t < 0 for t in self.member_tokens):
            raise ValidationError("member token counts must be non-negative")
        if self.token_total != sum(self.member_tokens):
            raise ValidationError(
                f"token_total {self.token_total} != sum of members {sum(self.member_tokens)}"
            )
        if not np.all(np.isfinite(self.centroid)):
            raise ValidationError("cluster centroid must be finite")


def make_cluster(
    cluster_id: str, chunk_ids: Sequence[str], member_tokens: Sequence[int], centroid
) -> Cluster:
    tokens = tuple(int(t) for t in member_tokens)
    return Cluster(
        cluster_id,
        tuple(chunk_ids),
        tokens,
        np.asarray(centroid, dtype=np.float64),
        sum(tokens),
    )


@dataclass(frozen=True, eq=False)
class Batch:
    """Token-bounded group of clusters with a running weighted centroid."""

    batch_id: int
    clusters: tuple[Cluster, ...]
    centroid: np.ndarray
    token_total: int
    max_context: int

    def __post_init__(self):
        if self.token_total > self.max_context:
            raise ValidationError(
                f"batch {self.batch_id} holds {self.token_total} tokens, over {self.max_context}"
            )

    @property
    def chunk_ids(self) -> tuple[str, ...]:
        return tuple(cid for k in self.clusters for cid in k.chunk_ids)

    def fits(self, k: Cluster) -> bool:
        return self.token_total + k.token_total <= self.max_context

    def add(self, k: Cluster) -> "Batch":
        total = self.token_total + k.token_total
        if total:
            centroid = (
                self.token_total / total * self.centroid + k.token_total / total * k.centroid
            )
        else:
            centroid = (self.centroid + k.centroid) / 2.0
        return Batch(self.batch_id, self.clusters + (k,), centroid, total, self.max_context)


def new_batch(batch_id: int, k: Cluster, max_context: int) -> Batch:
    return Batch(batch_id, (k,), np.array(k.centroid, dtype=np.float64), k.token_total, max_context)


@dataclass(frozen=True)
class EntityFinding:
    surface: str
    canonical: str
    chunk_ids: tuple[str, ...]
    verdicts: Mapping[str, bool]
    batch_id: int


@dataclass(frozen=True)
class AnswerEntity:
    canonical: str
    surfaces: tuple[str, ...]
    evidence_chunk_ids: tuple[str, ...]
    verdicts: Mapping[str, bool]


@dataclass(frozen=True)
class AnswerSet:
    query_id: str
    entities: tuple[AnswerEntity, ...]
    count: int
    trail: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.count != len(self.entities):
            raise ValidationError("count must equal the number of entities")


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def cluster_candidates(
    corpus: CorpusHandle,
    chunk_ids: Sequence[str],
    embedder: EmbeddingProvider | None = None,
    w_text: float = 0.5,
    w_emb: float = 0.5,
    threshold: float = DEFAULT_CLUSTER_THRESHOLD,
) -> list[Cluster]:
    """Single-link threshold clustering on the blended cosine.

    Two chunks land in one cluster when some chain of pairwise similarities
    >= threshold connects them. Deterministic for a given candidate set.
    """
    if not chunk_ids:
        raise ValidationError("cannot cluster an empty candidate set")
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must lie in (0, 1], got {threshold}")
    ordered = sorted(chunk_ids)
    chunks = [corpus.chunk(cid) for cid in ordered]
    rows = feature_rows_for_chunks(chunks, embedder or HashingEmbedder(), w_text, w_emb)
    sims = pairwise_cosine(rows)
    n = len(ordered)

    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if sims[i, j] >= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    members: dict[int, list[int]] = {}
    for i in range(n):
        members.setdefault(find(i), []).append(i)

    clusters = []
    width = max(4, len(str(len(members))))
    for pos, root in enumerate(sorted(members)):
        idx = members[root]
        clusters.append(
            make_cluster(
                f"c{pos:0{width}d}",
                [ordered[i] for i in idx],
                [chunks[i].token_count for i in idx],
                rows[idx].mean(axis=0),
            )
        )
    return clusters


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def split_cluster(k: Cluster, max_context: int) -> list[Cluster]:
    """First-fit split in member order into pieces of at most max_context tokens.

    Pieces inherit the parent centroid; a single chunk larger than the limit
    cannot fit any context and is rejected.
    """
    if max_context <= 0:
        raise ValidationError(f"max_context must be positive, got {max_context}")
    if not k.chunk_ids:
        return []
    if k.token_total <= max_context:
        return [k]
    pieces: list[tuple[list[str], list[int]]] = [([], [])]
    for cid, tokens in zip(k.chunk_ids, k.member_tokens):
        if tokens > max_context:
            raise ValidationError(
                f"chunk {cid} has {tokens} tokens and cannot fit a {max_context}-token context"
            )
        ids, sizes = pieces[-1]
        if sum(sizes) + tokens > max_context:
            pieces.append(([cid], [tokens]))
        else:
            ids.append(cid)
            sizes.append(tokens)
    return [
        make_cluster(f"{k.cluster_id}.{r}", ids, sizes, k.centroid)
        for r, (ids, sizes) in enumerate(pieces)
    ]


def merge_score(k: Cluster, b: Batch, lam: float = DEFAULT_LAMBDA, max_context: int | None = None) -> float:
    """Blend of centroid cosine (weight lam) and context utilization (1-lam)."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    m = b.max_context if max_context is None else max_context
    if m <= 0:
        raise ValidationError(f"max_context must be positive, got {m}")
    return lam * cosine_sim(k.centroid, b.centroid) + (1.0 - lam) * (b.token_total + k.token_total) / m


def order_for_batching(clusters: Iterable[Cluster]) -> list[Cluster]:
    """Default insertion order: largest token total first, ties by cluster_id."""
    return sorted(clusters, key=lambda k: (-k.token_total, k.cluster_id))


def greedy_batch(
    clusters: Sequence[Cluster],
    max_context: int = EFFECTIVE_CONTEXT,
    lam: float = DEFAULT_LAMBDA,
) -> list[Batch]:
    """Assign clusters to token-bounded batches in the given order.

    Oversized clusters are split and each piece opens its own batch. A small
    cluster merges into the feasible batch with the highest merge_score (ties
    to the lowest batch index) or opens a new batch when none fits.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    batches: list[Batch] = []
    for k in clusters:
        if k.token_total > max_context:
            for piece in split_cluster(k, max_context):
                batches.append(new_batch(len(batches), piece, max_context))
            continue
        if not k.chunk_ids:
            continue
        best_idx = -1
        best_score = -np.inf
        for idx, b in enumerate(batches):
            if not b.fits(k):
                continue
            score = merge_score(k, b, lam)
            if score > best_score:
                best_idx, best_score = idx, score
        if best_idx >= 0:
            batches[best_idx] = batches[best_idx].add(k)
        else:
            batches.append(new_batch(len(batches), k, max_context))
    return batches


def random_batches(clusters: Sequence[Cluster], max_context: int, seed: int = 0) -> list[Batch]:
    """Baseline: shuffle, then fill sequentially with no similarity scoring."""
    pieces: list[Cluster] = []
    for k in clusters:
        pieces.extend(split_cluster(k, max_context))
    rng = random.Random(seed)
    rng.shuffle(pieces)
    batches: list[Batch] = []
    for k in pieces:
        if batches and batches[-1].fits(k):
            batches[-1] = batches[-1].add(k)
        else:
            batches.append(new_batch(len(batches), k, max_context))
    return batches


def singleton_batches(clusters: Sequence[Cluster], max_context: int) -> list[Batch]:
    """Baseline: no merging at all; every (split) cluster is its own batch."""
    batches: list[Batch] = []
    for k in clusters:
        for piece in split_cluster(k, max_context):
            batches.append(new_batch(len(batches), piece, max_context))
    return batches


def candidate_pairs(batches: Sequence[Batch]) -> int:
    """Cross-batch chunk pairs that entity alignment must reconcile."""
    sizes = [len(b.chunk_ids) for b in batches]
    total = sum(sizes)
    return (total * total - sum(s * s for s in sizes)) // 2


# ---------------------------------------------------------------------------
# Judging
# ---------------------------------------------------------------------------


def batch_tag(query_id: str, chunk_ids: Iterable[str]) -> str:
    """Stable key for scripting judge responses to one batch of one query."""
    digest = hashlib.sha256(",".join(sorted(chunk_ids)).encode("utf-8")).hexdigest()[:16]
    return f"judge-key:{query_id}:{digest}"


def _conditions_block(query: QuerySpec) -> str:
    return "\n".join(
        f"- {c.condition_id}: {c.text}" + (f" [{'; '.join(c.notes)}]" if c.notes else "")
        for c in query.conditions
    )


def judge_batch(
    batch: Batch,
    query: QuerySpec,
    corpus: CorpusHandle,
    backend: LlmBackend,
    ledger: BudgetLedger | None = None,
) -> list[EntityFinding]:
    """Extract entity findings for one batch, corpus-bounded.

    Findings citing chunks outside the batch are dropped and logged; a
    response that is not the expected JSON shape raises with the raw text.
    """
    allowed = set(batch.chunk_ids)
    blocks = "\n\n".join(
        f"BEGIN CHUNK {cid}\n{corpus.chunk(cid).text}\nEND CHUNK {cid}" for cid in batch.chunk_ids
    )
    req = user_request(
        "judge",
        render_prompt(
            "judge",
            question=query.raw_text,
            entity_type=query.entity_type,
            batch_tag=batch_tag(query.query_id, batch.chunk_ids),
            conditions=_conditions_block(query),
            chunks=blocks,
        ),
    )
    response = complete(req, backend, ledger)
    obj = loads_first_json(response.text)
    if not isinstance(obj, dict) or not isinstance(obj.get("findings"), list):
        raise ResponseFormatError(
            "judge response must be a JSON object with a 'findings' list", raw=response.text
        )
    known = {c.condition_id for c in query.conditions}
    findings = []
    for row in obj["findings"]:
        if not isinstance(row, dict) or not isinstance(row.get("surface"), str) or not row["surface"]:
            raise ResponseFormatError("finding without a surface string", raw=response.text)
        evidence = row.get("evidence", [])
        if not isinstance(evidence, list):
            raise ResponseFormatError("finding evidence must be a list", raw=response.text)
        foreign = sorted(set(evidence) - allowed)
        if foreign:
            # A citation outside the batch breaks the corpus-bounded contract.
            logger.warning(
                "batch %d: rejected finding %r citing chunks outside the batch: %s",
                batch.batch_id,
                row["surface"],
                foreign,
            )
            continue
        cited = sorted(set(evidence))
        if not cited:
            logger.warning("batch %d: rejected finding %r with no evidence", batch.batch_id, row["surface"])
            continue
        verdicts_raw = row.get("verdicts", {})
        if not isinstance(verdicts_raw, dict):
            raise ResponseFormatError("finding verdicts must be an object", raw=response.text)
        verdicts = {}
        for cond, value in verdicts_raw.items():
            if cond not in known:
                logger.warning("batch %d: dropping verdict for unknown condition %r", batch.batch_id, cond)
                continue
            verdicts[cond] = bool(value)
        findings.append(
            EntityFinding(
                surface=row["surface"],
                canonical=canonical_key(row["surface"]),
                chunk_ids=tuple(cited),
                verdicts=verdicts,
                batch_id=batch.batch_id,
            )
        )
    return findings


def judge_batches(
    batches: Sequence[Batch],
    query: QuerySpec,
    corpus: CorpusHandle,
    backend: LlmBackend,
    max_parallel: int = 4,
    ledger: BudgetLedger | None = None,
) -> list[EntityFinding]:
    """Judge every batch, possibly concurrently; merge ascending batch_id."""
    if max_parallel < 1:
        raise ValidationError(f"max_parallel must be >= 1, got {max_parallel}")
    if not batches:
        return []
    ordered = sorted(batches, key=lambda b: b.batch_id)
    if max_parallel == 1 or len(ordered) == 1:
        results = [judge_batch(b, query, corpus, backend, ledger) for b in ordered]
    else:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            futures = [pool.submit(judge_batch, b, query, corpus, backend, ledger) for b in ordered]
            results = [f.result() for f in futures]
    return [finding for rows in results for finding in rows]


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

_WS_RE = re.compile(r"\s+")
_STRIP_CHARS = string.punctuation + "‘’“”«» \t\n"


def canonical_key(surface: str, aliases: Mapping[str, str] | None = None) -> str:
    """Casefold, collapse whitespace, strip surrounding punctuation, apply aliases."""
    key = _WS_RE.sub(" ", surface.casefold()).strip()
    stripped = key.strip(_STRIP_CHARS)
    if stripped:
        key = stripped
    if aliases:
        # Both sides normalized, so "Big Blue" -> "IBM" lands on the same
        # key as a finding that surfaced "IBM" directly.
        folded = {canonical_key(a): canonical_key(v) for a, v in aliases.items()}
        key = folded.get(key, key)
    return key


def align_and_count(
    findings: Iterable[EntityFinding],
    query: QuerySpec,
    aliases: Mapping[str, str] | None = None,
    candidate_ids: Iterable[str] | None = None,
) -> AnswerSet:
    """Merge findings by canonical key and keep entities whose combined
    verdicts satisfy the query's condition composition.

    Verdicts merge by OR: one batch affirming a condition outweighs another
    batch that saw nothing. Output is sorted, so judging order never matters.
    """
    allowed = set(candidate_ids) if candidate_ids is not None else None
    merged: dict[str, dict] = {}
    for f in findings:
        if allowed is not None:
            outside = [cid for cid in f.chunk_ids if cid not in allowed]
            if outside:
                raise ValidationError(
                    f"finding {f.surface!r} cites chunks outside the candidate set: {sorted(outside)}"
                )
        key = canonical_key(f.surface, aliases)
        slot = merged.setdefault(key, {"surfaces": set(), "evidence": set(), "verdicts": {}})
        slot["surfaces"].add(f.surface)
        slot["evidence"].update(f.chunk_ids)
        for cond, value in f.verdicts.items():
            slot["verdicts"][cond] = slot["verdicts"].get(cond, False) or bool(value)
    entities = []
    for key in sorted(merged):
        slot = merged[key]
        if not query.composition.evaluate(slot["verdicts"]):
            continue
        entities.append(
            AnswerEntity(
                canonical=key,
                surfaces=tuple(sorted(slot["surfaces"])),
                evidence_chunk_ids=tuple(sorted(slot["evidence"])),
                verdicts=dict(sorted(slot["verdicts"].items())),
            )
        )
    return AnswerSet(query.query_id, tuple(entities), len(entities))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def answer_set_to_json(answer: AnswerSet) -> dict:
    return {
        "query_id": answer.query_id,
        "count": answer.count,
        "entities": [
            {
                "canonical": e.canonical,
                "surfaces": list(e.surfaces),
                "evidence_chunk_ids": list(e.evidence_chunk_ids),
                "verdicts": dict(e.verdicts),
            }
            for e in answer.entities
        ],
        "trail": [dict(step) for step in answer.trail],
    }


def answer_set_from_json(obj: dict) -> AnswerSet:
    entities = tuple(
        AnswerEntity(
            canonical=e["canonical"],
            surfaces=tuple(e["surfaces"]),
            evidence_chunk_ids=tuple(e["evidence_chunk_ids"]),
            verdicts=dict(e["verdicts"]),
        )
        for e in obj["entities"]
    )
    return AnswerSet(obj["query_id"], entities, obj["count"], tuple(obj.get("trail", ())))
