"""Deterministic synthetic fixtures: marker corpora and a marker-driven judge.

Chunk texts carry inline markers such as ``[[E:Widget-7|phi1,!phi2]]``
(entity Widget-7; phi1 affirmed, phi2 contradicted). MarkerJudgeBackend
answers judge and probe prompts purely from those markers, so whole-pipeline
runs are reproducible offline and a per-chunk brute-force union is easy to
state as an oracle.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass

from .backends import Completion, CompletionRequest, approx_usage
from .corpus import CorpusHandle, Document, ingest_documents
from .disambiguation import Condition, CompositionNode, QuerySpec, conj, disj, leaf
from .errors import UnscriptedPromptError, ValidationError

MARKER_RE = re.compile(r"\[\[E:([^|\]]+)(?:\|([^\]]*))?\]\]")
_CHUNK_BLOCK_RE = re.compile(r"BEGIN CHUNK (\S+)\n(.*?)\nEND CHUNK \1", re.DOTALL)


def parse_markers(text: str) -> list[tuple[str, dict[str, bool]]]:
    """All (surface, verdicts) markers in a text, in order of appearance."""
    out = []
    for match in MARKER_RE.finditer(text):
        surface = match.group(1).strip()
        if not surface:
            raise ValidationError(f"marker with empty entity name: {match.group(0)!r}")
        verdicts: dict[str, bool] = {}
        body = match.group(2) or ""
        for part in body.split(","):
            part = part.strip()
            if not part:
                continue
            if part.startswith("!"):
                verdicts[part[1:].strip()] = False
            else:
                verdicts[part] = True
        out.append((surface, verdicts))
    return out


class MarkerJudgeBackend:
    """Judge/probe backend that reads inline markers instead of a model.

    Judge prompts get one finding per marker, citing the chunk the marker
    sits in. Probe prompts get the ids of chunks holding any marker.
    """

    def generate(self, req: CompletionRequest) -> Completion:
        prompt = req.prompt_text()
        chunks = _CHUNK_BLOCK_RE.findall(prompt)
        if req.purpose == "judge":
            findings = []
            for chunk_id, text in chunks:
                for surface, verdicts in parse_markers(text):
                    findings.append(
                        {"surface": surface, "verdicts": verdicts, "evidence": [chunk_id]}
                    )
            response = json.dumps({"findings": findings})
        elif req.purpose == "probe":
            relevant = [cid for cid, text in chunks if MARKER_RE.search(text)]
            response = json.dumps({"relevant_chunk_ids": relevant})
        else:
            raise UnscriptedPromptError(
                f"marker judge only answers judge/probe prompts, got {req.purpose!r}"
            )
        return Completion(response, approx_usage(req, response))


# ---------------------------------------------------------------------------
# Fixture builders
# ---------------------------------------------------------------------------

_FILLER = (
    "ledger harbor quartz meadow copper lantern orchard gravel summit velvet "
    "juniper marble tundra ember willow canyon saffron boulder drift pylon"
).split()


@dataclass(frozen=True)
class MarkerFixture:
    corpus: CorpusHandle
    query: QuerySpec
    gold_entities: frozenset[str]  # canonical keys satisfying the composition
    gold_evidence: frozenset[str]  # chunk ids mentioning a gold entity
    y: int


def _composition(conditions: tuple[str, ...], op: str | None) -> CompositionNode:
    leaves = [leaf(c) for c in conditions]
    if len(leaves) == 1:
        return leaves[0]
    if op == "OR":
        return disj(*leaves)
    return conj(*leaves)


def build_marker_fixture(
    seed: int,
    n_chunks: int = 30,
    n_entities: int = 10,
    conditions: tuple[str, ...] = ("phi1",),
    op: str | None = None,
    corpus_id: str | None = None,
) -> MarkerFixture:
    """Seeded corpus of marker chunks plus the query and its ground truth.

    Every entity is mentioned in 1-3 chunks; each mention affirms or
    contradicts a random subset of conditions. Ground truth merges verdicts
    by OR (affirmed anywhere wins) and keeps entities satisfying the
    composition, mirroring the documented alignment semantics.
    """
    if n_chunks < 1 or n_entities < 1:
        raise ValidationError("need at least one chunk and one entity")
    rng = random.Random(seed)
    names = [f"Entity-{chr(65 + i % 26)}{i:02d}" for i in range(n_entities)]
    mentions: dict[int, list[tuple[str, dict[str, bool]]]] = {i: [] for i in range(n_chunks)}
    merged: dict[str, dict[str, bool]] = {name: {} for name in names}
    mentioned_in: dict[str, set[int]] = {name: set() for name in names}

    for name in names:
        for _ in range(rng.randint(1, 3)):
            chunk_idx = rng.randrange(n_chunks)
            verdicts: dict[str, bool] = {}
            for cond in conditions:
                state = rng.random()
                if state < 0.5:
                    verdicts[cond] = True
                elif state < 0.7:
                    verdicts[cond] = False
                # else: the mention says nothing about this condition
            mentions[chunk_idx].append((name, verdicts))
            mentioned_in[name].add(chunk_idx)
            for cond, value in verdicts.items():
                merged[name][cond] = merged[name].get(cond, False) or value

    composition = _composition(conditions, op)
    gold_names = [n for n in names if composition.evaluate(merged[n])]

    docs = []
    for i in range(n_chunks):
        words = rng.sample(_FILLER, rng.randint(4, 8))
        parts = [" ".join(words)]
        for name, verdicts in mentions[i]:
            body = ",".join(cond if v else f"!{cond}" for cond, v in sorted(verdicts.items()))
            parts.append(f"[[E:{name}|{body}]]" if body else f"[[E:{name}]]")
        parts.append(" ".join(rng.sample(_FILLER, 3)))
        docs.append(Document(f"d{i:03d}", " ".join(parts)))
    corpus = ingest_documents(docs, corpus_id=corpus_id or f"marker-{seed}")

    query = QuerySpec(
        query_id=f"syn{seed}",
        raw_text=f"How many tracked projects meet {' and '.join(conditions)}?",
        entity_type="project",
        conditions=tuple(Condition(c, f"satisfies flag {c}") for c in conditions),
        composition=composition,
    )
    evidence = {
        f"d{i:03d}#0000" for name in gold_names for i in mentioned_in[name]
    }
    return MarkerFixture(
        corpus=corpus,
        query=query,
        gold_entities=frozenset(n.casefold() for n in gold_names),
        gold_evidence=frozenset(evidence),
        y=len(gold_names),
    )


def dispersed_evidence_fixture() -> MarkerFixture:
    """Three evidence chunks with almost no shared vocabulary.

    The query's words all sit in one chunk, so a top-1 lexical ranker feeds
    the judge a single chunk and the count comes up short; reading the whole
    corpus finds all three entities.
    """
    docs = [
        Document(
            "d000",
            "Field instruments record tremor data at the station. [[E:Array-North|phi1]]",
        ),
        Document(
            "d001",
            "The seismometer logs ground motion overnight. [[E:Array-South|phi1]]",
        ),
        Document(
            "d002",
            "A geophone captures subsurface vibration on schedule. [[E:Array-West|phi1]]",
        ),
        Document("d003", "Cafeteria menus rotate weekly without notice."),
        Document("d004", "Parking permits renew each quarter at the office."),
    ]
    corpus = ingest_documents(docs, corpus_id="dispersed")
    query = QuerySpec(
        query_id="disp1",
        raw_text="How many instruments record tremor data?",
        entity_type="instrument",
        conditions=(Condition("phi1", "records tremor data"),),
        composition=leaf("phi1"),
    )
    return MarkerFixture(
        corpus=corpus,
        query=query,
        gold_entities=frozenset({"array-north", "array-south", "array-west"}),
        gold_evidence=frozenset({"d000#0000", "d001#0000", "d002#0000"}),
        y=3,
    )
