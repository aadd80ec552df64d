"""Iterative completeness-aware corpus filtering.

A session advances through immutable snapshots: every tool application maps
the active retained set to a subset and records what was discarded, so no
chunk is ever lost. Rollback moves the active pointer to any earlier
snapshot without deleting the later ones, and the recorded trail replays to
the identical snapshot sequence.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .backends import (
    BudgetLedger,
    LlmBackend,
    complete,
    loads_first_json,
    render_prompt,
    user_request,
)
from .corpus import CorpusHandle
from .disambiguation import QuerySpec, spec_from_json, spec_to_json
from .embeddings import EmbeddingProvider, HashingEmbedder
from .errors import NotFoundError, ResponseFormatError, ValidationError
from .index import cosine_sim
from .tokens import analyze

logger = logging.getLogger(__name__)

# Four judge contexts of 7600 effective tokens; see aggregation.EFFECTIVE_CONTEXT.
DEFAULT_HANDOFF_TOKENS = 4 * 7600
DEFAULT_BUDGET = 12


@dataclass(frozen=True)
class FilterConfig:
    floor_fraction: float = 0.01
    sample_size: int = 5
    probe_sample_size: int = 5
    handoff_tokens: int = DEFAULT_HANDOFF_TOKENS
    handoff_count: int | None = None
    summary_chars: int = 80


# ---------------------------------------------------------------------------
# Snapshots and history
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolInvocation:
    tool: str
    params: Mapping
    target_snapshot_id: int

    def to_json(self) -> dict:
        return {"tool": self.tool, "params": dict(self.params), "target": self.target_snapshot_id}

    @classmethod
    def from_json(cls, obj: dict) -> "ToolInvocation":
        return cls(obj["tool"], obj["params"], obj["target"])


@dataclass(frozen=True)
class Snapshot:
    snapshot_id: int
    parent_id: int | None
    retained: frozenset[str]
    discarded: frozenset[str]
    invocation: ToolInvocation | None

    def to_json(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "parent_id": self.parent_id,
            "retained": sorted(self.retained),
            "discarded": sorted(self.discarded),
            "invocation": self.invocation.to_json() if self.invocation else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Snapshot":
        inv = obj.get("invocation")
        return cls(
            obj["snapshot_id"],
            obj["parent_id"],
            frozenset(obj["retained"]),
            frozenset(obj["discarded"]),
            ToolInvocation.from_json(inv) if inv else None,
        )


@dataclass(frozen=True)
class Observation:
    snapshot_id: int
    retained_count: int
    discarded_count: int
    retained_tokens: int
    retained_samples: tuple[tuple[str, str], ...]
    discarded_samples: tuple[tuple[str, str], ...]
    floor_flag: bool

    def to_json(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "retained_count": self.retained_count,
            "discarded_count": self.discarded_count,
            "retained_tokens": self.retained_tokens,
            "retained_samples": [list(s) for s in self.retained_samples],
            "discarded_samples": [list(s) for s in self.discarded_samples],
            "floor_flag": self.floor_flag,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Observation":
        return cls(
            obj["snapshot_id"],
            obj["retained_count"],
            obj["discarded_count"],
            obj["retained_tokens"],
            tuple((s[0], s[1]) for s in obj["retained_samples"]),
            tuple((s[0], s[1]) for s in obj["discarded_samples"]),
            obj["floor_flag"],
        )


@dataclass(frozen=True)
class HistoryEvent:
    kind: str  # "apply" | "rollback" | "probe"
    snapshot_id: int
    invocation: ToolInvocation | None = None
    observation: Observation | None = None
    note: str = ""

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "snapshot_id": self.snapshot_id,
            "invocation": self.invocation.to_json() if self.invocation else None,
            "observation": self.observation.to_json() if self.observation else None,
            "note": self.note,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HistoryEvent":
        return cls(
            obj["kind"],
            obj["snapshot_id"],
            ToolInvocation.from_json(obj["invocation"]) if obj.get("invocation") else None,
            Observation.from_json(obj["observation"]) if obj.get("observation") else None,
            obj.get("note", ""),
        )


@dataclass(frozen=True)
class OverfilterReport:
    floor: bool
    probe: bool | None  # None when no judge backend was available
    probed_chunk_ids: tuple[str, ...] = ()
    relevant_chunk_ids: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return self.floor or bool(self.probe)


@dataclass(frozen=True)
class PlanDecision:
    action: str  # "tool" | "rollback" | "done"
    invocation: ToolInvocation | None = None
    rollback_to: int | None = None
    note: str = ""
    exhausted: bool = False


@dataclass(frozen=True)
class CandidateSet:
    chunk_ids: tuple[str, ...]
    trail: tuple[dict, ...]


# ---------------------------------------------------------------------------
# Tool registry
# ---------------------------------------------------------------------------


def _require(params: Mapping, tool: str, schema: dict[str, type]) -> None:
    for name, kind in schema.items():
        if name not in params:
            raise ValidationError(f"{tool}: missing parameter {name!r}")
        if not isinstance(params[name], kind):
            raise ValidationError(f"{tool}: parameter {name!r} must be {kind.__name__}")
    extra = set(params) - set(schema)
    if extra:
        raise ValidationError(f"{tool}: unknown parameter {sorted(extra)[0]!r}")


def _require_terms(params: Mapping, tool: str) -> list[str]:
    terms = params["terms"]
    if not terms or not all(isinstance(t, str) and t for t in terms):
        raise ValidationError(f"{tool}: parameter 'terms' must be a non-empty list of strings")
    return list(terms)


def _tool_exact_match(session: "FilterSession", ids: frozenset[str], params: Mapping) -> set[str]:
    term = params["term"]
    return {cid for cid in ids if term in session.corpus.chunk(cid).text}


def _tool_keyword_any(session: "FilterSession", ids: frozenset[str], params: Mapping) -> set[str]:
    terms = [t.casefold() for t in params["terms"]]
    out = set()
    for cid in ids:
        text = session.corpus.chunk(cid).text.casefold()
        if any(t in text for t in terms):
            out.add(cid)
    return out


def _tool_keyword_all(session: "FilterSession", ids: frozenset[str], params: Mapping) -> set[str]:
    terms = [t.casefold() for t in params["terms"]]
    out = set()
    for cid in ids:
        text = session.corpus.chunk(cid).text.casefold()
        if all(t in text for t in terms):
            out.add(cid)
    return out


def _tool_regex(session: "FilterSession", ids: frozenset[str], params: Mapping) -> set[str]:
    pattern = re.compile(params["pattern"])
    return {cid for cid in ids if pattern.search(session.corpus.chunk(cid).text)}


def _tool_fuzzy_match(session: "FilterSession", ids: frozenset[str], params: Mapping) -> set[str]:
    term_tokens = analyze(params["term"])
    term = term_tokens[0] if term_tokens else params["term"].casefold()
    encoded = kernels.encode_text(term)
    max_norm = params["max_norm_edit"]
    out = set()
    for cid in ids:
        flat, offsets = session.token_arrays(cid)
        if kernels.fuzzy_any_token(flat, offsets, encoded, max_norm):
            out.add(cid)
    return out


def _tool_embed_sim(session: "FilterSession", ids: frozenset[str], params: Mapping) -> set[str]:
    query_vec = session.embedder.embed([params["query_text"]])[0]
    min_cos = params["min_cosine"]
    out = set()
    for cid in sorted(ids):
        if cosine_sim(query_vec, session.embedding(cid)) >= min_cos:
            out.add(cid)
    return out


def _validate_exact(params, tool):
    _require(params, tool, {"term": str})
    if not params["term"]:
        raise ValidationError(f"{tool}: parameter 'term' must be non-empty")


def _validate_terms(params, tool):
    _require(params, tool, {"terms": list})
    _require_terms(params, tool)


def _validate_regex(params, tool):
    _require(params, tool, {"pattern": str})
    try:
        re.compile(params["pattern"])
    except re.error as exc:
        raise ValidationError(f"{tool}: parameter 'pattern' is not a valid regex: {exc}") from exc


def _validate_fuzzy(params, tool):
    _require(params, tool, {"term": str, "max_norm_edit": float})
    if not params["term"]:
        raise ValidationError(f"{tool}: parameter 'term' must be non-empty")
    if not 0.0 <= params["max_norm_edit"] <= 1.0:
        raise ValidationError(f"{tool}: parameter 'max_norm_edit' must lie in [0, 1]")


def _validate_embed(params, tool):
    _require(params, tool, {"query_text": str, "min_cosine": float})
    if not params["query_text"]:
        raise ValidationError(f"{tool}: parameter 'query_text' must be non-empty")
    if not -1.0 <= params["min_cosine"] <= 1.0:
        raise ValidationError(f"{tool}: parameter 'min_cosine' must lie in [-1, 1]")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    doc: str
    validate: Callable[[Mapping, str], None]
    run: Callable[["FilterSession", frozenset[str], Mapping], set[str]]


TOOLS: dict[str, ToolSpec] = {
    spec.name: spec
    for spec in (
        ToolSpec(
            "exact_match",
            'exact_match(term) - keep chunks whose text contains the exact, case-sensitive string. args: {"term": "..."}',
            _validate_exact,
            _tool_exact_match,
        ),
        ToolSpec(
            "keyword_any",
            'keyword_any(terms) - keep chunks containing ANY term, case-insensitive. args: {"terms": ["...", "..."]}',
            _validate_terms,
            _tool_keyword_any,
        ),
        ToolSpec(
            "keyword_all",
            'keyword_all(terms) - keep chunks containing EVERY term, case-insensitive. args: {"terms": ["...", "..."]}',
            _validate_terms,
            _tool_keyword_all,
        ),
        ToolSpec(
            "regex",
            'regex(pattern) - keep chunks whose text matches the regular expression. args: {"pattern": "..."}',
            _validate_regex,
            _tool_regex,
        ),
        ToolSpec(
            "fuzzy_match",
            'fuzzy_match(term, max_norm_edit) - keep chunks with a token within the given normalized edit distance of term. args: {"term": "...", "max_norm_edit": 0.2}',
            _validate_fuzzy,
            _tool_fuzzy_match,
        ),
        ToolSpec(
            "embed_sim",
            'embed_sim(query_text, min_cosine) - keep chunks whose embedding cosine with query_text is at least min_cosine. args: {"query_text": "...", "min_cosine": 0.3}',
            _validate_embed,
            _tool_embed_sim,
        ),
    )
}


def describe_tools() -> str:
    return "\n".join(f"- {TOOLS[name].doc}" for name in sorted(TOOLS))


def validate_invocation(inv: ToolInvocation) -> None:
    spec = TOOLS.get(inv.tool)
    if spec is None:
        raise NotFoundError(f"unknown tool {inv.tool!r}; registry: {sorted(TOOLS)}")
    # JSON planners send integers where floats are meant; coerce before checking.
    params = dict(inv.params)
    for key, value in params.items():
        if isinstance(value, bool):
            continue
        if isinstance(value, int) and key in ("max_norm_edit", "min_cosine"):
            params[key] = float(value)
    spec.validate(params, inv.tool)


def _coerced_params(inv: ToolInvocation) -> dict:
    params = dict(inv.params)
    for key in ("max_norm_edit", "min_cosine"):
        if key in params and isinstance(params[key], int) and not isinstance(params[key], bool):
            params[key] = float(params[key])
    return params


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


class FilterSession:
    """One query's filtering state: snapshot list, active pointer, history.

    Single logical writer; snapshots are immutable and may be read
    concurrently (the UI polls the timeline while a step runs).
    """

    def __init__(
        self,
        corpus: CorpusHandle,
        query: QuerySpec,
        budget: int = DEFAULT_BUDGET,
        config: FilterConfig | None = None,
        seed: int = 0,
        embedder: EmbeddingProvider | None = None,
    ):
        if budget < 0:
            raise ValidationError(f"budget must be >= 0, got {budget}")
        if len(corpus) == 0:
            raise ValidationError("cannot open a session on an empty corpus")
        self.corpus = corpus
        self.query = query
        self.budget = budget
        self.config = config or FilterConfig()
        self.seed = seed
        self.embedder = embedder or HashingEmbedder()
        self.snapshots: list[Snapshot] = [
            Snapshot(0, None, frozenset(corpus.chunk_ids), frozenset(), None)
        ]
        self.active_id = 0
        self.history: list[HistoryEvent] = []
        self.used_steps = 0
        self._token_arrays: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._embeddings: dict[str, np.ndarray] = {}

    # -- caches ------------------------------------------------------------

    def token_arrays(self, chunk_id: str) -> tuple[np.ndarray, np.ndarray]:
        cached = self._token_arrays.get(chunk_id)
        if cached is None:
            cached = kernels.encode_tokens(analyze(self.corpus.chunk(chunk_id).text))
            self._token_arrays[chunk_id] = cached
        return cached

    def embedding(self, chunk_id: str) -> np.ndarray:
        cached = self._embeddings.get(chunk_id)
        if cached is None:
            cached = self.embedder.embed([self.corpus.chunk(chunk_id).text])[0]
            self._embeddings[chunk_id] = cached
        return cached

    # -- snapshot access ----------------------------------------------------

    def snapshot(self, snapshot_id: int) -> Snapshot:
        if not 0 <= snapshot_id < len(self.snapshots):
            raise NotFoundError(f"no snapshot {snapshot_id}; have 0..{len(self.snapshots) - 1}")
        return self.snapshots[snapshot_id]

    @property
    def active(self) -> Snapshot:
        return self.snapshots[self.active_id]

    def retained_tokens(self, snapshot_id: int | None = None) -> int:
        snap = self.active if snapshot_id is None else self.snapshot(snapshot_id)
        return sum(self.corpus.chunk(cid).token_count for cid in snap.retained)

    def floor_count(self) -> float:
        return self.config.floor_fraction * len(self.snapshots[0].retained)

    def _summary(self, chunk_id: str) -> str:
        text = " ".join(self.corpus.chunk(chunk_id).text.split())
        return text[: self.config.summary_chars]

    def _sample(self, ids: Iterable[str], snapshot_id: int, tag: str) -> tuple[tuple[str, str], ...]:
        ordered = sorted(ids)
        k = min(self.config.sample_size, len(ordered))
        rng = random.Random(f"{self.seed}:{snapshot_id}:{tag}")
        return tuple((cid, self._summary(cid)) for cid in sorted(rng.sample(ordered, k)))


def open_session(
    corpus: CorpusHandle,
    query: QuerySpec,
    budget: int = DEFAULT_BUDGET,
    config: FilterConfig | None = None,
    seed: int = 0,
    embedder: EmbeddingProvider | None = None,
) -> FilterSession:
    return FilterSession(corpus, query, budget, config, seed, embedder)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def observe_snapshot(session: FilterSession, snapshot_id: int) -> Observation:
    snap = session.snapshot(snapshot_id)
    retained_count = len(snap.retained)
    floor = retained_count == 0 or retained_count < session.floor_count()
    return Observation(
        snapshot_id=snapshot_id,
        retained_count=retained_count,
        discarded_count=len(snap.discarded),
        retained_tokens=session.retained_tokens(snapshot_id),
        retained_samples=session._sample(snap.retained, snapshot_id, "retained"),
        discarded_samples=session._sample(snap.discarded, snapshot_id, "discarded"),
        floor_flag=floor,
    )


def apply_tool(session: FilterSession, inv: ToolInvocation) -> int:
    """Run a tool against the active snapshot, appending the result snapshot."""
    validate_invocation(inv)
    if inv.target_snapshot_id != session.active_id:
        raise ValidationError(
            f"invocation targets snapshot {inv.target_snapshot_id} but "
            f"{session.active_id} is active; roll back first"
        )
    parent = session.active
    retained = TOOLS[inv.tool].run(session, parent.retained, _coerced_params(inv))
    if not retained <= parent.retained:
        raise ValidationError(f"tool {inv.tool} returned chunks outside its input")
    new_id = len(session.snapshots)
    snap = Snapshot(
        snapshot_id=new_id,
        parent_id=parent.snapshot_id,
        retained=frozenset(retained),
        discarded=parent.retained - retained,
        invocation=inv,
    )
    session.snapshots.append(snap)
    session.active_id = new_id
    session.used_steps += 1
    obs = observe_snapshot(session, new_id)
    session.history.append(HistoryEvent("apply", new_id, invocation=inv, observation=obs))
    logger.info(
        "%s kept %d/%d chunks (snapshot %d)", inv.tool, len(retained), len(parent.retained), new_id
    )
    return new_id


def rollback(session: FilterSession, snapshot_id: int) -> int:
    """Point the session back at an earlier snapshot; nothing is deleted."""
    snap = session.snapshot(snapshot_id)
    session.active_id = snap.snapshot_id
    session.used_steps += 1
    session.history.append(
        HistoryEvent("rollback", snap.snapshot_id, note=f"rolled back to snapshot {snapshot_id}")
    )
    return session.active_id


def detect_overfilter(
    session: FilterSession,
    judge_backend: LlmBackend | None = None,
    ledger: BudgetLedger | None = None,
) -> OverfilterReport:
    """Check the active snapshot for over-filtering.

    Floor signal: retained fell below floor_fraction of snapshot 0.  Probe
    signal: a judge reads a seeded sample of discarded chunks and reports any
    that still look relevant; skipped (None) without a judge backend.
    """
    if session.used_steps == 0:
        raise ValidationError("detect_overfilter needs at least one applied tool")
    snap = session.active
    floor = len(snap.retained) == 0 or len(snap.retained) < session.floor_count()

    probe: bool | None = None
    probed: tuple[str, ...] = ()
    relevant: tuple[str, ...] = ()
    if judge_backend is not None:
        discarded = sorted(snap.discarded)
        k = min(session.config.probe_sample_size, len(discarded))
        if k:
            rng = random.Random(f"{session.seed}:probe:{snap.snapshot_id}")
            probed = tuple(sorted(rng.sample(discarded, k)))
            blocks = "\n\n".join(
                f"BEGIN CHUNK {cid}\n{session.corpus.chunk(cid).text}\nEND CHUNK {cid}"
                for cid in probed
            )
            conditions = "\n".join(
                f"- {c.condition_id}: {c.text}" + (f" [{'; '.join(c.notes)}]" if c.notes else "")
                for c in session.query.conditions
            )
            req = user_request(
                "probe",
                render_prompt(
                    "probe",
                    question=session.query.raw_text,
                    conditions=conditions,
                    chunks=blocks,
                ),
            )
            response = complete(req, judge_backend, ledger)
            obj = loads_first_json(response.text)
            raw_ids = obj.get("relevant_chunk_ids", []) if isinstance(obj, dict) else []
            relevant = tuple(sorted(set(raw_ids) & set(probed)))
            probe = bool(relevant)
        else:
            probe = False
    report = OverfilterReport(floor=floor, probe=probe, probed_chunk_ids=probed, relevant_chunk_ids=relevant)
    session.history.append(
        HistoryEvent(
            "probe",
            snap.snapshot_id,
            note=json.dumps(
                {
                    "floor": report.floor,
                    "probe": report.probe,
                    "probed": list(report.probed_chunk_ids),
                    "relevant": list(report.relevant_chunk_ids),
                }
            ),
        )
    )
    return report


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

_PLAN_STOPWORDS = frozenset(
    "how many the a an of in on for with are is was were do does did have has to and or".split()
)


def _fallback_plan(session: FilterSession) -> PlanDecision:
    """Deterministic offline planner: one keyword pass, rollback on floor
    breach, then hand off."""
    obs = observe_snapshot(session, session.active_id)
    last = session.history[-1] if session.history else None
    if obs.floor_flag and session.used_steps > 0 and (last is None or last.kind != "rollback"):
        floor = session.floor_count()
        above = [s.snapshot_id for s in session.snapshots if len(s.retained) > floor]
        if above:
            target = max(above)
            return PlanDecision("rollback", rollback_to=target, note="retained set under floor")
    if session.used_steps == 0:
        terms = [t for t in analyze(session.query.raw_text) if t not in _PLAN_STOPWORDS][:8]
        if terms:
            inv = ToolInvocation("keyword_any", {"terms": terms}, session.active_id)
            return PlanDecision("tool", invocation=inv, note="query keywords")
    return PlanDecision("done", note="no further safe narrowing available")


def _history_lines(session: FilterSession, limit: int = 6) -> str:
    lines = []
    for event in session.history[-limit:]:
        if event.kind == "apply" and event.invocation and event.observation:
            lines.append(
                f"- applied {event.invocation.tool}{dict(event.invocation.params)} -> "
                f"snapshot {event.snapshot_id}: {event.observation.retained_count} retained, "
                f"{event.observation.discarded_count} discarded"
                + (" [FLOOR BREACH]" if event.observation.floor_flag else "")
            )
        elif event.kind == "rollback":
            lines.append(f"- rolled back to snapshot {event.snapshot_id}")
        elif event.kind == "probe":
            lines.append(f"- over-filter probe on snapshot {event.snapshot_id}: {event.note}")
    return "\n".join(lines) if lines else "- none yet"


def plan_step(
    session: FilterSession,
    backend: LlmBackend | None = None,
    ledger: BudgetLedger | None = None,
) -> PlanDecision:
    """Decide the next move: a tool, a rollback, or handoff to aggregation."""
    if session.used_steps >= session.budget:
        return PlanDecision("done", note="iteration budget exhausted", exhausted=True)
    tokens = session.retained_tokens()
    count = len(session.active.retained)
    # An empty retained set is never a valid handoff; let the planner widen.
    if count > 0 and (
        tokens <= session.config.handoff_tokens
        or (session.config.handoff_count is not None and count <= session.config.handoff_count)
    ):
        return PlanDecision(
            "done", note=f"retained set small enough ({count} chunks, {tokens} tokens)"
        )
    if backend is None:
        return _fallback_plan(session)

    obs = observe_snapshot(session, session.active_id)
    conditions = "\n".join(
        f"- {c.condition_id}: {c.text}" + (f" [{'; '.join(c.notes)}]" if c.notes else "")
        for c in session.query.conditions
    )
    samples = "\n".join(f"- {cid}: {summary}" for cid, summary in obs.retained_samples) or "- none"
    req = user_request(
        "plan",
        render_prompt(
            "plan",
            question=session.query.raw_text,
            conditions=conditions,
            tools=describe_tools(),
            snapshot_summary=(
                f"snapshot {session.active_id}: {count} of {len(session.snapshots[0].retained)} "
                f"chunks retained, {tokens} tokens"
                + (" [FLOOR BREACH]" if obs.floor_flag else "")
            ),
            history=_history_lines(session),
            samples=samples,
        ),
    )
    response = complete(req, backend, ledger)
    obj = loads_first_json(response.text)
    if not isinstance(obj, dict):
        raise ResponseFormatError("plan must be a JSON object", raw=response.text)
    action = obj.get("action")
    note = obj.get("note", "")
    if action == "tool":
        try:
            inv = ToolInvocation(obj["tool"], obj.get("args", {}), session.active_id)
        except KeyError as exc:
            raise ResponseFormatError(f"plan missing {exc}", raw=response.text) from exc
        return PlanDecision("tool", invocation=inv, note=note)
    if action == "rollback":
        try:
            return PlanDecision("rollback", rollback_to=int(obj["to_snapshot"]), note=note)
        except (KeyError, TypeError, ValueError) as exc:
            raise ResponseFormatError(f"bad rollback plan: {exc}", raw=response.text) from exc
    if action == "done":
        return PlanDecision("done", note=note)
    raise ResponseFormatError(f"unknown plan action {action!r}", raw=response.text)


def run_plan_loop(
    session: FilterSession,
    backend: LlmBackend | None = None,
    judge_backend: LlmBackend | None = None,
    ledger: BudgetLedger | None = None,
) -> PlanDecision:
    """Drive plan/apply until Done; returns the final decision."""
    while True:
        decision = plan_step(session, backend, ledger)
        if decision.action == "tool":
            apply_tool(session, decision.invocation)
            if judge_backend is not None:
                report = detect_overfilter(session, judge_backend, ledger)
                if report.flagged:
                    logger.info("over-filter flagged on snapshot %d", session.active_id)
        elif decision.action == "rollback":
            rollback(session, decision.rollback_to)
        else:
            return decision


def finalize_candidates(session: FilterSession) -> CandidateSet:
    """Package the active retained set plus the full invocation/rollback trail."""
    trail: list[dict] = []
    for event in session.history:
        if event.kind == "apply" and event.invocation:
            trail.append(
                {
                    "kind": "apply",
                    "tool": event.invocation.tool,
                    "params": dict(event.invocation.params),
                    "snapshot_id": event.snapshot_id,
                }
            )
        elif event.kind == "rollback":
            trail.append({"kind": "rollback", "to": event.snapshot_id})
    return CandidateSet(tuple(sorted(session.active.retained)), tuple(trail))


def replay_trail(
    corpus: CorpusHandle,
    query: QuerySpec,
    trail: Sequence[Mapping],
    config: FilterConfig | None = None,
    seed: int = 0,
    embedder: EmbeddingProvider | None = None,
) -> FilterSession:
    """Re-run a recorded trail from snapshot 0; budget is sized to fit."""
    session = FilterSession(corpus, query, budget=len(trail) + 1, config=config, seed=seed, embedder=embedder)
    for step in trail:
        if step["kind"] == "apply":
            apply_tool(session, ToolInvocation(step["tool"], step["params"], session.active_id))
        elif step["kind"] == "rollback":
            rollback(session, step["to"])
        else:
            raise ValidationError(f"unknown trail step kind {step.get('kind')!r}")
    return session


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def session_to_json(session: FilterSession) -> dict:
    return {
        "query": spec_to_json(session.query),
        "corpus_id": session.corpus.corpus_id,
        "budget": session.budget,
        "used_steps": session.used_steps,
        "seed": session.seed,
        "active_id": session.active_id,
        "config": {
            "floor_fraction": session.config.floor_fraction,
            "sample_size": session.config.sample_size,
            "probe_sample_size": session.config.probe_sample_size,
            "handoff_tokens": session.config.handoff_tokens,
            "handoff_count": session.config.handoff_count,
            "summary_chars": session.config.summary_chars,
        },
        "snapshots": [s.to_json() for s in session.snapshots],
        "history": [e.to_json() for e in session.history],
    }


def session_from_json(
    corpus: CorpusHandle, obj: dict, embedder: EmbeddingProvider | None = None
) -> FilterSession:
    """Rebuild a session; the embedder is not serialized and must be re-supplied."""
    if obj.get("corpus_id") != corpus.corpus_id:
        raise ValidationError(
            f"session belongs to corpus {obj.get('corpus_id')!r}, not {corpus.corpus_id!r}"
        )
    session = FilterSession(
        corpus,
        spec_from_json(obj["query"]),
        budget=obj["budget"],
        config=FilterConfig(**obj["config"]),
        seed=obj["seed"],
        embedder=embedder,
    )
    session.snapshots = [Snapshot.from_json(s) for s in obj["snapshots"]]
    session.history = [HistoryEvent.from_json(e) for e in obj["history"]]
    session.active_id = obj["active_id"]
    session.used_steps = obj["used_steps"]
    session.snapshot(session.active_id)  # active pointer must be valid
    return session
