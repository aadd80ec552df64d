"""HTTP control plane: one session per query, explicit phases, JSON in and out.

Session lifecycle is clarifying -> filtering -> aggregating -> done, with
rollback returning to filtering and any backend failure parking the session
in failed.  All state lives in process; clients poll GET endpoints for
progress.  Mutating endpoints honor an Idempotency-Key header so retries
never repeat a step.
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Mapping

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .aggregation import answer_set_to_json
from .backends import BudgetLedger, LlmBackend
from .corpus import CorpusHandle
from .disambiguation import (
    Clarification,
    QuerySpec,
    apply_answer,
    classify_ambiguity,
    generate_clarifications,
    parse_query,
    resolve,
    rewrite_query,
    skip_with_default,
    spec_from_json,
    spec_to_json,
)
from .embeddings import EmbeddingProvider
from .errors import (
    AggQueryError,
    BackendError,
    BudgetExceededError,
    ConfigError,
    NotFoundError,
    ValidationError,
)
from .filtering import (
    FilterSession,
    apply_tool,
    finalize_candidates,
    open_session,
    plan_step,
    rollback,
)
from .pipeline import PipelineConfig, aggregate_candidates

logger = logging.getLogger(__name__)

PHASES = ("clarifying", "filtering", "aggregating", "done", "failed")


class ConflictError(AggQueryError):
    """Request is valid but not in the session's current phase."""


# Error class -> (HTTP status, machine-readable code).  BackendError covers
# transport, scripting, and response-shape failures from any model call.
_STATUS = (
    (ValidationError, 400, "invalid_request"),
    (NotFoundError, 404, "not_found"),
    (ConflictError, 409, "conflict"),
    (BudgetExceededError, 429, "budget_exhausted"),
    (ConfigError, 500, "config_error"),
    (BackendError, 502, "backend_error"),
)


def _envelope(exc: Exception) -> tuple[int, dict]:
    for cls, status, code in _STATUS:
        if isinstance(exc, cls):
            return status, {
                "code": code,
                "message": str(exc),
                "detail": {"type": type(exc).__name__},
            }
    return 500, {"code": "internal", "message": str(exc), "detail": {"type": type(exc).__name__}}


@dataclass
class SessionRecord:
    """Everything the service knows about one submitted query."""

    session_id: str
    corpus_id: str
    question: str
    query: QuerySpec
    clarifications: list[Clarification]
    phase: str
    budget: int
    session: FilterSession | None = None
    answer: dict | None = None  # serialized AnswerSet
    stats: dict | None = None
    error: str | None = None
    exhausted: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


class ServiceState:
    """Process-wide registry: corpora, sessions, and the idempotency cache."""

    def __init__(
        self,
        corpora: Mapping[str, CorpusHandle],
        judge_backend: LlmBackend | None,
        planner_backend: LlmBackend | None,
        clarify_backend: LlmBackend | None,
        config: PipelineConfig,
        embedder: EmbeddingProvider | None,
        ledger: BudgetLedger | None,
    ):
        self.corpora = dict(corpora)
        self.judge_backend = judge_backend
        self.planner_backend = planner_backend
        self.clarify_backend = clarify_backend
        self.config = config
        self.embedder = embedder
        self.ledger = ledger
        self.sessions: dict[str, SessionRecord] = {}
        self.idempotency: dict[tuple[str, str, str], tuple[int, dict]] = {}
        self.lock = threading.Lock()
        self._ids = itertools.count(1)

    def new_session_id(self) -> str:
        return f"s{next(self._ids):04d}"

    def record(self, session_id: str) -> SessionRecord:
        with self.lock:
            record = self.sessions.get(session_id)
        if record is None:
            raise NotFoundError(f"no session {session_id!r}")
        return record

    def corpus(self, corpus_id: str) -> CorpusHandle:
        handle = self.corpora.get(corpus_id)
        if handle is None:
            raise NotFoundError(f"no corpus {corpus_id!r}")
        return handle


def _require_phase(record: SessionRecord, *allowed: str) -> None:
    if record.phase not in allowed:
        raise ConflictError(
            f"session {record.session_id} is in phase {record.phase!r}; "
            f"this operation needs {' or '.join(repr(p) for p in allowed)}"
        )


def _fail(record: SessionRecord, exc: Exception) -> None:
    record.phase = "failed"
    record.error = f"{type(exc).__name__}: {exc}"
    logger.error("session %s failed: %s", record.session_id, record.error)


def _clarification_json(c: Clarification) -> dict:
    return {
        "clarification_id": c.clarification_id,
        "code": c.code,
        "question": c.question,
        "default": c.default,
        "target": c.target,
        "fragment": c.fragment,
        "answer": c.answer,
        "resolution_note": c.resolution_note,
        "resolved": c.resolved,
    }


def _snapshot_json(session: FilterSession, snapshot_id: int) -> dict:
    snap = session.snapshot(snapshot_id)
    retained = len(snap.retained)
    return {
        "snapshot_id": snap.snapshot_id,
        "parent_id": snap.parent_id,
        "retained_count": retained,
        "discarded_count": len(snap.discarded),
        "retained_tokens": session.retained_tokens(snap.snapshot_id),
        "floor_flag": retained == 0 or retained < session.floor_count(),
        "invocation": snap.invocation.to_json() if snap.invocation else None,
    }


def _filter_json(record: SessionRecord) -> dict | None:
    session = record.session
    if session is None:
        return None
    return {
        "active_snapshot_id": session.active_id,
        "used_steps": session.used_steps,
        "budget": session.budget,
        "exhausted": record.exhausted,
        "snapshots": [_snapshot_json(session, s.snapshot_id) for s in session.snapshots],
    }


def _record_json(record: SessionRecord) -> dict:
    return {
        "session_id": record.session_id,
        "corpus_id": record.corpus_id,
        "phase": record.phase,
        "question": record.question,
        "query": spec_to_json(record.query),
        "clarifications": [_clarification_json(c) for c in record.clarifications],
        "filter": _filter_json(record),
        "answer": record.answer,
        "stats": record.stats,
        "error": record.error,
    }


def _decision_json(decision) -> dict:
    out = {"action": decision.action, "note": decision.note, "exhausted": decision.exhausted}
    if decision.invocation is not None:
        out["invocation"] = decision.invocation.to_json()
    if decision.rollback_to is not None:
        out["rollback_to"] = decision.rollback_to
    return out


def _open_filter_session(state: ServiceState, record: SessionRecord) -> None:
    record.session = open_session(
        state.corpus(record.corpus_id),
        record.query,
        budget=record.budget,
        config=state.config.filter_config,
        seed=state.config.seed,
        embedder=state.embedder,
    )
    record.phase = "filtering"


def create_app(
    corpora: Mapping[str, CorpusHandle],
    judge_backend: LlmBackend | None = None,
    planner_backend: LlmBackend | None = None,
    clarify_backend: LlmBackend | None = None,
    config: PipelineConfig | None = None,
    embedder: EmbeddingProvider | None = None,
    ledger: BudgetLedger | None = None,
) -> FastAPI:
    """Build the API around a fixed corpus registry and backend wiring.

    Backends default to None: planning and clarification fall back to their
    offline rule paths, while aggregation without a judge is a config error
    surfaced at call time rather than startup.
    """
    state = ServiceState(
        corpora,
        judge_backend,
        planner_backend,
        clarify_backend,
        config or PipelineConfig(),
        embedder,
        ledger,
    )
    app = FastAPI(title="aggquery", docs_url=None, redoc_url=None)
    app.state.service = state

    @app.exception_handler(AggQueryError)
    async def _domain_error(request: Request, exc: AggQueryError):
        status, body = _envelope(exc)
        return JSONResponse(body, status_code=status)

    @app.exception_handler(RequestValidationError)
    async def _body_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            {
                "code": "invalid_request",
                "message": "malformed request body",
                "detail": {"type": "RequestValidationError", "errors": exc.errors()},
            },
            status_code=400,
        )

    def _idempotent(request: Request, producer) -> JSONResponse:
        """Replay a cached 2xx response instead of repeating the mutation."""
        key = request.headers.get("Idempotency-Key")
        if key is None:
            payload, status = producer()
            return JSONResponse(payload, status_code=status)
        cache_key = (request.method, request.url.path, key)
        with state.lock:
            hit = state.idempotency.get(cache_key)
        if hit is not None:
            return JSONResponse(hit[1], status_code=hit[0])
        payload, status = producer()
        if 200 <= status < 300:
            with state.lock:
                state.idempotency[cache_key] = (status, payload)
        return JSONResponse(payload, status_code=status)

    def _field(payload, name: str, kind: type):
        if not isinstance(payload, dict):
            raise ValidationError("request body must be a JSON object")
        value = payload.get(name)
        if not isinstance(value, kind):
            raise ValidationError(f"field {name!r} must be a {kind.__name__}")
        return value

    # -- corpora -------------------------------------------------------------

    @app.get("/v1/corpora")
    def list_corpora():
        return {
            "corpora": [
                {
                    "corpus_id": cid,
                    "documents": len(handle.doc_ids),
                    "chunks": len(handle),
                }
                for cid, handle in sorted(state.corpora.items())
            ]
        }

    @app.get("/v1/corpora/{corpus_id}/chunks/{chunk_id}")
    def get_chunk(corpus_id: str, chunk_id: str):
        chunk = state.corpus(corpus_id).chunk(chunk_id)
        return {
            "chunk_id": chunk.chunk_id,
            "doc_id": chunk.doc_id,
            "text": chunk.text,
            "token_count": chunk.token_count,
        }

    # -- session lifecycle ----------------------------------------------------

    @app.post("/v1/queries")
    def submit_query(request: Request, payload: dict = None):
        def produce():
            corpus_id = _field(payload, "corpus_id", str)
            budget = payload.get("budget", state.config.filter_budget)
            if not isinstance(budget, int) or isinstance(budget, bool) or budget < 0:
                raise ValidationError("field 'budget' must be a non-negative integer")
            state.corpus(corpus_id)  # 404 before any session is created
            # Scripted clients may embed a fully structured query; otherwise
            # the question text is parsed here.
            if "query" in payload:
                spec = replace(spec_from_json(payload["query"]), query_id="pending")
                question = spec.raw_text
            else:
                question = _field(payload, "question", str)
                spec = None
            with state.lock:
                session_id = state.new_session_id()
            record = SessionRecord(
                session_id=session_id,
                corpus_id=corpus_id,
                question=question,
                query=(
                    replace(spec, query_id=session_id)
                    if spec is not None
                    else parse_query(question, query_id=session_id)
                ),
                clarifications=[],
                phase="clarifying",
                budget=budget,
            )
            try:
                if spec is None and state.clarify_backend is not None:
                    record.query = parse_query(
                        question, state.clarify_backend, session_id, state.ledger
                    )
                labels = classify_ambiguity(record.query, state.clarify_backend, state.ledger)
                record.clarifications = generate_clarifications(
                    record.query, labels, state.clarify_backend, state.ledger
                )
                if not record.clarifications:
                    _open_filter_session(state, record)
            except BackendError as exc:
                _fail(record, exc)
                with state.lock:
                    state.sessions[session_id] = record
                raise
            with state.lock:
                state.sessions[session_id] = record
            return {
                "session_id": session_id,
                "phase": record.phase,
                "clarifications": [_clarification_json(c) for c in record.clarifications],
            }, 201

        return _idempotent(request, produce)

    @app.get("/v1/queries/{session_id}")
    def get_session(session_id: str):
        record = state.record(session_id)
        with record.lock:
            return _record_json(record)

    @app.post("/v1/queries/{session_id}/clarifications/{clarification_id}")
    def answer_clarification(
        request: Request, session_id: str, clarification_id: str, payload: dict = None
    ):
        def produce():
            record = state.record(session_id)
            with record.lock:
                _require_phase(record, "clarifying")
                slot = next(
                    (
                        n
                        for n, c in enumerate(record.clarifications)
                        if c.clarification_id == clarification_id
                    ),
                    None,
                )
                if slot is None:
                    raise NotFoundError(
                        f"no clarification {clarification_id!r} in session {session_id}"
                    )
                pending = record.clarifications[slot]
                if pending.resolved:
                    raise ConflictError(f"clarification {clarification_id} is already resolved")
                if not isinstance(payload, dict):
                    raise ValidationError("request body must be a JSON object")
                if payload.get("skip") is True:
                    resolved = skip_with_default(pending)
                else:
                    resolved = resolve(pending, _field(payload, "answer", str))
                record.query = apply_answer(record.query, pending, resolved.answer)
                record.clarifications[slot] = resolved
                if all(c.resolved for c in record.clarifications):
                    try:
                        record.query = rewrite_query(
                            record.query,
                            backend=state.clarify_backend,
                            clarifications=record.clarifications,
                        )
                    except BackendError as exc:
                        _fail(record, exc)
                        raise
                    _open_filter_session(state, record)
                return {
                    "session_id": session_id,
                    "phase": record.phase,
                    "clarification": _clarification_json(resolved),
                    "rewritten_question": record.query.raw_text,
                }, 200

        return _idempotent(request, produce)

    @app.post("/v1/queries/{session_id}/filter/step")
    def filter_step(request: Request, session_id: str):
        def produce():
            record = state.record(session_id)
            with record.lock:
                _require_phase(record, "filtering")
                session = record.session
                try:
                    decision = plan_step(session, state.planner_backend, state.ledger)
                    if decision.action == "tool":
                        apply_tool(session, decision.invocation)
                    elif decision.action == "rollback":
                        rollback(session, decision.rollback_to)
                    else:
                        record.exhausted = decision.exhausted
                        record.phase = "aggregating"
                except BackendError as exc:
                    _fail(record, exc)
                    raise
                return {
                    "session_id": session_id,
                    "phase": record.phase,
                    "decision": _decision_json(decision),
                    "snapshot": _snapshot_json(session, session.active_id),
                    "used_steps": session.used_steps,
                    "budget": session.budget,
                }, 200

        return _idempotent(request, produce)

    @app.post("/v1/queries/{session_id}/rollback")
    def rollback_session(request: Request, session_id: str, payload: dict = None):
        def produce():
            record = state.record(session_id)
            with record.lock:
                _require_phase(record, "filtering", "aggregating", "done")
                snapshot_id = _field(payload, "snapshot_id", int)
                rollback(record.session, snapshot_id)
                # Rolling back reopens filtering; any stored answer no longer
                # describes the active snapshot.
                record.phase = "filtering"
                record.answer = None
                record.stats = None
                return {
                    "session_id": session_id,
                    "phase": record.phase,
                    "snapshot": _snapshot_json(record.session, record.session.active_id),
                    "snapshots_kept": len(record.session.snapshots),
                }, 200

        return _idempotent(request, produce)

    @app.post("/v1/queries/{session_id}/aggregate")
    def aggregate(request: Request, session_id: str):
        def produce():
            record = state.record(session_id)
            with record.lock:
                _require_phase(record, "filtering", "aggregating")
                if state.judge_backend is None:
                    raise ConfigError("no judge backend configured")
                record.phase = "aggregating"
                try:
                    result = aggregate_candidates(
                        state.corpus(record.corpus_id),
                        record.query,
                        finalize_candidates(record.session),
                        state.judge_backend,
                        embedder=state.embedder,
                        config=state.config,
                        ledger=state.ledger,
                    )
                except BackendError as exc:
                    _fail(record, exc)
                    raise
                record.answer = answer_set_to_json(result.answer)
                record.stats = {
                    "candidate_chunks": len(result.candidate_chunk_ids),
                    "n_clusters": result.n_clusters,
                    "n_batches": result.n_batches,
                    "cross_batch_pairs": result.cross_batch_pairs,
                }
                record.phase = "done"
                return {
                    "session_id": session_id,
                    "phase": record.phase,
                    "answer": record.answer,
                    "stats": record.stats,
                }, 200

        return _idempotent(request, produce)

    @app.get("/v1/queries/{session_id}/result")
    def get_result(session_id: str):
        record = state.record(session_id)
        with record.lock:
            _require_phase(record, "done")
            return {
                "session_id": session_id,
                "phase": record.phase,
                "answer": record.answer,
                "stats": record.stats,
            }

    return app
