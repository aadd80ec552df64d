"""Command-line front end: corpus tooling, offline runs, server, API client.

Offline subcommands work directly against persisted corpora; the `api`
group mirrors every HTTP endpoint so scripted clients can drive a running
server without writing any code.
"""

from __future__ import annotations

import argparse
import json
import sys
import urllib.parse
from dataclasses import asdict
from pathlib import Path

from .aggregation import EFFECTIVE_CONTEXT, answer_set_to_json
from .backends import HttpBackendConfig, HttpChatBackend, LlmBackend, ScriptedBackend
from .corpus import (
    ChunkPolicy,
    corpus_stats,
    ingest_documents,
    load_corpus,
    read_documents_jsonl,
)
from .disambiguation import spec_from_json
from .errors import AggQueryError, ConfigError, ValidationError
from .filtering import (
    FilterConfig,
    finalize_candidates,
    replay_trail,
    session_from_json,
    session_to_json,
)
from .harness import expand_corpus, load_gold, run_benchmark, score_histogram
from .index import build_bm25, load_bm25, save_bm25
from .metrics import DEFAULT_EPSILON
from .pipeline import PipelineConfig, aggregate_candidates
from .synthetic import MarkerJudgeBackend


def _print(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def make_backend(spec: str | None) -> LlmBackend | None:
    """Build a backend from a CLI spec: marker, http, or scripted:FILE.

    scripted:FILE loads substring rules [{purpose, contains, response}, ...];
    http reads its endpoint and model from AGGQUERY_LLM_* env vars.
    """
    if spec is None or spec == "none":
        return None
    if spec == "marker":
        return MarkerJudgeBackend()
    if spec == "http":
        return HttpChatBackend(HttpBackendConfig.from_env())
    if spec.startswith("scripted:"):
        backend = ScriptedBackend()
        for rule in _load_json(spec.split(":", 1)[1]):
            response = rule["response"]
            if not isinstance(response, str):
                response = json.dumps(response)
            backend.register_rule(rule["purpose"], rule["contains"], response)
        return backend
    raise ConfigError(f"unknown backend spec {spec!r}; want marker, http, scripted:FILE, or none")


def _toml_load(path: str | Path) -> dict:
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    with Path(path).open("rb") as fh:
        return tomllib.load(fh)


def config_from_toml(path: str | Path) -> tuple[PipelineConfig, dict]:
    """Split run.toml into a PipelineConfig and the non-pipeline sections."""
    raw = _toml_load(path)
    pipeline = dict(raw.get("pipeline", {}))
    if "lambda" in pipeline:
        pipeline["lam"] = pipeline.pop("lambda")
    filter_section = raw.get("filter")
    if filter_section is not None:
        pipeline["filter_config"] = FilterConfig(**filter_section)
    try:
        config = PipelineConfig(**pipeline)
    except TypeError as exc:
        raise ValidationError(f"bad [pipeline] section in {path}: {exc}") from exc
    return config, raw


# ---------------------------------------------------------------------------
# Offline subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    docs = read_documents_jsonl(args.in_path)
    policy = ChunkPolicy(max_tokens=args.max_tokens, overlap=args.overlap)
    handle = ingest_documents(docs, policy, corpus_id=args.corpus_id, out_dir=args.out)
    _print({"corpus_id": handle.corpus_id, "documents": len(docs), "chunks": len(handle)})
    return 0


def cmd_index(args) -> int:
    corpus = load_corpus(args.corpus)
    path = save_bm25(build_bm25(corpus, k1=args.k1, b=args.b), args.out)
    _print({"index_dir": str(path), "chunks": len(corpus)})
    return 0


def cmd_stats(args) -> int:
    corpus = load_corpus(args.corpus)
    evidence = None
    if args.gold:
        gold = load_gold(args.gold)
        evidence = sorted({cid for q in gold.queries for cid in q.gold_evidence_chunk_ids})
    _print(asdict(corpus_stats(corpus, evidence)))
    return 0


def cmd_filter(args) -> int:
    corpus = load_corpus(args.corpus)
    query = spec_from_json(_load_json(args.query))
    session = replay_trail(corpus, query, _load_json(args.script), seed=args.seed)
    _write_json(args.out, session_to_json(session))
    candidates = finalize_candidates(session)
    _print(
        {
            "out": args.out,
            "snapshots": len(session.snapshots),
            "active_snapshot_id": session.active_id,
            "candidates": len(candidates.chunk_ids),
        }
    )
    return 0


def cmd_aggregate(args) -> int:
    corpus = load_corpus(args.corpus)
    session = session_from_json(corpus, _load_json(args.session))
    judge = make_backend(args.judge)
    if judge is None:
        raise ConfigError("aggregate needs a judge backend")
    config = PipelineConfig(lam=args.lam, max_context=args.max_ctx)
    result = aggregate_candidates(
        corpus, session.query, finalize_candidates(session), judge, config=config
    )
    answer = answer_set_to_json(result.answer)
    if args.out:
        _write_json(args.out, answer)
    _print(
        {
            "count": result.answer.count,
            "n_clusters": result.n_clusters,
            "n_batches": result.n_batches,
            "cross_batch_pairs": result.cross_batch_pairs,
            "answer": answer,
        }
    )
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    gold = load_gold(args.gold)
    config = PipelineConfig()
    raw: dict = {}
    if args.config:
        config, raw = config_from_toml(args.config)
    eval_section = raw.get("eval", {})
    judge = make_backend(args.judge or raw.get("judge", {}).get("backend", "marker"))
    planner = make_backend(args.planner or raw.get("planner", {}).get("backend"))
    report = run_benchmark(
        corpus,
        gold,
        judge,
        planner,
        config=config,
        recall_mode=eval_section.get("recall_mode", "macro"),
        epsilon=eval_section.get("epsilon", DEFAULT_EPSILON),
    )
    _write_json(args.out, report.to_json())
    _print(
        {
            "out": args.out,
            "queries": len(report.rows),
            "mean_nace": report.mean_nace,
            "mean_recall": report.mean_recall,
        }
    )
    return 0


def cmd_expand(args) -> int:
    core = load_corpus(args.core)
    pool = read_documents_jsonl(args.pool)
    index = load_bm25(args.index) if args.index else None
    report = expand_corpus(core, pool, args.lo, args.hi, index=index)
    if args.out:
        with Path(args.out).open("w", encoding="utf-8") as fh:
            for doc in report.kept:
                fh.write(
                    json.dumps(
                        {"doc_id": doc.doc_id, "text": doc.text, "meta": dict(doc.meta)},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    out = report.to_json()
    out["histogram"] = score_histogram(report.scores)
    _print(out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    corpora = {}
    for corpus_dir in args.corpus:
        handle = load_corpus(corpus_dir)
        if handle.corpus_id in corpora:
            raise ValidationError(f"duplicate corpus_id {handle.corpus_id!r}")
        corpora[handle.corpus_id] = handle
    app = create_app(
        corpora,
        judge_backend=make_backend(args.judge),
        planner_backend=make_backend(args.planner),
        clarify_backend=make_backend(args.clarify),
    )
    if args.console is not None:
        from starlette.staticfiles import StaticFiles

        if not Path(args.console, "index.html").is_file():
            raise ConfigError(f"no index.html under {args.console}")
        # Mounted after the API routes, so /v1/* keeps precedence.
        app.mount("/", StaticFiles(directory=args.console, html=True), name="console")
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# HTTP client subcommands
# ---------------------------------------------------------------------------


def _request(args, method: str, path: str, body: dict | None = None) -> int:
    import requests

    headers = {}
    if getattr(args, "idempotency_key", None):
        headers["Idempotency-Key"] = args.idempotency_key
    resp = requests.request(
        method, args.base_url.rstrip("/") + path, json=body, headers=headers, timeout=args.timeout
    )
    try:
        payload = resp.json()
    except ValueError:
        payload = {"raw": resp.text}
    _print(payload)
    return 0 if resp.ok else 1


def cmd_api(args) -> int:
    verb = args.verb
    if verb == "corpora":
        return _request(args, "GET", "/v1/corpora")
    if verb == "submit":
        body = {"corpus_id": args.corpus_id, "question": args.question}
        if args.budget is not None:
            body["budget"] = args.budget
        return _request(args, "POST", "/v1/queries", body)
    if verb == "show":
        return _request(args, "GET", f"/v1/queries/{args.session}")
    if verb == "clarify":
        body = {"skip": True} if args.skip else {"answer": args.answer}
        return _request(
            args,
            "POST",
            f"/v1/queries/{args.session}/clarifications/{args.clarification}",
            body,
        )
    if verb == "step":
        return _request(args, "POST", f"/v1/queries/{args.session}/filter/step")
    if verb == "rollback":
        return _request(
            args, "POST", f"/v1/queries/{args.session}/rollback", {"snapshot_id": args.snapshot}
        )
    if verb == "aggregate":
        return _request(args, "POST", f"/v1/queries/{args.session}/aggregate")
    if verb == "result":
        return _request(args, "GET", f"/v1/queries/{args.session}/result")
    if verb == "chunk":
        # Chunk ids contain '#'; unencoded it would be read as a fragment.
        encoded = urllib.parse.quote(args.chunk, safe="")
        return _request(args, "GET", f"/v1/corpora/{args.corpus_id}/chunks/{encoded}")
    raise ValidationError(f"unknown api verb {verb!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggquery", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="chunk a JSONL document file into a corpus directory")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--overlap", type=int, default=64)
    p.add_argument("--corpus-id", default="corpus")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build and persist a lexical index for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("stats", help="corpus size and evidence density")
    p.add_argument("--corpus", required=True)
    p.add_argument("--gold")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("filter", help="replay a scripted tool trail into a session file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("aggregate", help="cluster, batch, judge, and count a saved session")
    p.add_argument("--corpus", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--max-ctx", type=int, default=EFFECTIVE_CONTEXT)
    p.add_argument("--judge", default="marker")
    p.add_argument("--out")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("eval", help="run a gold suite end to end and write a report")
    p.add_argument("--corpus", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--judge")
    p.add_argument("--planner")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("expand", help="filter a document pool by top-1 relevance to a core corpus")
    p.add_argument("--core", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--lo", type=float, required=True)
    p.add_argument("--hi", type=float, required=True)
    p.add_argument("--index")
    p.add_argument("--out")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--corpus", action="append", required=True, help="corpus directory; repeatable")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--judge", default="marker")
    p.add_argument("--planner", default="none")
    p.add_argument("--clarify", default="none")
    p.add_argument("--console", help="directory of built console assets to host at /")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("api", help="call a running server; one verb per endpoint")
    p.add_argument(
        "verb",
        choices=[
            "corpora",
            "submit",
            "show",
            "clarify",
            "step",
            "rollback",
            "aggregate",
            "result",
            "chunk",
        ],
    )
    p.add_argument("--base-url", default="http://127.0.0.1:8080")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--idempotency-key")
    p.add_argument("--corpus-id")
    p.add_argument("--question")
    p.add_argument("--budget", type=int)
    p.add_argument("--session")
    p.add_argument("--clarification")
    p.add_argument("--answer")
    p.add_argument("--skip", action="store_true")
    p.add_argument("--snapshot", type=int)
    p.add_argument("--chunk")
    p.set_defaults(func=cmd_api)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AggQueryError as exc:
        json.dump(
            {"code": "error", "message": str(exc), "detail": {"type": type(exc).__name__}},
            sys.stderr,
            indent=2,
        )
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
