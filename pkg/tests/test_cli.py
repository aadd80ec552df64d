"""CLI round trips: every offline subcommand plus the HTTP client verbs."""

import json

import pytest

from aggquery.backends import ScriptedBackend
from aggquery.cli import config_from_toml, main, make_backend
from aggquery.corpus import load_corpus, save_corpus
from aggquery.disambiguation import spec_to_json
from aggquery.errors import ConfigError, ValidationError
from aggquery.index import load_bm25
from aggquery.synthetic import MarkerJudgeBackend, build_marker_fixture

FX = build_marker_fixture(seed=11)


def run_cli(capsys, *argv) -> dict:
    rc = main(list(argv))
    captured = capsys.readouterr()
    assert rc == 0, captured.err
    return json.loads(captured.out)


def write_jsonl(path, rows) -> str:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return str(path)


@pytest.fixture()
def corpus_dir(tmp_path):
    out = tmp_path / "corpus"
    save_corpus(FX.corpus, out)
    return str(out)


# -- corpus tooling -----------------------------------------------------------


def test_ingest_stats_index_round_trip(tmp_path, capsys):
    docs = write_jsonl(
        tmp_path / "docs.jsonl",
        [
            {"doc_id": "d0", "text": "alpha beta gamma " * 30, "meta": {"source": "t"}},
            {"doc_id": "d1", "text": "delta epsilon", "meta": {}},
        ],
    )
    corpus_dir = str(tmp_path / "corpus")
    out = run_cli(
        capsys,
        "ingest", "--in", docs, "--out", corpus_dir,
        "--max-tokens", "16", "--overlap", "4", "--corpus-id", "toy",
    )
    assert out["corpus_id"] == "toy"
    assert out["documents"] == 2
    assert out["chunks"] >= 2

    stats = run_cli(capsys, "stats", "--corpus", corpus_dir)
    assert stats["chunk_count"] == out["chunks"]
    assert stats["doc_count"] == 2
    assert stats["evidence_density"] is None

    index_dir = str(tmp_path / "index")
    indexed = run_cli(capsys, "index", "--corpus", corpus_dir, "--out", index_dir)
    assert indexed["chunks"] == out["chunks"]
    assert load_bm25(index_dir).n_docs == out["chunks"]


def test_stats_with_gold_reports_density(tmp_path, corpus_dir, capsys):
    gold = write_jsonl(
        tmp_path / "gold.jsonl",
        [
            {
                "query_id": FX.query.query_id,
                "question": FX.query.raw_text,
                "entity_type": FX.query.entity_type,
                "gold_entities": sorted(FX.gold_entities),
                "gold_evidence_chunk_ids": sorted(FX.gold_evidence),
                "query": spec_to_json(FX.query),
            }
        ],
    )
    stats = run_cli(capsys, "stats", "--corpus", corpus_dir, "--gold", gold)
    assert stats["evidence_count"] == len(FX.gold_evidence)
    assert stats["evidence_density"] == pytest.approx(
        len(FX.gold_evidence) / len(FX.corpus)
    )


# -- filter / aggregate -------------------------------------------------------


def test_filter_replay_then_aggregate(tmp_path, corpus_dir, capsys):
    query_path = tmp_path / "q.json"
    query_path.write_text(json.dumps(spec_to_json(FX.query)), encoding="utf-8")
    script_path = tmp_path / "plan.json"
    script_path.write_text(
        json.dumps(
            [
                {"kind": "apply", "tool": "keyword_any", "params": {"terms": ["entity"]}},
                {"kind": "rollback", "to": 0},
                {"kind": "apply", "tool": "keyword_any", "params": {"terms": ["entity"]}},
            ]
        ),
        encoding="utf-8",
    )
    session_path = str(tmp_path / "session.json")
    out = run_cli(
        capsys,
        "filter", "--corpus", corpus_dir, "--query", str(query_path),
        "--script", str(script_path), "--out", session_path,
    )
    assert out["snapshots"] == 3  # root + two applies; rollback adds none
    assert out["active_snapshot_id"] == 2
    assert out["candidates"] > 0

    answer_path = str(tmp_path / "answer.json")
    agg = run_cli(
        capsys,
        "aggregate", "--corpus", corpus_dir, "--session", session_path,
        "--lambda", "0.5", "--max-ctx", "8000", "--judge", "marker",
        "--out", answer_path,
    )
    # Every mention chunk contains the literal word "Entity", so the replayed
    # filter loses no evidence and the marker judge recovers the gold set.
    assert agg["count"] == FX.y
    saved = json.loads((tmp_path / "answer.json").read_text(encoding="utf-8"))
    assert saved["count"] == FX.y
    assert {e["canonical"] for e in saved["entities"]} == set(FX.gold_entities)


# -- eval ---------------------------------------------------------------------


def test_eval_writes_a_report(tmp_path, corpus_dir, capsys):
    gold = write_jsonl(
        tmp_path / "gold.jsonl",
        [
            {
                "query_id": FX.query.query_id,
                "question": FX.query.raw_text,
                "entity_type": FX.query.entity_type,
                "gold_entities": sorted(FX.gold_entities),
                "gold_evidence_chunk_ids": sorted(FX.gold_evidence),
                "query": spec_to_json(FX.query),
            }
        ],
    )
    run_toml = tmp_path / "run.toml"
    run_toml.write_text(
        '[pipeline]\nlambda = 0.5\nidentity_filter = true\n\n'
        '[eval]\nrecall_mode = "macro"\n\n[judge]\nbackend = "marker"\n',
        encoding="utf-8",
    )
    report_path = str(tmp_path / "report.json")
    out = run_cli(
        capsys,
        "eval", "--corpus", corpus_dir, "--gold", gold,
        "--config", str(run_toml), "--out", report_path,
    )
    assert out["queries"] == 1
    assert out["mean_nace"] == 0.0
    assert out["mean_recall"] == 1.0

    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["rows"][0]["predicted"] == FX.y
    assert report["rows"][0]["recall"] == 1.0


# -- expand -------------------------------------------------------------------


def test_expand_keeps_mid_band_documents(tmp_path, corpus_dir, capsys):
    some_text = FX.corpus.chunk(FX.corpus.chunk_ids[0]).text
    pool = write_jsonl(
        tmp_path / "pool.jsonl",
        [
            {"doc_id": "dup", "text": some_text, "meta": {}},
            {"doc_id": "alien", "text": "zzzz qqqq xxxx wwww", "meta": {}},
        ],
    )
    kept_path = tmp_path / "kept.jsonl"
    out = run_cli(
        capsys,
        "expand", "--core", corpus_dir, "--pool", pool,
        "--lo", "0.01", "--hi", "1e9", "--out", str(kept_path),
    )
    assert out["kept_doc_ids"] == ["dup"]
    assert {s["doc_id"]: s["top1"] for s in out["scores"]}["alien"] == 0.0
    assert out["histogram"]
    kept_rows = [json.loads(line) for line in kept_path.read_text().splitlines()]
    assert [r["doc_id"] for r in kept_rows] == ["dup"]


# -- backend specs and config files --------------------------------------------


def test_make_backend_specs(tmp_path):
    assert make_backend(None) is None
    assert make_backend("none") is None
    assert isinstance(make_backend("marker"), MarkerJudgeBackend)

    rules = tmp_path / "rules.json"
    rules.write_text(
        json.dumps([{"purpose": "judge", "contains": "x", "response": {"findings": []}}]),
        encoding="utf-8",
    )
    assert isinstance(make_backend(f"scripted:{rules}"), ScriptedBackend)

    with pytest.raises(ConfigError):
        make_backend("bogus")
    with pytest.raises(ConfigError):  # AGGQUERY_LLM_* env vars are not set
        make_backend("http")


def test_config_from_toml_maps_lambda(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "[pipeline]\nlambda = 0.25\nmax_context = 500\n\n[filter]\nfloor_fraction = 0.02\n",
        encoding="utf-8",
    )
    config, raw = config_from_toml(path)
    assert config.lam == 0.25
    assert config.max_context == 500
    assert config.filter_config.floor_fraction == 0.02
    assert "pipeline" in raw

    bad = tmp_path / "bad.toml"
    bad.write_text("[pipeline]\nnot_a_knob = 1\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="pipeline"):
        config_from_toml(bad)


def test_cli_errors_exit_2_with_an_envelope(tmp_path, capsys):
    rc = main(["stats", "--corpus", str(tmp_path / "missing")])
    captured = capsys.readouterr()
    assert rc == 2
    envelope = json.loads(captured.err)
    assert envelope["detail"]["type"] == "NotFoundError"


# -- HTTP client verbs ----------------------------------------------------------


class FakeResponse:
    ok = True
    text = "{}"

    def __init__(self, payload):
        self._payload = payload

    def json(self):
        return self._payload


def fake_requests(monkeypatch, calls):
    def fake(method, url, json=None, headers=None, timeout=None):
        calls.append({"method": method, "url": url, "json": json, "headers": headers})
        return FakeResponse({"echo": True})

    monkeypatch.setattr("requests.request", fake)


def test_api_submit_posts_the_question(monkeypatch, capsys):
    calls = []
    fake_requests(monkeypatch, calls)
    out = run_cli(
        capsys,
        "api", "submit", "--base-url", "http://host:9", "--corpus-id", "toy",
        "--question", "How many?", "--budget", "3", "--idempotency-key", "k1",
    )
    assert out == {"echo": True}
    assert calls == [
        {
            "method": "POST",
            "url": "http://host:9/v1/queries",
            "json": {"corpus_id": "toy", "question": "How many?", "budget": 3},
            "headers": {"Idempotency-Key": "k1"},
        }
    ]


def test_api_verbs_hit_their_endpoints(monkeypatch, capsys):
    calls = []
    fake_requests(monkeypatch, calls)
    run_cli(capsys, "api", "corpora")
    run_cli(capsys, "api", "show", "--session", "s1")
    run_cli(capsys, "api", "clarify", "--session", "s1", "--clarification", "c1", "--skip")
    run_cli(capsys, "api", "step", "--session", "s1")
    run_cli(capsys, "api", "rollback", "--session", "s1", "--snapshot", "0")
    run_cli(capsys, "api", "aggregate", "--session", "s1")
    run_cli(capsys, "api", "result", "--session", "s1")
    assert [(c["method"], c["url"].split("/v1")[1]) for c in calls] == [
        ("GET", "/corpora"),
        ("GET", "/queries/s1"),
        ("POST", "/queries/s1/clarifications/c1"),
        ("POST", "/queries/s1/filter/step"),
        ("POST", "/queries/s1/rollback"),
        ("POST", "/queries/s1/aggregate"),
        ("GET", "/queries/s1/result"),
    ]
    assert calls[2]["json"] == {"skip": True}
    assert calls[4]["json"] == {"snapshot_id": 0}
